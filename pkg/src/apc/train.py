"""Training for the forward recommender and the reversed abductive model.

Both use the same recipe: next-item binary cross-entropy at every position
with uniformly sampled negatives, Adam, and model selection by validation
NDCG@10 under the all-ranking protocol.

Validation targets: the forward model predicts each user's held-out
validation item from the training span. The reversed model predicts the
oldest item ``v_1`` from ``[v_T, ..., v_2]``; that item is withheld from its
training targets.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import FORWARD, PAD, REVERSED, ConfigError, ContractError, SequenceDataset, reverse_dataset
from .evaluate import ndcg_batch
from .model import SequentialScorer, inference, save_checkpoint

logger = logging.getLogger(__name__)

RECOMMENDER = "recommender"
ABDUCTIVE = "abductive"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2: float = 0.0
    dropout: float = 0.2
    epochs: int = 50
    batch_size: int = 128
    negatives: int = 1
    seed: int = 0
    patience: int = 5
    eval_every: int = 1
    dim: int = 32
    heads: int = 1
    exclude_history: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.negatives < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, negatives >= 1, eval_every >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


def _role_for(ds: SequenceDataset, role: str | None) -> str:
    expected = {RECOMMENDER: FORWARD, ABDUCTIVE: REVERSED}
    if role is None:
        return RECOMMENDER if ds.direction == FORWARD else ABDUCTIVE
    if role not in expected:
        raise ConfigError(f"unknown role {role!r}")
    if ds.direction != expected[role]:
        raise ContractError(f"the {role} model must be trained on {expected[role]} data, "
                            f"got {ds.direction}")
    return role


def training_view(ds: SequenceDataset, role: str):
    """(training rows, validation inputs, validation targets) for a role."""
    if role == RECOMMENDER:
        return ds.items, ds.items, ds.valid
    rows = ds.items
    lengths = (rows != PAD).sum(axis=1)
    last = rows[:, -1].copy()
    held = np.concatenate([np.zeros((len(rows), 1), dtype=rows.dtype), rows[:, :-1]], axis=1)
    # rows with a single real item keep it for training and have no validation target
    single = lengths < 2
    held[single] = rows[single]
    last[single] = PAD
    return held, held, last


def _sample_negatives(rng, user_items: np.ndarray, shape, n_items: int) -> np.ndarray:
    """Uniform negatives avoiding each user's own items (rows of ``user_items``)."""
    B = shape[0]
    neg = rng.integers(1, n_items + 1, size=shape)
    rows = np.arange(B).reshape((B,) + (1,) * (len(shape) - 1))
    for _ in range(20):
        clash = user_items[rows, neg]
        if not clash.any():
            break
        neg[clash] = rng.integers(1, n_items + 1, size=int(clash.sum()))
    return neg


def validation_ndcg(model: SequentialScorer, inputs: np.ndarray, targets: np.ndarray,
                    exclude_history: bool = True, n: int = 10, batch: int = 512) -> float:
    ok = targets != PAD
    if not ok.any():
        return float("nan")
    inputs, targets = inputs[ok], targets[ok]
    total = 0.0
    with inference(model), torch.no_grad():
        for s in range(0, len(inputs), batch):
            x = inputs[s:s + batch]
            h = model.last_hidden(x)
            scores = (h @ model.embedding.T).double().numpy()
            exclude = np.zeros_like(scores, dtype=bool)
            if exclude_history:
                exclude[np.repeat(np.arange(len(x)), x.shape[1]), x.ravel()] = True
            total += ndcg_batch(scores, targets[s:s + batch], exclude, n).sum()
    return total / len(inputs)


def train_model(ds: SequenceDataset, cfg: TrainConfig, backbone: str = "attention-mini",
                role: str | None = None, init: str = "normal") -> SequentialScorer:
    """Fit one scorer. The returned model carries a ``fit_log`` dict."""
    role = _role_for(ds, role)
    if len(ds) == 0 or not (ds.items != PAD).any():
        raise ContractError("cannot train on an empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = SequentialScorer(ds.n_items, ds.max_len, cfg.dim, backbone, cfg.heads,
                             cfg.dropout, init=init)
    rows, val_in, val_tgt = training_view(ds, role)
    log = {"role": role, "backbone": backbone, "losses": [], "val_ndcg": [],
           "best_epoch": 0, "best_ndcg": float("nan")}
    model.fit_log = log
    if cfg.epochs == 0:
        return model.eval()

    inputs = np.concatenate([np.zeros((len(rows), 1), dtype=np.int64), rows[:, :-1]], axis=1)
    targets = np.where(inputs != PAD, rows, PAD)
    user_items = np.zeros((len(ds), ds.n_items + 1), dtype=bool)
    user_items[np.repeat(np.arange(len(ds)), ds.max_len), ds.items.ravel()] = True
    user_items[:, PAD] = False
    usable = np.flatnonzero((targets != PAD).any(axis=1))
    has_val = val_tgt is not None and (val_tgt != PAD).any()

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.l2)
    best_state, best, stale = copy.deepcopy(model.state_dict()), -np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = rng.permutation(usable)
        total, count = 0.0, 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x = torch.as_tensor(inputs[idx])
            pos = torch.as_tensor(targets[idx])
            neg = torch.as_tensor(_sample_negatives(
                rng, user_items[idx], (len(idx), ds.max_len, cfg.negatives), ds.n_items))
            rows_x, mask = model.item_rows(x)
            h = model.encode(rows_x, mask)
            pos_logit = (h * model.item_emb(pos)).sum(-1)
            neg_logit = torch.einsum("bld,blkd->blk", h, model.item_emb(neg))
            valid = (pos != PAD).to(h.dtype)
            per_pos = -F.logsigmoid(pos_logit) - F.logsigmoid(-neg_logit).sum(-1)
            loss = (per_pos * valid).sum() / valid.sum()
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss ({role}, epoch {epoch}, batch {s // cfg.batch_size})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.item_emb.weight[PAD].zero_()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        log["losses"].append(total / max(count, 1))

        if has_val and epoch % cfg.eval_every == 0:
            score = validation_ndcg(model, val_in, val_tgt, cfg.exclude_history)
            log["val_ndcg"].append(score)
            logger.info("%s epoch %d loss %.4f val NDCG@10 %.4f", role, epoch, log["losses"][-1], score)
            if score > best:
                best, stale = score, 0
                best_state = copy.deepcopy(model.state_dict())
                log["best_epoch"], log["best_ndcg"] = epoch, score
            else:
                stale += 1
                if cfg.patience > 0 and stale >= cfg.patience:
                    logger.info("%s early stop at epoch %d", role, epoch)
                    break
        elif not has_val:
            best_state = copy.deepcopy(model.state_dict())
            log["best_epoch"] = epoch
    model.load_state_dict(best_state)
    return model.eval()


def train_pair(train_forward: SequenceDataset, cfg_R: TrainConfig, cfg_A: TrainConfig,
               backbone: str = "attention-mini", out_dir: str | os.PathLike | None = None,
               metadata: dict | None = None):
    """Fit the recommender on the data and the abductive model on its reversal."""
    if train_forward.direction != FORWARD:
        raise ContractError("train_pair expects forward-direction data")
    f_R = train_model(train_forward, cfg_R, backbone, role=RECOMMENDER)
    f_A = train_model(reverse_dataset(train_forward), cfg_A, backbone, role=ABDUCTIVE)
    if out_dir is not None:
        out = Path(out_dir)
        for name, model, cfg in (("f_R", f_R, cfg_R), ("f_A", f_A, cfg_A)):
            save_checkpoint(model, out / f"{name}.bin",
                            {**(metadata or {}), "train_config": cfg.to_dict(),
                             "fit_log": model.fit_log})
    return f_R, f_A
