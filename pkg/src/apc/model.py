"""Embedding-based sequential scorers.

The same class serves as the forward recommender and as the reversed
(abductive) model. Two backbones are available: ``attention-mini`` (one causal
self-attention block with learned position encodings) and ``recurrent`` (one
GRU layer). Inputs are right-aligned inside the ``max_len`` window, so a
length-L sequence always occupies the last L position slots.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import PAD, ConfigError, ContractError

BACKBONES = ("attention-mini", "recurrent")
FULL = "full"

CHECKPOINT_SCHEMA = "apc.model/1"
_CKPT_MAGIC = b"APCM"
_CKPT_HEADER = struct.Struct("<4sI16sIIIQ")  # magic, version, backbone, d, T, |V|, n_values


class SequentialScorer(nn.Module):
    def __init__(self, n_items: int, max_len: int, dim: int = 32,
                 backbone: str = "attention-mini", heads: int = 1,
                 dropout: float = 0.0, init: str = "normal"):
        super().__init__()
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}")
        if dim % heads:
            raise ConfigError("dim must be divisible by heads")
        self.n_items = n_items
        self.max_len = max_len
        self.dim = dim
        self.backbone = backbone
        self.heads = heads
        self.dropout_rate = dropout

        self.item_emb = nn.Embedding(n_items + 1, dim, padding_idx=PAD)
        self.pos_emb = nn.Parameter(torch.empty(max_len, dim))
        self.drop = nn.Dropout(dropout)
        if backbone == "attention-mini":
            self.attn_norm = nn.LayerNorm(dim, eps=1e-8)
            self.q_proj = nn.Linear(dim, dim)
            self.k_proj = nn.Linear(dim, dim)
            self.v_proj = nn.Linear(dim, dim)
            self.out_proj = nn.Linear(dim, dim)
            self.ffn_norm = nn.LayerNorm(dim, eps=1e-8)
            self.ffn = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Dropout(dropout),
                                     nn.Linear(dim, dim), nn.Dropout(dropout))
        else:
            self.cell = nn.GRUCell(dim, dim)
        self.last_norm = nn.LayerNorm(dim, eps=1e-8)
        self.reset_parameters(init)

    def reset_parameters(self, init: str = "normal"):
        if init == "zeros":
            with torch.no_grad():
                for p in self.parameters():
                    p.zero_()
            return
        if init != "normal":
            raise ConfigError(f"unknown init {init!r}")
        with torch.no_grad():
            nn.init.normal_(self.item_emb.weight, std=self.dim ** -0.5)
            nn.init.normal_(self.pos_emb, std=self.dim ** -0.5)
            self.item_emb.weight[PAD].zero_()
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    nn.init.xavier_uniform_(m.weight)
                    nn.init.zeros_(m.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_emb.dtype

    @property
    def embedding(self) -> torch.Tensor:
        return self.item_emb.weight

    def config(self) -> dict:
        return {"n_items": self.n_items, "max_len": self.max_len, "dim": self.dim,
                "backbone": self.backbone, "heads": self.heads, "dropout": self.dropout_rate}

    def encode(self, rows: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Hidden states (B, L, d); row t only sees input rows <= t."""
        L = rows.shape[1]
        if L > self.max_len:
            raise ContractError(f"input length {L} exceeds max_len {self.max_len}")
        m = mask.unsqueeze(-1)
        x = torch.where(m, rows + self.pos_emb[self.max_len - L:], torch.zeros_like(rows))
        x = self.drop(x)
        if self.backbone == "attention-mini":
            x = self._attend(x, mask)
        else:
            x = self._recur(x, mask)
        return torch.where(m, self.last_norm(x), torch.zeros_like(x))

    def _attend(self, x, mask):
        B, L, d = x.shape
        hd = d // self.heads
        q_in = self.attn_norm(x)
        q = self.q_proj(q_in).view(B, L, self.heads, hd).transpose(1, 2)
        k = self.k_proj(x).view(B, L, self.heads, hd).transpose(1, 2)
        v = self.v_proj(x).view(B, L, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        eye = torch.eye(L, dtype=torch.bool, device=x.device)
        allowed = (torch.tril(torch.ones(L, L, dtype=torch.bool, device=x.device))
                   & mask[:, None, None, :]) | eye
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, L, d)
        x = q_in + self.out_proj(out)
        x = x + self.ffn(self.ffn_norm(x))
        return torch.where(mask.unsqueeze(-1), x, torch.zeros_like(x))

    def _recur(self, x, mask):
        B, L, d = x.shape
        h = x.new_zeros(B, d)
        outs = []
        for t in range(L):
            m = mask[:, t, None]
            h = torch.where(m, self.cell(x[:, t], h), h)
            outs.append(h)
        return torch.stack(outs, dim=1)

    def item_rows(self, items) -> tuple[torch.Tensor, torch.Tensor]:
        items = torch.as_tensor(np.asarray(items), dtype=torch.long)
        if items.numel() and (items.min() < 0 or items.max() > self.n_items):
            raise IndexError(f"item id out of range [0, {self.n_items}]")
        return self.item_emb(items), items != PAD

    def last_hidden(self, items) -> torch.Tensor:
        rows, mask = self.item_rows(items)
        return self.encode(rows, mask)[:, -1]

    def score_all(self, items) -> np.ndarray:
        """Sigmoid scores of every item (column 0 = pad, always 0) for a batch of histories."""
        with inference(self), torch.no_grad():
            h = self.last_hidden(items)
            scores = torch.sigmoid(h @ self.embedding.T)
            scores[:, PAD] = 0.0
        return scores.double().numpy()


@contextlib.contextmanager
def inference(model: nn.Module):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


@dataclass
class EmbeddedSequence:
    rows: torch.Tensor  # (L, d)
    mask: torch.Tensor  # (L,) bool, True = real row

    def __len__(self):
        return self.rows.shape[0]


def embed_sequence(model: SequentialScorer, items) -> EmbeddedSequence:
    rows, mask = model.item_rows(np.asarray(items, dtype=np.int64).reshape(-1))
    return EmbeddedSequence(rows.detach().clone(), mask)


def score_candidates(model: SequentialScorer, seq: EmbeddedSequence, candidates) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if candidates.size == 0:
        raise ContractError("candidate set is empty")
    if (candidates == PAD).any():
        raise ContractError("candidates must not contain the pad token")
    with inference(model), torch.no_grad():
        h = model.encode(seq.rows[None], seq.mask[None])[0, -1]
        logits = model.embedding[torch.as_tensor(candidates)] @ h
    return torch.sigmoid(logits).double().numpy()


def support_mask(n_items: int, negatives, batch: int = 1) -> torch.Tensor | None:
    """Boolean (batch, n_items+1) membership mask for a negative set; ``None`` means full vocabulary."""
    if negatives is None or (isinstance(negatives, str) and negatives == FULL):
        return None
    mask = torch.zeros(batch, n_items + 1, dtype=torch.bool)
    neg = torch.as_tensor(np.asarray(negatives, dtype=np.int64).reshape(-1))
    mask[:, neg] = True
    mask[:, PAD] = False
    return mask


def sequence_logprobs(model: SequentialScorer, rows: torch.Tensor, mask: torch.Tensor,
                      targets: torch.Tensor, support: torch.Tensor | None) -> torch.Tensor:
    """Per-position log p(target | rows <= t) as a (B, L) tensor; 0 where target is pad.

    The softmax runs over ``{target} U support`` per position, or over all
    items when ``support`` is None.
    """
    h = model.encode(rows, mask)
    logits = h @ model.embedding.T
    real = targets != PAD
    safe = torch.where(real, targets, torch.ones_like(targets))
    if support is None:
        allowed = torch.ones_like(logits, dtype=torch.bool)
    else:
        allowed = support[:, None, :].expand_as(logits).clone()
        allowed.scatter_(-1, safe.unsqueeze(-1), True)
    allowed[..., PAD] = False
    logits = logits.masked_fill(~allowed, float("-inf"))
    lp = logits.gather(-1, safe.unsqueeze(-1)).squeeze(-1) - torch.logsumexp(logits, dim=-1)
    return torch.where(real, lp, torch.zeros_like(lp))


def _as_targets(targets, L: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(targets, dtype=np.int64).reshape(-1))
    if t.shape[0] != L:
        raise ContractError(f"expected {L} targets, got {t.shape[0]}")
    return t


def position_logprobs(model: SequentialScorer, seq: EmbeddedSequence, targets,
                      negatives=FULL) -> np.ndarray:
    """Log-probabilities of the non-pad ``targets``; ``targets[t]`` is predicted from rows <= t."""
    if not bool(seq.mask.any()):
        return np.zeros(0)
    t = _as_targets(targets, len(seq))
    if t.max() > model.n_items or t.min() < 0:
        raise IndexError("target id out of range")
    with inference(model), torch.no_grad():
        lp = sequence_logprobs(model, seq.rows[None], seq.mask[None], t[None],
                               support_mask(model.n_items, negatives))
    return lp[0][t != PAD].double().numpy()


def loss_and_input_gradient(model: SequentialScorer, seq: EmbeddedSequence, targets,
                            negatives=FULL, grad_row: int = 0) -> tuple[float, np.ndarray]:
    """Loss = sum of -log p over non-pad targets, and its exact gradient w.r.t. one input row."""
    if not 0 <= grad_row < len(seq) or not bool(seq.mask[grad_row]):
        raise ContractError(f"grad_row {grad_row} is out of range or masked")
    t = _as_targets(targets, len(seq))
    rows = seq.rows.detach().clone().requires_grad_(True)
    with inference(model):
        lp = sequence_logprobs(model, rows[None], seq.mask[None], t[None],
                               support_mask(model.n_items, negatives))
        loss = -lp.sum()
        (grad,) = torch.autograd.grad(loss, rows)
    return float(loss.detach()), grad[grad_row].double().numpy()


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: SequentialScorer, path: str | os.PathLike, metadata: dict | None = None) -> Path:
    """Binary parameter file plus a JSON sidecar (``<path>.json``).

    Layout: little-endian header (magic ``APCM``, version, 16-byte backbone tag,
    d, T, |V|, value count) followed by every parameter as float64 in
    ``state_dict`` order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    blob = np.concatenate([v.detach().double().reshape(-1).numpy() for v in state.values()])
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, 1, model.backbone.encode("ascii"),
                                   model.dim, model.max_len, model.n_items, blob.size))
        fh.write(blob.astype("<f8").tobytes())
    sidecar = {
        "schema": CHECKPOINT_SCHEMA,
        "config": model.config(),
        "params": [[k, list(v.shape)] for k, v in state.items()],
        "metadata": metadata or {},
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path: str | os.PathLike, dtype: torch.dtype = torch.float64) -> SequentialScorer:
    path = Path(path)
    with open(sidecar_path(path), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if sidecar.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigError(f"unsupported checkpoint schema {sidecar.get('schema')!r}")
    with open(path, "rb") as fh:
        magic, version, tag, dim, max_len, n_items, count = _CKPT_HEADER.unpack(
            fh.read(_CKPT_HEADER.size))
        if magic != _CKPT_MAGIC or version != 1:
            raise ConfigError(f"{path}: not a version-1 APC checkpoint")
        blob = np.frombuffer(fh.read(), dtype="<f8")
    cfg = sidecar["config"]
    if (tag.rstrip(b"\0").decode(), dim, max_len, n_items) != (
            cfg["backbone"], cfg["dim"], cfg["max_len"], cfg["n_items"]):
        raise ConfigError(f"{path}: header disagrees with sidecar metadata")
    if blob.size != count:
        raise ConfigError(f"{path}: truncated parameter blob")
    model = SequentialScorer(init="zeros", **cfg).double()
    state, offset = {}, 0
    for name, shape in sidecar["params"]:
        n = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(blob[offset:offset + n].copy()).reshape(shape)
        offset += n
    model.load_state_dict(state)
    model.metadata = sidecar.get("metadata", {})
    return model.to(dtype).eval()
