"""Abductive prediction correction.

Given initial recommender scores for one or more users, the engine

1. keeps the top-N' candidates (the shortlist),
2. fuses their abductive-model embeddings into a dummy item, weighting each
   by ``y ** eta`` normalised over the shortlist,
3. places the dummy item in front of the reversed history and measures how
   badly the abductive model reconstructs that history (the abduction loss),
4. moves the shortlist scores down the gradient of that loss, clamped to
   ``[eps, 1]``, until the loss stops changing or the iteration budget runs out,
5. rejects the whole correction when the final loss is worse than the loss of
   the history alone, and
6. re-ranks the shortlist by the surviving scores.

Everything on this path runs in float64. Users are processed in batches; the
loss of each user depends only on that user's dummy item, so one backward pass
yields every user's gradient.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import PAD, ConfigError, ContractError, reverse_rows
from .model import FULL, SequentialScorer, sequence_logprobs, support_mask

logger = logging.getLogger(__name__)

WINDOWS = ("all", "nearest")
NEGATIVE_MODES = ("in-batch", FULL)


class ScoreVector:
    """Scores for a list of items; ``initial`` is frozen at construction.

    Scores are clamped into ``[eps, 1]`` on entry, and ``initial`` records the
    clamped values so a restored correction is bitwise equal to it.
    """

    def __init__(self, items, scores, initial=None, eps: float = 1e-6):
        self.items = np.asarray(items, dtype=np.int64).copy()
        self.eps = eps
        self.scores = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0)
        init = self.scores if initial is None else np.clip(np.asarray(initial, dtype=np.float64), eps, 1.0)
        self._initial = init.copy()
        self._initial.flags.writeable = False
        if self.items.shape != self.scores.shape or self.items.shape != self._initial.shape:
            raise ContractError("items, scores and initial scores must align")

    @property
    def initial(self) -> np.ndarray:
        return self._initial

    def __len__(self):
        return len(self.items)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.items.tolist(), self.scores.tolist()))

    def to_json(self) -> dict:
        return {"items": self.items.tolist(), "scores": self.scores.tolist(),
                "initial": self._initial.tolist()}


@dataclass
class CandidateShortlist:
    items: np.ndarray

    @property
    def n_prime(self) -> int:
        return len(self.items)


@dataclass
class FusionWeights:
    weights: np.ndarray
    eta: float


@dataclass
class CorrectionConfig:
    eta: float = 1.0
    alpha: float = 0.01
    n_prime: int = 50
    n: int = 10
    max_iter: int = 10
    tol: float = 1e-6
    window: str = "all"
    negatives: str = "in-batch"
    shortlist_guard: bool = True
    info_gain_guard: bool = True
    eps: float = 1e-6
    batch_size: int = 128

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.tol < 0:
            raise ConfigError("tol must be nonnegative")
        if self.n < 1 or self.n > self.n_prime:
            raise ConfigError("need 1 <= n <= n_prime")
        if self.window not in WINDOWS:
            raise ConfigError(f"window must be one of {WINDOWS}")
        if self.negatives not in NEGATIVE_MODES:
            raise ConfigError(f"negatives must be one of {NEGATIVE_MODES}")
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorrectionResult:
    shortlist: CandidateShortlist
    corrected: ScoreVector
    loss_trajectory: list[float]
    baseline_loss: float
    final_loss: float
    rejected: bool
    final_top_n: list[int]
    diagnostic: str | None = None
    user: int | None = None

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "shortlist": self.shortlist.items.tolist(),
            "initial_scores": self.corrected.initial.tolist(),
            "corrected_scores": self.corrected.scores.tolist(),
            "loss_trajectory": list(self.loss_trajectory),
            "final_loss": self.final_loss,
            "baseline_loss": self.baseline_loss,
            "rejected": self.rejected,
            "diagnostic": self.diagnostic,
            "final_top_n": list(self.final_top_n),
        }


# -- single-user building blocks ---------------------------------------------


def top_items(items: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k by descending score, ascending item id on ties."""
    order = np.lexsort((items, -scores))
    return items[order[:k]]


def shortlist(all_scores, interacted, n_prime: int) -> CandidateShortlist:
    """Top-N' non-interacted candidates. ``all_scores`` is a ScoreVector, mapping or (items, scores)."""
    if isinstance(all_scores, ScoreVector):
        items, scores = all_scores.items, all_scores.scores
    elif isinstance(all_scores, dict):
        items = np.fromiter(all_scores.keys(), dtype=np.int64, count=len(all_scores))
        scores = np.fromiter(all_scores.values(), dtype=np.float64, count=len(all_scores))
    else:
        items, scores = (np.asarray(a) for a in all_scores)
    keep = ~np.isin(items, np.asarray(list(interacted), dtype=np.int64)) & (items != PAD)
    items, scores = items[keep], scores[keep]
    if len(items) < n_prime:
        logger.warning("only %d candidates available; shrinking shortlist from %d",
                       len(items), n_prime)
    return CandidateShortlist(top_items(items, scores, n_prime))


def fusion_weights(scores, eta: float) -> FusionWeights:
    if not eta > 0:
        raise ConfigError("eta must be positive")
    y = np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)
    if (y <= 0).any():
        raise ContractError("fusion weights need strictly positive scores")
    logw = eta * np.log(y)
    w = np.exp(logw - logw.max(axis=-1, keepdims=True))
    return FusionWeights(w / w.sum(axis=-1, keepdims=True), eta)


def dummy_embedding(weights: FusionWeights, table, shortlist: CandidateShortlist) -> np.ndarray:
    rows = _as_numpy(table)[np.asarray(shortlist.items, dtype=np.int64)]
    return weights.weights @ rows


def score_gradient(g, weights: FusionWeights, scores, eta: float, table_rows, e_hat) -> np.ndarray:
    """d loss / d y_v = (eta / y_v) * w_v * <g, e_v - e_hat>, with g = d loss / d e_hat.

    ``table_rows`` are the abductive-model embeddings of the shortlist in
    shortlist order. Works per user or broadcast over a leading batch axis.
    """
    y = np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)
    if (y <= 0).any():
        raise ContractError("scores must be clamped to [eps, 1] before differentiation")
    w = weights.weights if isinstance(weights, FusionWeights) else np.asarray(weights)
    rows = _as_numpy(table_rows)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    align = np.einsum("...nd,...d->...n", rows - e_hat[..., None, :], np.asarray(g, dtype=np.float64))
    return eta / y * w * align


def _as_numpy(table) -> np.ndarray:
    if isinstance(table, torch.Tensor):
        return table.detach().double().numpy()
    return np.asarray(table, dtype=np.float64)


# -- abduction loss ------------------------------------------------------------


def as_float64(model: SequentialScorer) -> SequentialScorer:
    """Frozen float64 evaluation copy (the model itself if it already is one)."""
    if model.dtype == torch.float64 and not model.training and not any(
            p.requires_grad for p in model.parameters()):
        return model
    clone = copy.deepcopy(model).double().eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


@dataclass
class AbductionInputs:
    """Reversed histories laid out for the abduction loss.

    Row b of ``items`` is ``[pad.., <dummy>, v_n, ..., v_2]`` with the dummy
    slot holding pad; ``targets`` aligns ``v_{t}`` with the row that predicts
    it. Dropping the dummy slot gives exactly the layout of the baseline loss,
    so both losses score the same targets in the same position slots.
    """

    items: torch.Tensor
    targets: torch.Tensor
    dummy_slot: torch.Tensor
    has_window: np.ndarray


def abduction_inputs(histories, max_len: int, window: str = "all") -> AbductionInputs:
    if window not in WINDOWS:
        raise ConfigError(f"window must be one of {WINDOWS}")
    H = np.atleast_2d(np.asarray(histories, dtype=np.int64))[:, -max_len:]
    R = reverse_rows(H)
    B, W = R.shape
    m = (R != PAD).sum(axis=1)
    items = np.concatenate([np.zeros((B, 1), dtype=np.int64), R[:, :-1]], axis=1)
    slot = np.clip(W - m, 0, W - 1)
    targets = R.copy()
    targets[np.arange(B), slot] = PAD
    if window == "nearest":
        keep = np.zeros_like(targets, dtype=bool)
        nxt = slot + 1
        ok = nxt < W
        keep[np.arange(B)[ok], nxt[ok]] = True
        targets = np.where(keep, targets, PAD)
    has_window = (m >= 2) & (targets != PAD).any(axis=1)
    return AbductionInputs(torch.as_tensor(items), torch.as_tensor(targets),
                           torch.as_tensor(slot), has_window)


def _abduction_losses(f_A: SequentialScorer, inp: AbductionInputs, e_hat: torch.Tensor | None,
                      support: torch.Tensor | None, need_grad: bool = False):
    with torch.set_grad_enabled(need_grad):
        rows = f_A.embedding[inp.items].detach()
        mask = inp.items != PAD
        if e_hat is not None:
            onehot = torch.zeros(mask.shape, dtype=torch.bool)
            onehot[torch.arange(rows.shape[0]), inp.dummy_slot] = True
            if need_grad:
                e_hat = e_hat.detach().clone().requires_grad_(True)
            rows = torch.where(onehot.unsqueeze(-1), e_hat[:, None, :].expand_as(rows), rows)
            mask = mask | onehot
        lp = sequence_logprobs(f_A, rows, mask, inp.targets, support)
        losses = -lp.sum(dim=1)
        if not need_grad:
            return losses.detach().numpy(), None
        (grad,) = torch.autograd.grad(losses.sum(), e_hat)
    return losses.detach().numpy(), grad.numpy()


def abduction_loss(f_A: SequentialScorer, reversed_seq, e_hat=None, window: str = "all",
                   negatives=FULL) -> float:
    """Sum of -log p_A over the window for one reversed history ``[v_n, ..., v_1]``.

    With ``e_hat`` the dummy embedding is placed in front of the sequence;
    without it this is the baseline loss. ``negatives`` is an item list or
    ``"full"`` for the full-vocabulary softmax.
    """
    seq = np.asarray(reversed_seq, dtype=np.int64)
    seq = seq[seq != PAD]
    if seq.size == 0:
        raise ContractError("reversed sequence is empty")
    inp = abduction_inputs(seq[::-1][None], f_A.max_len, window)
    if not inp.has_window[0]:
        raise ContractError("the loss window selects no positions")
    fa = as_float64(f_A)
    e = None if e_hat is None else torch.as_tensor(np.asarray(e_hat, dtype=np.float64))[None]
    with torch.no_grad():
        losses, _ = _abduction_losses(fa, inp, e, support_mask(fa.n_items, negatives))
    return float(losses[0])


# -- the correction loop -------------------------------------------------------


def in_batch_support(histories: np.ndarray, n_items: int) -> torch.Tensor:
    """Items seen in the other users' histories of the same batch, per user."""
    H = np.atleast_2d(np.asarray(histories))
    present = np.zeros((H.shape[0], n_items + 1), dtype=np.int64)
    rows = np.repeat(np.arange(H.shape[0]), H.shape[1])
    present[rows, H.ravel()] = 1
    present[:, PAD] = 0
    others = present.sum(axis=0, keepdims=True) - present
    return torch.as_tensor(others > 0)


def correct_batch(f_A: SequentialScorer, histories, scores_all, cfg: CorrectionConfig,
                  interacted=None, support: torch.Tensor | None = None,
                  users=None) -> list[CorrectionResult]:
    """Correct a batch of users at once.

    ``histories``: (B, W) left-padded forward histories (item ids).
    ``scores_all``: (B, |V|+1) initial recommender scores, column 0 ignored.
    ``interacted``: (B, |V|+1) bool mask of excluded candidates; defaults to
    the items in each history. ``support``: negative-set mask per user for
    the abduction softmax, ``None`` for the full vocabulary.
    """
    fa = as_float64(f_A)
    H = np.atleast_2d(np.asarray(histories, dtype=np.int64))
    S = np.atleast_2d(np.asarray(scores_all, dtype=np.float64)).copy()
    B, V1 = S.shape
    if V1 != fa.n_items + 1 or H.shape[0] != B:
        raise ContractError("scores must cover every item of the abductive model's catalog")
    if interacted is None:
        interacted = np.zeros((B, V1), dtype=bool)
        interacted[np.repeat(np.arange(B), H.shape[1]), H.ravel()] = True
    interacted = np.asarray(interacted, dtype=bool)
    eps = cfg.eps

    # shortlist; excluded entries sort last, ties go to the smaller item id
    S[:, PAD] = -np.inf
    S[interacted] = -np.inf
    n_cand = np.isfinite(S).sum(axis=1)
    width = int(min(cfg.n_prime, n_cand.max())) if cfg.shortlist_guard else int(n_cand.max())
    if cfg.shortlist_guard and (n_cand < cfg.n_prime).any():
        logger.warning("%d user(s) have fewer than %d candidates; shortlist shrunk",
                       int((n_cand < cfg.n_prime).sum()), cfg.n_prime)
    order = np.argsort(-S, axis=1, kind="stable")[:, :width]
    valid = np.arange(width)[None, :] < np.minimum(n_cand, width)[:, None]
    raw = np.take_along_axis(S, order, axis=1)
    y0 = np.where(valid, np.clip(np.where(valid, raw, 1.0), eps, 1.0), 1.0)
    emb = fa.embedding.detach().numpy()[order]  # (B, N', d)

    inp = abduction_inputs(H, fa.max_len, cfg.window)
    baseline, _ = _abduction_losses(fa, inp, None, support)

    def fuse(y):
        logw = np.where(valid, cfg.eta * np.log(y), -np.inf)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return w, np.einsum("bn,bnd->bd", w, emb)

    y = y0.copy()
    trajectories: list[list[float]] = [[] for _ in range(B)]
    active = inp.has_window.copy()
    failed = np.zeros(B, dtype=bool)
    stale = np.zeros(B, dtype=bool)
    prev = np.full(B, np.nan)
    for it in range(cfg.max_iter):
        w, e_hat = fuse(y)
        loss, g = _abduction_losses(fa, inp, torch.as_tensor(e_hat), support, need_grad=True)
        bad = active & ~(np.isfinite(loss) & np.isfinite(g).all(axis=1))
        failed |= bad
        active &= ~bad
        for b in np.flatnonzero(active):
            trajectories[b].append(float(loss[b]))
        stale[active] = False
        if it > 0:
            active &= ~(np.abs(loss - prev) <= cfg.tol)
        if not active.any():
            break
        grad = np.where(valid, score_gradient(g, w, y, cfg.eta, emb, e_hat), 0.0)
        if not np.isfinite(grad[active]).all():
            nan_rows = active & ~np.isfinite(grad).all(axis=1)
            failed |= nan_rows
            active &= ~nan_rows
        step = np.clip(y - cfg.alpha * grad, eps, 1.0)
        y = np.where(active[:, None] & valid, step, y)
        stale |= active
        prev = loss

    _, e_hat = fuse(y)
    final, _ = _abduction_losses(fa, inp, torch.as_tensor(e_hat), support)
    for b in np.flatnonzero(stale & ~failed):
        trajectories[b].append(float(final[b]))
    failed |= inp.has_window & ~np.isfinite(final)

    results = []
    for b in range(B):
        n_b = int(valid[b].sum())
        items = order[b, :n_b]
        diagnostic = None
        if failed[b]:
            rejected, diagnostic = True, "non-finite loss or gradient"
        elif not inp.has_window[b]:
            rejected, diagnostic = True, "empty loss window"
        else:
            rejected = bool(cfg.info_gain_guard and final[b] > baseline[b])
        sv = ScoreVector(items, y0[b, :n_b], eps=eps)
        if not rejected:
            sv.scores = y[b, :n_b].copy()
        results.append(CorrectionResult(
            shortlist=CandidateShortlist(items),
            corrected=sv,
            loss_trajectory=trajectories[b],
            baseline_loss=float(baseline[b]),
            final_loss=float(final[b]),
            rejected=rejected,
            final_top_n=top_items(items, sv.scores, cfg.n).tolist(),
            diagnostic=diagnostic,
            user=None if users is None else int(users[b]),
        ))
    return results


def correct_user(f_R, f_A: SequentialScorer, sequence, cfg: CorrectionConfig,
                 negatives=None, interacted=None) -> CorrectionResult:
    """Correct one user's recommendations.

    ``f_R`` is anything with ``score_all(histories)``: a trained
    :class:`SequentialScorer` or a stand-in such as a noisy oracle.
    ``sequence`` is an :class:`InteractionSequence` (or item array) holding the
    input history. In ``in-batch`` mode the caller supplies ``negatives``;
    ``interacted`` defaults to the history's items.
    """
    items = np.asarray(getattr(sequence, "items", sequence), dtype=np.int64)[None]
    scores = np.asarray(f_R.score_all(items), dtype=np.float64)
    if cfg.negatives == FULL:
        support = None
    elif negatives is None:
        raise ConfigError("in-batch mode needs an explicit negative set for a single user")
    else:
        support = support_mask(f_A.n_items, negatives)
    mask = None
    if interacted is not None:
        mask = np.zeros_like(scores, dtype=bool)
        mask[0, np.asarray(list(interacted), dtype=np.int64)] = True
    user = getattr(sequence, "user", None)
    return correct_batch(f_A, items, scores, cfg, interacted=mask, support=support,
                         users=None if user is None else [user])[0]


def rerank(result: CorrectionResult, n: int) -> list[int]:
    if n > result.shortlist.n_prime:
        raise ContractError("n exceeds the shortlist length")
    return top_items(result.corrected.items, result.corrected.scores, n).tolist()
