"""Randomised oracle and invariant checks shared by ``apc selftest`` and the test suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .correct import (
    CorrectionConfig,
    abduction_inputs,
    abduction_loss,
    correct_batch,
    dummy_embedding,
    fusion_weights,
    score_gradient,
    CandidateShortlist,
)
from .model import SequentialScorer, embed_sequence, loss_and_input_gradient
from .synth import fd_gradient


def relative_error(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def random_model(rng: np.random.Generator, n_items: int | None = None, max_len: int | None = None,
                 dim: int | None = None, backbone: str | None = None) -> SequentialScorer:
    """Small float64 scorer with every parameter perturbed away from its default init."""
    n_items = n_items or int(rng.integers(12, 40))
    max_len = max_len or int(rng.integers(3, 9))
    dim = dim or int(rng.choice([4, 8, 12, 16]))
    backbone = backbone or str(rng.choice(["attention-mini", "recurrent"]))
    heads = 2 if backbone == "attention-mini" and dim % 2 == 0 and rng.random() < 0.5 else 1
    torch.manual_seed(int(rng.integers(2**31)))
    model = SequentialScorer(n_items, max_len, dim, backbone, heads).double().eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
        model.item_emb.weight[0].zero_()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _random_history(rng, model, length):
    return rng.choice(np.arange(1, model.n_items + 1), size=length, replace=True)


def _random_negatives(rng, model):
    if rng.random() < 0.5:
        return "full"
    k = int(rng.integers(1, model.n_items))
    return rng.choice(np.arange(1, model.n_items + 1), size=k, replace=False)


def input_gradient_trial(rng, eps: float = 1e-5) -> float:
    """loss_and_input_gradient vs central differences on one random row."""
    model = random_model(rng)
    L = int(rng.integers(2, model.max_len + 1))
    seq = embed_sequence(model, _random_history(rng, model, L))
    targets = _random_history(rng, model, L)
    targets[rng.random(L) < 0.2] = 0
    targets[-1] = targets[-1] or 1
    negatives = _random_negatives(rng, model)
    row = int(rng.integers(0, L))
    _, grad = loss_and_input_gradient(model, seq, targets, negatives, row)

    from .model import position_logprobs, EmbeddedSequence

    base = seq.rows.clone()

    def objective(x):
        rows = base.clone()
        rows[row] = torch.as_tensor(x)
        return -position_logprobs(model, EmbeddedSequence(rows, seq.mask), targets, negatives).sum()

    return relative_error(grad, fd_gradient(objective, base[row].numpy(), eps))


def score_gradient_trial(rng, eps: float = 1e-5) -> float:
    """Closed-form score gradient vs central differences of the whole score -> loss map."""
    model = random_model(rng)
    n_prime = int(rng.integers(2, 11))
    eta = float(rng.choice([0.5, 1.0, 2.0, 3.0]))
    L = int(rng.integers(2, model.max_len + 1))
    history = _random_history(rng, model, L)
    reversed_seq = history[::-1]
    negatives = _random_negatives(rng, model)
    short = CandidateShortlist(rng.choice(np.arange(1, model.n_items + 1), size=n_prime, replace=False))
    y = rng.uniform(0.05, 1.0, size=n_prime)
    table = model.embedding.detach().numpy()

    def loss_of(scores):
        w = fusion_weights(scores, eta)
        return abduction_loss(model, reversed_seq, dummy_embedding(w, table, short), "all", negatives)

    w = fusion_weights(y, eta)
    e_hat = dummy_embedding(w, table, short)
    g = _dummy_gradient(model, history, e_hat, negatives)
    analytic = score_gradient(g, w, y, eta, table[short.items], e_hat)
    return relative_error(analytic, fd_gradient(loss_of, y, eps))


def _dummy_gradient(model, history, e_hat, negatives):
    from .correct import _abduction_losses
    from .model import support_mask

    inp = abduction_inputs(np.asarray(history)[None], model.max_len)
    _, g = _abduction_losses(model, inp, torch.as_tensor(e_hat)[None],
                             support_mask(model.n_items, negatives), need_grad=True)
    return g[0]


@dataclass
class GuardReport:
    trials: int = 0
    rejected: int = 0
    failures: list = None

    def __post_init__(self):
        self.failures = self.failures or []

    def fail(self, msg):
        self.failures.append(msg)


def guard_trials(n: int, seed: int = 0) -> GuardReport:
    """Randomised corrections asserting restoration, containment, the no-op cases and the weight simplex."""
    rng = np.random.default_rng(seed)
    report = GuardReport()
    logging.getLogger("apc.correct").disabled = True
    try:
        done = 0
        while done < n:
            model = random_model(rng, n_items=int(rng.integers(15, 40)))
            B = int(rng.integers(1, 9))
            H = np.zeros((B, model.max_len), dtype=np.int64)
            for b in range(B):
                L = int(rng.integers(2, model.max_len + 1))
                H[b, -L:] = _random_history(rng, model, L)
            scores = rng.uniform(0, 1, size=(B, model.n_items + 1))
            if rng.random() < 0.3:
                scores = np.round(scores, 1)  # force ties
            n_prime = int(rng.integers(1, 11))
            case = rng.choice(["free", "alpha0", "single"])
            cfg = CorrectionConfig(
                eta=float(rng.choice([0.5, 1, 2, 3])),
                alpha=0.0 if case == "alpha0" else float(10 ** rng.uniform(-2, 1.5)),
                n_prime=1 if case == "single" else n_prime,
                n=1 if case == "single" else int(rng.integers(1, n_prime + 1)),
                max_iter=int(rng.integers(1, 6)),
                negatives="full",
            )
            results = correct_batch(model, H, scores, cfg)
            for b, res in enumerate(results):
                done += 1
                report.trials += 1
                cand = np.setdiff1d(np.arange(1, model.n_items + 1), H[b])
                initial_top = _top(cand, scores[b, cand], len(res.shortlist.items))
                if res.rejected:
                    report.rejected += 1
                    if res.corrected.scores.tobytes() != res.corrected.initial.tobytes():
                        report.fail(f"rejected correction not restored bitwise: {res.to_json()}")
                if not set(res.final_top_n) <= set(res.shortlist.items.tolist()):
                    report.fail("final top-N escapes the shortlist")
                if res.shortlist.items.tolist() != initial_top.tolist():
                    report.fail("shortlist differs from the initial top-N'")
                if case in ("alpha0", "single"):
                    if not np.array_equal(res.corrected.scores, res.corrected.initial):
                        report.fail(f"{case}: corrected scores differ from initial")
                w = fusion_weights(res.corrected.scores, cfg.eta).weights
                if abs(w.sum() - 1) > 1e-12:
                    report.fail(f"weights sum to {w.sum()!r}")
                y = res.corrected.scores
                if ((y[:, None] > y[None, :]) & (w[:, None] < w[None, :])).any():
                    report.fail("weights not monotone in scores")
    finally:
        logging.getLogger("apc.correct").disabled = False
    return report


def _top(items, scores, k):
    order = np.lexsort((items, -scores))
    return items[order[:k]]


def descent_trials(n: int, seed: int = 0, alpha: float = 1e-3) -> float:
    """Fraction of random corrections whose loss trajectory never increases."""
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(n):
        model = random_model(rng)
        L = int(rng.integers(2, model.max_len + 1))
        H = np.zeros((1, model.max_len), dtype=np.int64)
        H[0, -L:] = _random_history(rng, model, L)
        scores = rng.uniform(0, 1, size=(1, model.n_items + 1))
        cfg = CorrectionConfig(eta=float(rng.choice([0.5, 1, 2, 3])), alpha=alpha,
                               n_prime=int(rng.integers(2, 11)), n=1, max_iter=5, tol=0.0,
                               negatives="full", info_gain_guard=False)
        traj = np.asarray(correct_batch(model, H, scores, cfg)[0].loss_trajectory)
        ok += bool(np.all(np.diff(traj) <= 1e-12 * np.maximum(1, np.abs(traj[:-1]))))
    return ok / n


def run_selftest(trials: int = 100, seed: int = 0, log=print) -> bool:
    rng = np.random.default_rng(seed)
    in_err = max(input_gradient_trial(rng) for _ in range(trials))
    sc_err = max(score_gradient_trial(rng) for _ in range(trials))
    guards = guard_trials(max(trials, 50), seed)
    descent = descent_trials(max(trials // 5, 20), seed)
    checks = [
        ("input-embedding gradient vs finite differences", in_err <= 1e-5, f"max rel err {in_err:.2e}"),
        ("score gradient vs finite differences", sc_err <= 1e-5, f"max rel err {sc_err:.2e}"),
        ("guard/containment/no-op/simplex invariants", not guards.failures,
         f"{guards.trials} corrections, {len(guards.failures)} failure(s)"),
        ("small-step descent", descent >= 0.95, f"{descent:.0%} monotone"),
    ]
    for name, ok, detail in checks:
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all(ok for _, ok, _ in checks)
