"""All-ranking Recall@N / NDCG@N, original-vs-corrected experiments and sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PAD, ContractError, SequenceDataset

logger = logging.getLogger(__name__)

SWEEP_KEYS = {"eta": "eta", "alpha": "alpha", "n_prime": "n_prime", "max_iter": "max_iter"}


def rank_metrics(ranked, target: int, n: int) -> tuple[float, float]:
    ranked = list(ranked)[:n]
    if target in ranked:
        rank = ranked.index(target) + 1
        return 1.0, 1.0 / math.log2(rank + 1)
    return 0.0, 0.0


def target_ranks(scores: np.ndarray, targets: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """1-based rank of each target under (score desc, item id asc); excluded targets get rank inf."""
    S = np.asarray(scores, dtype=np.float64).copy()
    S[:, PAD] = -np.inf
    if exclude is not None:
        S[exclude] = -np.inf
    rows = np.arange(len(S))
    t = S[rows, targets]
    ids = np.arange(S.shape[1])[None, :]
    ahead = (S > t[:, None]) | ((S == t[:, None]) & (ids < targets[:, None]))
    ranks = ahead.sum(axis=1).astype(np.float64) + 1
    ranks[~np.isfinite(t)] = np.inf
    return ranks


def ndcg_batch(scores, targets, exclude=None, n: int = 10) -> np.ndarray:
    r = target_ranks(scores, targets, exclude)
    return np.where(r <= n, 1.0 / np.log2(r + 1), 0.0)


@dataclass
class MetricReport:
    recall: float
    ndcg: float
    per_user: list[dict] = field(default_factory=list)
    n: int = 10
    skipped: int = 0
    ri_recall: float = 0.0
    ri_ndcg: float = 0.0

    @classmethod
    def from_records(cls, records: list[dict], n: int, skipped: int = 0) -> "MetricReport":
        recall = float(np.mean([r["recall"] for r in records])) if records else 0.0
        ndcg = float(np.mean([r["ndcg"] for r in records])) if records else 0.0
        return cls(recall, ndcg, records, n, skipped)

    def summary(self) -> dict:
        return {"recall": self.recall, "ndcg": self.ndcg, "n": self.n, "users": len(self.per_user),
                "skipped": self.skipped, "ri_recall": self.ri_recall, "ri_ndcg": self.ri_ndcg}


def relative_improvement(new: float, old: float) -> float:
    if old == 0:
        return 0.0 if new == 0 else math.inf
    return 100.0 * (new - old) / old


def experiment_batches(n_users: int, batch_size: int):
    for s in range(0, n_users, batch_size):
        yield np.arange(s, min(s + batch_size, n_users))


def run_experiment(f_R, f_A, test: SequenceDataset, cfg, exclude_interacted: bool = True,
                   trace: list | None = None):
    """Original and corrected Recall@N / NDCG@N over every user with a target.

    ``test.items`` are the model inputs and ``test.test`` the targets (see
    ``SequenceDataset.test_inputs`` / ``valid_inputs``). ``f_R`` is anything with
    ``score_all``. Both rankings use the same candidate universe: every item,
    minus the user's history when ``exclude_interacted`` is set.
    """
    from .correct import as_float64, correct_batch, in_batch_support, top_items

    if test.test is None:
        raise ContractError("dataset has no targets")
    fa = as_float64(f_A)
    ok = test.test != PAD
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("skipping %d user(s) without a target", skipped)
    rows_all = np.flatnonzero(ok)
    ori_records, cor_records = [], []
    for chunk in experiment_batches(len(rows_all), cfg.batch_size):
        rows = rows_all[chunk]
        H = test.items[rows]
        targets = test.test[rows]
        scores = np.asarray(f_R.score_all(H), dtype=np.float64)
        V1 = scores.shape[1]
        exclude = np.zeros((len(rows), V1), dtype=bool)
        if exclude_interacted:
            exclude[np.repeat(np.arange(len(rows)), H.shape[1]), H.ravel()] = True
        exclude[:, PAD] = True
        support = in_batch_support(H, fa.n_items) if cfg.negatives == "in-batch" else None
        results = correct_batch(fa, H, scores, cfg, interacted=exclude, support=support,
                                users=test.users[rows])
        items = np.arange(V1)
        for b, res in enumerate(results):
            cand = ~exclude[b]
            ori_top = top_items(items[cand], scores[b, cand], cfg.n).tolist()
            if not set(res.shortlist.items.tolist()) <= set(items[cand].tolist()):
                raise AssertionError("corrected ranking left the candidate universe")
            target = int(targets[b])
            r0, n0 = rank_metrics(ori_top, target, cfg.n)
            r1, n1 = rank_metrics(res.final_top_n, target, cfg.n)
            user = int(test.users[rows[b]])
            ori_records.append({"user": user, "target": target, "recall": r0, "ndcg": n0})
            cor_records.append({"user": user, "target": target, "recall": r1, "ndcg": n1,
                                "rejected": res.rejected})
            if trace is not None:
                trace.append(res.to_json())
    ori = MetricReport.from_records(ori_records, cfg.n, skipped)
    cor = MetricReport.from_records(cor_records, cfg.n, skipped)
    cor.ri_recall = relative_improvement(cor.recall, ori.recall)
    cor.ri_ndcg = relative_improvement(cor.ndcg, ori.ndcg)
    return ori, cor


def expand_grid(grid: dict) -> list[dict]:
    if not grid:
        raise ContractError("sweep grid is empty")
    unknown = set(grid) - set(SWEEP_KEYS)
    if unknown:
        raise ContractError(f"unsupported sweep keys {sorted(unknown)}")
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(grid: dict, f_R, f_A, test: SequenceDataset, cfg, exclude_interacted: bool = True) -> list[dict]:
    """One ``run_experiment`` per grid point; rows hold the parameters and both reports."""
    from .correct import as_float64

    fa = as_float64(f_A)
    table = []
    for point in expand_grid(grid):
        changes = {SWEEP_KEYS[k]: v for k, v in point.items()}
        changes["n"] = min(cfg.n, changes.get("n_prime", cfg.n_prime))
        c = replace(cfg, **changes)
        ori, cor = run_experiment(f_R, fa, test, c, exclude_interacted)
        table.append({**{k: getattr(c, SWEEP_KEYS[k]) for k in point},
                      "ori_recall": ori.recall, "ori_ndcg": ori.ndcg,
                      "recall": cor.recall, "ndcg": cor.ndcg,
                      "ri_recall": cor.ri_recall, "ri_ndcg": cor.ri_ndcg,
                      "rejected": sum(r["rejected"] for r in cor.per_user)})
    return table


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()
