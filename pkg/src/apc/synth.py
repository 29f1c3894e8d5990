"""Synthetic Markov-chain worlds and brute-force oracles.

World items are numbered 0..K-1 internally and map to dataset item ids 1..K.

A plain world is one row-stochastic transition matrix. A clustered world is
a mixture of such chains: each simulated user draws a latent cluster once and
then walks that cluster's chain. Within a single first-order chain the item
after ``v_T`` carries no information about ``v_{T-1}`` given ``v_T``, so the
mixture is what gives a reversed model a reason to look at the dummy item.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .data import ConfigError, ContractError, SequenceDataset

EPS = 1e-6


def stationary_distribution(P: np.ndarray, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration on the lazy chain (P + I) / 2, which shares P's stationary law."""
    K = P.shape[0]
    pi = np.full(K, 1.0 / K)
    lazy = 0.5 * (P + np.eye(K))
    for _ in range(max_iter):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt @ P - nxt).max() <= tol:
            return nxt
        pi = nxt
    raise RuntimeError("power iteration did not converge")


def is_irreducible(P: np.ndarray) -> bool:
    n, _ = connected_components(P > 0, directed=True, connection="strong")
    return n == 1


@dataclass
class MarkovWorld:
    P: np.ndarray
    seed: int = 0
    pi: np.ndarray = field(default=None)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 2 or self.P.shape[0] != self.P.shape[1] or self.K < 2:
            raise ConfigError("P must be a K x K matrix with K >= 2")
        if (self.P < 0).any() or np.abs(self.P.sum(axis=1) - 1).max() > 1e-12:
            raise ConfigError("P must be row-stochastic")
        if self.pi is None:
            self.pi = stationary_distribution(self.P)

    @property
    def K(self) -> int:
        return self.P.shape[0]

    def to_json(self) -> dict:
        return {"K": self.K, "P": self.P.tolist(), "seed": self.seed}


@dataclass
class ClusteredWorld:
    """Mixture of Markov chains over a shared item set."""

    components: list[MarkovWorld]
    weights: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len({c.K for c in self.components}) != 1:
            raise ConfigError("all components must share K")
        if abs(self.weights.sum() - 1) > 1e-12 or len(self.weights) != len(self.components):
            raise ConfigError("cluster weights must be a distribution over components")

    @property
    def K(self) -> int:
        return self.components[0].K

    def to_json(self) -> dict:
        return {"K": self.K, "seed": self.seed, "weights": self.weights.tolist(),
                "components": [c.P.tolist() for c in self.components]}


def world_from_json(obj: dict) -> MarkovWorld | ClusteredWorld:
    seed = int(obj.get("seed", 0))
    if "components" in obj:
        comps = [MarkovWorld(np.asarray(P), seed=seed) for P in obj["components"]]
        return ClusteredWorld(comps, np.asarray(obj["weights"]), seed=seed)
    world = MarkovWorld(np.asarray(obj["P"]), seed=seed)
    if "K" in obj and obj["K"] != world.K:
        raise ConfigError("K disagrees with the shape of P")
    return world


def load_world(path: str | os.PathLike):
    with open(path, encoding="utf-8") as fh:
        return world_from_json(json.load(fh))


def save_world(world, path: str | os.PathLike):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world.to_json(), fh)


def random_world(K: int, seed: int = 0, concentration: float = 0.1, floor: float = 1e-3) -> MarkovWorld:
    """Sparse-ish random chain: Dirichlet rows mixed with a small uniform floor (keeps it irreducible)."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(K, concentration), size=K)
    P = (1 - floor) * P + floor / K
    P /= P.sum(axis=1, keepdims=True)
    return MarkovWorld(P, seed=seed)


def clustered_world(K: int, clusters: int = 4, seed: int = 0, affinity: float = 0.9,
                    concentration: float = 0.1, floor: float = 1e-3) -> ClusteredWorld:
    """Each cluster owns a block of items and sends ``affinity`` of its transition mass there."""
    rng = np.random.default_rng(seed)
    owner = np.arange(K) % clusters
    base = rng.dirichlet(np.full(K, concentration), size=K)
    comps = []
    for c in range(clusters):
        inside = owner == c
        P = base * np.where(inside, 1.0, 0.0)[None, :]
        P = P / P.sum(axis=1, keepdims=True)
        noise = rng.dirichlet(np.full(K, concentration), size=K)
        P = affinity * P + (1 - affinity) * noise
        P = (1 - floor) * P + floor / K
        P /= P.sum(axis=1, keepdims=True)
        comps.append(MarkovWorld(P, seed=seed))
    return ClusteredWorld(comps, np.full(clusters, 1.0 / clusters), seed=seed)


def _components(world):
    if isinstance(world, ClusteredWorld):
        return world.components, world.weights
    return [world], np.ones(1)


def sample_sequences(world, users: int, length: int, seed: int | None = None) -> np.ndarray:
    """(users, length) array of 0-based world states; user ``u`` uses seed (global seed, u)."""
    comps, weights = _components(world)
    for c in comps:
        if not is_irreducible(c.P):
            raise ConfigError("transition matrix is reducible")
    seed = world.seed if seed is None else seed
    cum_P = [np.cumsum(c.P, axis=1) for c in comps]
    cum_pi = [np.cumsum(c.pi) for c in comps]
    cum_w = np.cumsum(weights)
    out = np.empty((users, length), dtype=np.int64)
    for u in range(users):
        rng = np.random.default_rng([seed, u])
        draws = rng.random(length + 1)
        c = min(int(np.searchsorted(cum_w, draws[0], side="right")), len(comps) - 1)
        cp = cum_P[c]
        s = min(int(np.searchsorted(cum_pi[c], draws[1], side="right")), world.K - 1)
        out[u, 0] = s
        for t in range(1, length):
            s = min(int(np.searchsorted(cp[s], draws[t + 1], side="right")), world.K - 1)
            out[u, t] = s
    return out


def gen_markov_dataset(world, users: int, T: int, seed: int | None = None) -> SequenceDataset:
    """Sample ``T`` events per user and split them leave-one-out (dataset item id = state + 1)."""
    if T < 3:
        raise ConfigError("T must be >= 3 to leave validation and test targets")
    seqs = sample_sequences(world, users, T, seed) + 1
    items = np.zeros((users, T), dtype=np.int64)
    items[:, 2:] = seqs[:, :-2]
    return SequenceDataset(items=items, n_items=world.K, valid=seqs[:, -2], test=seqs[:, -1])


def reversed_transition(world: MarkovWorld) -> np.ndarray:
    """Time reversal: P_rev[j, i] = pi[i] P[i, j] / pi[j]."""
    pi = world.pi
    if (pi <= 0).any():
        raise ContractError("stationary distribution has zero mass; reversal undefined")
    R = (pi[:, None] * world.P).T / pi[:, None]
    # exact rows sum to 1; renormalising removes the power-iteration residual in pi
    return R / R.sum(axis=1, keepdims=True)


def bigram_frequencies(seqs: np.ndarray, K: int) -> np.ndarray:
    """Row-normalised empirical transition counts from 0-based sequences; negative entries are padding."""
    a, b = seqs[:, :-1].ravel(), seqs[:, 1:].ravel()
    keep = (a >= 0) & (b >= 0)
    counts = np.zeros((K, K))
    np.add.at(counts, (a[keep], b[keep]), 1)
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)


def next_item_distribution(world, history: np.ndarray) -> np.ndarray:
    """Exact law of the next state given a 0-based history (cluster posterior for mixtures)."""
    comps, weights = _components(world)
    history = np.asarray(history)
    logpost = np.log(weights).copy()
    for c, comp in enumerate(comps):
        logpost[c] += np.log(comp.pi[history[0]]) + np.log(comp.P[history[:-1], history[1:]]).sum()
    post = np.exp(logpost - logpost.max())
    post /= post.sum()
    return sum(p * comp.P[history[-1]] for p, comp in zip(post, comps))


def calibrate(dist: np.ndarray, low: float = 0.05, high: float = 0.95) -> np.ndarray:
    """Affine map of a distribution onto [low, high] (constant input maps to the midpoint)."""
    dist = np.asarray(dist, dtype=np.float64)
    lo, hi = dist.min(axis=-1, keepdims=True), dist.max(axis=-1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = np.where(hi > lo, (dist - lo) / span, 0.5)
    return low + (high - low) * scaled


def corrupt_scores(oracle_dist, sigma: float, seed: int, eps: float = EPS):
    """Calibrated oracle plus Gaussian noise, clamped to [eps, 1]. Items are 1..K."""
    from .correct import ScoreVector

    if sigma < 0:
        raise ConfigError("sigma must be nonnegative")
    base = calibrate(oracle_dist)
    rng = np.random.default_rng(seed)
    scores = np.clip(base + sigma * rng.standard_normal(base.shape), eps, 1.0)
    return ScoreVector(np.arange(1, len(base) + 1), scores, eps=eps)


class NoisyOracleScorer:
    """Stand-in recommender: exact next-item law, calibrated and corrupted per user.

    ``score_all`` takes (B, T) left-padded histories of dataset item ids and
    returns (B, K+1) scores with column 0 (pad) set to 0. The noise for a
    history depends only on ``(seed, history)``.
    """

    def __init__(self, world, sigma: float, seed: int = 0, eps: float = EPS):
        self.world = world
        self.sigma = sigma
        self.seed = seed
        self.eps = eps
        self.n_items = world.K

    def oracle(self, items) -> np.ndarray:
        items = np.atleast_2d(np.asarray(items))
        out = np.zeros((items.shape[0], self.n_items + 1))
        for b, row in enumerate(items):
            out[b, 1:] = next_item_distribution(self.world, row[row > 0] - 1)
        return out

    def score_all(self, items) -> np.ndarray:
        items = np.atleast_2d(np.asarray(items))
        dist = self.oracle(items)[:, 1:]
        base = calibrate(dist)
        out = np.zeros((items.shape[0], self.n_items + 1))
        for b, row in enumerate(items):
            key = [self.seed] + [int(v) for v in row[row > 0]]
            rng = np.random.default_rng(key)
            noise = rng.standard_normal(self.n_items)
            out[b, 1:] = np.clip(base[b] + self.sigma * noise, self.eps, 1.0)
        return out


def fd_gradient(objective, y, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar black-box objective."""
    y = np.asarray(y, dtype=np.float64)
    grad = np.empty_like(y)
    for i in range(y.size):
        step = np.zeros_like(y)
        step.flat[i] = eps
        hi, lo = float(objective(y + step)), float(objective(y - step))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"objective is not finite around coordinate {i}")
        grad.flat[i] = (hi - lo) / (2 * eps)
    return grad


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)
