"""Pseudo-domain discovery: K-means, the centroid-ratio outlier gate, and epsilon decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

# relative slack under which two squared distances count as equal
EQUIDISTANT_RTOL = 1e-9
GATES = ("literal", "nearest_pair")


@dataclass(frozen=True)
class ClusterConfig:
    num_domains: int = 2
    warmup_fraction: float = 0.1
    recluster_every: int = 10
    gamma: float = 0.5
    epsilon0: float = 1.0
    gate: str = "literal"
    exclude_outliers_from_ssl: bool = False
    kmeans_iters: int = 100

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigError("pseudo-domain discovery needs num_domains >= 2")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.recluster_every < 1:
            raise ConfigError("recluster_every must be >= 1")
        if self.gate not in GATES:
            raise ConfigError(f"gate must be one of {GATES}")
        if self.epsilon0 < 0:
            raise ConfigError("epsilon0 must be >= 0")


@dataclass
class ClusterState:
    centroids: np.ndarray
    epsilon: float
    round: int
    assignments: np.ndarray
    inliers: np.ndarray  # True = not an outlier
    history: list = field(default_factory=list)

    @property
    def outliers(self) -> np.ndarray:
        return ~self.inliers

    @property
    def inlier_fraction(self) -> float:
        return float(self.inliers.mean()) if len(self.inliers) else 0.0


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _exact_sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # no cancellation: used where ratios of distances matter
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _pick(weights: np.ndarray, u: float) -> int:
    total = weights.sum()
    if total <= 0:
        return min(int(u * len(weights)), len(weights) - 1)
    cdf = np.cumsum(weights)
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), len(weights) - 1)


def kmeans_plusplus(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    idx = [_pick(np.ones(len(X)), rng.random())]
    d2 = _sq_dists(X, X[idx])[:, 0]
    for _ in range(1, M):
        i = _pick(d2, rng.random())
        idx.append(i)
        d2 = np.minimum(d2, _sq_dists(X, X[[i]])[:, 0])
    return X[idx].copy()


def kmeans(X, M: int, seed: int = 0, max_iters: int = 100, return_history: bool = False):
    """Lloyd's algorithm from k-means++ seeding.

    An empty cluster is reseeded at the point farthest from its current centroid.
    Returns ``(centroids, assignments)``, plus the per-iteration objective
    (sum of squared distances) when ``return_history`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("representations must be a 2-D array")
    if M < 1 or len(X) < M:
        raise InputError(f"need at least M={M} samples, got {len(X)}")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, M, rng)
    assign = None
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(X, C)
        new = d2.argmin(1)
        history.append(float(d2[np.arange(len(X)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for m in range(M):
            members = assign == m
            if members.any():
                C[m] = X[members].mean(0)
            else:
                far = int(d2[np.arange(len(X)), assign].argmax())
                C[m] = X[far]
                assign[far] = m
                d2[far] = 0.0
    d2 = _sq_dists(X, C)
    assign = d2.argmin(1)
    if return_history:
        return C, assign, history
    return C, assign


def outlier_mask(X, centroids, epsilon: float, gate: str = "literal") -> np.ndarray:
    """True where a sample is NOT an outlier.

    literal:      max_{m,n} d_m^2 / d_n^2 > 1 + eps, i.e. d_max^2 > (1 + eps) d_min^2
    nearest_pair: d_second^2 > (1 + eps) d_nearest^2

    A sample sitting on a centroid (d_min = 0) is kept as long as some other centroid
    is farther away. Ratios within ``EQUIDISTANT_RTOL`` of 1 count as equidistant.
    """
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    C = np.asarray(centroids, dtype=np.float64)
    if len(C) < 2:
        raise InputError("outlier gate needs at least two centroids")
    if gate not in GATES:
        raise ConfigError(f"gate must be one of {GATES}")
    d2 = _exact_sq_dists(np.asarray(X, dtype=np.float64), C)
    d_min = d2.min(1)
    if gate == "literal":
        d_other = d2.max(1)
    else:
        d_other = np.sort(d2, axis=1)[:, 1]
    return d_other > (1.0 + epsilon) * d_min * (1.0 + EQUIDISTANT_RTOL)


def epsilon_schedule(round: int, gamma: float = 0.5, epsilon0: float = 1.0) -> float:
    """epsilon0 * gamma ** round."""
    if not 0 < gamma < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    if round < 0:
        raise ConfigError("round must be >= 0")
    return epsilon0 * gamma**round


def match_labels(new: np.ndarray, old: np.ndarray, M: int) -> np.ndarray:
    """Permutation ``perm`` maximizing agreement of ``perm[new]`` with ``old``."""
    conf = np.zeros((M, M), dtype=np.int64)
    np.add.at(conf, (new, old), 1)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    perm = np.empty(M, dtype=np.int64)
    perm[rows] = cols
    return perm


def pseudo_label_accuracy(pred, true, mask=None) -> float:
    """Agreement of ``pred`` with ``true`` after the best label permutation."""
    pred, true = np.asarray(pred), np.asarray(true)
    if mask is not None:
        pred, true = pred[mask], true[mask]
    if len(pred) == 0:
        return float("nan")
    M = int(max(pred.max(), true.max())) + 1
    perm = match_labels(pred, true, M)
    return float((perm[pred] == true).mean())


def recluster(reps, prev: ClusterState | None, cfg: ClusterConfig, seed: int, true_labels=None) -> ClusterState:
    """One robust-clustering round over the full set of representations.

    The round index advances, epsilon follows the decay schedule, labels are
    aligned to the previous round by maximum overlap. If fewer than 2 * M
    samples pass the gate the round is abandoned and ``prev`` is returned.
    """
    X = np.asarray(reps, dtype=np.float64)
    M = cfg.num_domains
    rnd = 0 if prev is None else prev.round + 1
    eps = epsilon_schedule(rnd, cfg.gamma, cfg.epsilon0)
    C, assign = kmeans(X, M, seed=seed + rnd, max_iters=cfg.kmeans_iters)
    if prev is not None:
        perm = match_labels(assign, prev.assignments, M)
        inv = np.argsort(perm)
        assign = perm[assign]
        C = C[inv]
    keep = outlier_mask(X, C, eps, cfg.gate)
    report = {
        "round": rnd,
        "epsilon": eps,
        "inlier_fraction": float(keep.mean()),
        "cluster_sizes": np.bincount(assign, minlength=M).tolist(),
    }
    if true_labels is not None:
        report["accuracy"] = pseudo_label_accuracy(assign, true_labels, keep) if keep.any() else None
    history = ([] if prev is None else list(prev.history)) + [report]
    if keep.sum() < 2 * M:
        log.warning("round %d: only %d inliers (< 2M = %d)", rnd, int(keep.sum()), 2 * M)
        if prev is not None:
            prev.history = history[:-1] + [dict(report, aborted=True)]
            return prev
        history[-1]["aborted"] = True
    return ClusterState(C, eps, rnd, assign, keep, history)
