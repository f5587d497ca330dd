"""Fused parameter/activation similarity and balanced medoid clustering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .expert_bank import ExpertBank
from .numerics import NumericsError

DEFAULT_ALPHA = 0.7
DEFAULT_TAU = 0.1
DEFAULT_CACHE_LIFETIME = 50
DEFAULT_STALE_EPS = 0.02
DEFAULT_DELTA = 0.01


class ClusteringError(NumericsError):
    pass


def fused_similarity(s_p, s_t, alpha: float):
    """``alpha * s_p + (1 - alpha) * s_t``; works on scalars and arrays."""
    if not 0.0 <= alpha <= 1.0:
        raise ClusteringError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return s_p
    if alpha == 0.0:
        return s_t
    return alpha * s_p + (1.0 - alpha) * s_t


@dataclass(frozen=True)
class SimilarityConfig:
    alpha: float = DEFAULT_ALPHA
    tau: float = DEFAULT_TAU
    cache_lifetime: int = DEFAULT_CACHE_LIFETIME
    stale_eps: float = DEFAULT_STALE_EPS
    # keep at most this many neighbours per expert; None disables the cap
    neighbor_cap: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ClusteringError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.cache_lifetime < 1:
            raise ClusteringError("cache_lifetime must be >= 1")
        if self.stale_eps < 0:
            raise ClusteringError("stale_eps must be >= 0")
        if self.neighbor_cap is not None and self.neighbor_cap < 1:
            raise ClusteringError("neighbor_cap must be >= 1")


@dataclass
class SimilarityMatrix:
    s_param: np.ndarray
    s_task: np.ndarray
    s_fused: np.ndarray
    # True where the pair survived the tau prune (absent pairs are not zeroed)
    kept: np.ndarray
    cfg: SimilarityConfig
    step: int
    last_computed_step: np.ndarray
    weight_snapshot: np.ndarray
    recomputed_rows: list[int] = field(default_factory=list)

    @property
    def e(self) -> int:
        return self.s_fused.shape[0]

    @property
    def alpha(self) -> float:
        return self.cfg.alpha

    @property
    def tau(self) -> float:
        return self.cfg.tau

    def distance(self) -> np.ndarray:
        """``1 - S_fused`` with pruned pairs at distance 1 and a zero diagonal."""
        d = 1.0 - self.s_fused
        d[~self.kept] = 1.0
        np.fill_diagonal(d, 0.0)
        return np.maximum(d, 0.0)


def _pair_cos(u: np.ndarray, v: np.ndarray, uu: float, vv: float) -> float:
    if uu == 0.0 or vv == 0.0:
        return 0.0
    c = float(np.dot(u, v)) / math.sqrt(uu * vv)
    return min(1.0, max(-1.0, c))


def _task_similarity(bank: ExpertBank) -> np.ndarray:
    mus = np.stack([c.mu for c in bank.centroids])
    active = np.array([c.tokens_seen > 0 for c in bank.centroids])
    sq = np.array([float(np.dot(m, m)) for m in mus])  # same reduction as the pair dot
    e = bank.e
    s = np.zeros((e, e))
    for i in range(e):
        if not active[i]:
            continue
        for j in range(i, e):
            if active[j]:
                s[i, j] = s[j, i] = _pair_cos(mus[i], mus[j], sq[i], sq[j])
    return s


def build_similarity(
    bank: ExpertBank,
    prev: SimilarityMatrix | None = None,
    step: int = 0,
    cfg: SimilarityConfig | None = None,
) -> SimilarityMatrix:
    """Parameter, task and fused similarity with row-level caching of S_param.

    Row ``i`` of ``S_param`` is reused from ``prev`` while its age is below
    the cache lifetime and expert ``i``'s relative weight change since the
    last compute is at most ``stale_eps``. Task similarity is always fresh;
    experts that have never seen a token get task similarity 0.
    """
    cfg = cfg or (prev.cfg if prev is not None else SimilarityConfig())
    w = bank.flat_weights()
    e = bank.e
    sq = np.array([float(np.dot(r, r)) for r in w])  # same reduction as the pair dot

    if prev is None or prev.e != e or prev.weight_snapshot.shape != w.shape:
        stale = np.ones(e, dtype=bool)
        s_param = np.zeros((e, e))
        stamps = np.full(e, step, dtype=np.int64)
        snapshot = w.copy()
    else:
        age = step - prev.last_computed_step
        snap = prev.weight_snapshot
        diff = np.linalg.norm(w - snap, axis=1)
        base = np.linalg.norm(snap, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(base > 0, diff / np.where(base > 0, base, 1.0), np.where(diff > 0, np.inf, 0.0))
        stale = (age >= cfg.cache_lifetime) | (rel > cfg.stale_eps)
        s_param = prev.s_param.copy()
        stamps = prev.last_computed_step.copy()
        snapshot = prev.weight_snapshot.copy()

    rows = [int(i) for i in np.flatnonzero(stale)]
    for i in rows:
        for j in range(e):
            if stale[j] and j < i:
                continue  # already filled from row j
            s_param[i, j] = s_param[j, i] = _pair_cos(w[i], w[j], sq[i], sq[j])
        stamps[i] = step
        snapshot[i] = w[i]

    s_task = _task_similarity(bank)
    s_fused = fused_similarity(s_param, s_task, cfg.alpha).copy()
    kept = s_fused >= cfg.tau
    if cfg.neighbor_cap is not None and cfg.neighbor_cap < e - 1:
        capped = np.zeros_like(kept)
        for i in range(e):
            scores = np.where(np.arange(e) == i, -np.inf, s_fused[i])
            top = np.argsort(-scores, kind="stable")[: cfg.neighbor_cap]
            capped[i, top] = True
        kept &= capped | capped.T
    np.fill_diagonal(kept, True)
    return SimilarityMatrix(
        s_param=s_param,
        s_task=s_task,
        s_fused=s_fused,
        kept=kept,
        cfg=cfg,
        step=step,
        last_computed_step=stamps,
        weight_snapshot=snapshot,
        recomputed_rows=rows,
    )


@dataclass
class GroupAssignment:
    groups: list[list[int]]
    medoids: list[int]
    mean_intra_similarity: float = 1.0

    def __post_init__(self):
        self.groups = [sorted(int(i) for i in grp) for grp in self.groups]
        self.medoids = [int(m) for m in self.medoids]
        if not self.groups:
            raise ClusteringError("assignment needs at least one group")
        k = len(self.groups[0])
        members = [i for grp in self.groups for i in grp]
        if any(len(grp) != k for grp in self.groups):
            raise ClusteringError("groups must all have the same size")
        if sorted(members) != list(range(len(members))):
            raise ClusteringError("groups must partition 0..E-1 exactly")
        if len(self.medoids) != len(self.groups):
            raise ClusteringError("one medoid per group required")
        for m, grp in zip(self.medoids, self.groups):
            if m not in grp:
                raise ClusteringError(f"medoid {m} is not a member of its group {grp}")

    @property
    def g(self) -> int:
        return len(self.groups)

    @property
    def k(self) -> int:
        return len(self.groups[0])

    @property
    def e(self) -> int:
        return self.g * self.k

    @property
    def group_of(self) -> np.ndarray:
        out = np.empty(self.e, dtype=np.int64)
        for gid, grp in enumerate(self.groups):
            out[grp] = gid
        return out

    @classmethod
    def contiguous(cls, e: int, g: int) -> GroupAssignment:
        """Block layout ``[0..K-1], [K..2K-1], ...`` used before the first clustering."""
        if g < 1 or e % g:
            raise ClusteringError(f"E={e} is not divisible by G={g}")
        k = e // g
        groups = [list(range(gi * k, (gi + 1) * k)) for gi in range(g)]
        return cls(groups, [grp[0] for grp in groups], 1.0)

    def to_dict(self) -> dict:
        return {
            "groups": [list(grp) for grp in self.groups],
            "medoids": list(self.medoids),
            "mean_intra_similarity": float(self.mean_intra_similarity),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> GroupAssignment:
        return cls(d["groups"], d["medoids"], float(d.get("mean_intra_similarity", 1.0)))

    @classmethod
    def from_json(cls, s: str) -> GroupAssignment:
        return cls.from_dict(json.loads(s))


def mean_intra_similarity(s_fused: np.ndarray, groups) -> float:
    """Mean fused similarity over all within-group expert pairs (1.0 if none)."""
    total = 0.0
    n = 0
    for grp in groups:
        for a in range(len(grp)):
            for b in range(a + 1, len(grp)):
                total += float(s_fused[grp[a], grp[b]])
                n += 1
    return total / n if n else 1.0


def _kmeanspp_seeds(dist: np.ndarray, g: int, rng: np.random.Generator) -> list[int]:
    e = dist.shape[0]
    seeds = [int(rng.integers(e))]
    nearest = dist[:, seeds[0]].copy()
    while len(seeds) < g:
        w = nearest**2
        total = float(w.sum())
        if total <= 0.0:
            raise ClusteringError(f"fewer than {g} distinct experts under the fused distance")
        pick = int(rng.choice(e, p=w / total))
        seeds.append(pick)
        nearest = np.minimum(nearest, dist[:, pick])
    return seeds


def _assign(dist: np.ndarray, medoids: list[int]) -> np.ndarray:
    labels = np.argmin(dist[:, medoids], axis=1)  # first minimum: lower group id wins ties
    for gid, m in enumerate(medoids):
        labels[m] = gid
    return labels


def _rebalance(dist: np.ndarray, labels: np.ndarray, medoids: list[int], k: int) -> np.ndarray:
    """One greedy pass moving boundary experts from over- to under-capacity groups.

    Candidates ``(expert, target)`` are visited in descending order of
    ``d(expert, own medoid) - d(expert, target medoid)``; ties go to the lower
    expert id, then the lower target id.
    """
    labels = labels.copy()
    g = len(medoids)
    sizes = np.bincount(labels, minlength=g)
    over = [gi for gi in range(g) if sizes[gi] > k]
    if not over:
        return labels
    under = [gi for gi in range(g) if sizes[gi] < k]
    medoid_set = set(medoids)
    cands = []
    for gi in over:
        for i in np.flatnonzero(labels == gi):
            if int(i) in medoid_set:
                continue
            for h in under:
                gain = dist[i, medoids[gi]] - dist[i, medoids[h]]
                cands.append((-gain, int(i), h))
    cands.sort()
    moved = set()
    for _, i, h in cands:
        src = labels[i]
        if i in moved or sizes[src] <= k or sizes[h] >= k:
            continue
        labels[i] = h
        sizes[src] -= 1
        sizes[h] += 1
        moved.add(i)
    return labels


def _update_medoids(dist: np.ndarray, labels: np.ndarray, g: int) -> list[int]:
    medoids = []
    for gi in range(g):
        members = np.flatnonzero(labels == gi)
        cost = dist[np.ix_(members, members)].sum(axis=1)
        medoids.append(int(members[np.argmin(cost)]))
    return medoids


def cluster_experts(sim: SimilarityMatrix, g: int, seed: int, max_iter: int = 10) -> GroupAssignment:
    """Partition experts into ``g`` groups of exactly ``E/g`` members.

    K-means++ seeding over ``D = 1 - S_fused`` picks medoids, experts join the
    nearest medoid, over-full groups shed boundary experts, and medoids are
    refreshed until they stop moving (at most ``max_iter`` rounds).
    """
    e = sim.e
    if g < 1 or e % g:
        raise ClusteringError(f"E={e} is not divisible by G={g}")
    k = e // g
    dist = sim.distance()
    if g == 1:
        labels = np.zeros(e, dtype=np.int64)
        medoids = _update_medoids(dist, labels, 1)
    else:
        rng = np.random.default_rng(seed)
        medoids = _kmeanspp_seeds(dist, g, rng)
        labels = None
        for _ in range(max(1, max_iter)):
            labels = _rebalance(dist, _assign(dist, medoids), medoids, k)
            new = _update_medoids(dist, labels, g)
            if new == medoids:
                break
            medoids = new
            labels = None
        if labels is None:
            labels = _rebalance(dist, _assign(dist, medoids), medoids, k)

    groups = [sorted(int(i) for i in np.flatnonzero(labels == gi)) for gi in range(g)]
    order = sorted(range(g), key=lambda gi: groups[gi][0])
    groups = [groups[gi] for gi in order]
    medoids = [medoids[gi] for gi in order]
    return GroupAssignment(groups, medoids, mean_intra_similarity(sim.s_fused, groups))


def should_recluster(old_mean_sim: float, new_mean_sim: float, delta: float = DEFAULT_DELTA) -> bool:
    if delta < 0:
        raise ClusteringError(f"delta must be >= 0, got {delta}")
    return (new_mean_sim - old_mean_sim) > delta


def recluster_interval(e: int) -> int:
    if e < 1:
        raise ClusteringError(f"E must be >= 1, got {e}")
    return 100 if e <= 256 else 200
