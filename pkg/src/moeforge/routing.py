"""Two-stage hierarchical router, flat top-k reference router, load statistics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import GroupAssignment
from .numerics import NumericsError, OpCounter

log = logging.getLogger(__name__)

DEFAULT_K = 2
DEFAULT_G1 = 1


class RoutingError(NumericsError):
    pass


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise RoutingError("non-finite router logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def top_indices(scores, n: int) -> np.ndarray:
    """Indices of the ``n`` largest scores; ties go to the lower index."""
    return np.argsort(-np.asarray(scores), kind="stable")[:n]


@dataclass
class RouterParams:
    prototypes: np.ndarray  # G x d_in
    expert_vectors: np.ndarray  # E x d_in
    temperature: float = 1.0
    g1: int = DEFAULT_G1
    k: int = DEFAULT_K

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.expert_vectors = np.asarray(self.expert_vectors, dtype=np.float64)
        if self.temperature <= 0:
            raise RoutingError(f"temperature must be > 0, got {self.temperature}")
        if self.g1 < 1 or self.k < 1:
            raise RoutingError("g1 and k must be >= 1")
        if self.g1 > self.prototypes.shape[0]:
            raise RoutingError(f"g1={self.g1} exceeds G={self.prototypes.shape[0]}")
        if self.prototypes.shape[1] != self.expert_vectors.shape[1]:
            raise RoutingError("prototype and expert-vector dims differ")

    @property
    def g(self) -> int:
        return self.prototypes.shape[0]

    @property
    def e(self) -> int:
        return self.expert_vectors.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def check(self, assignment: GroupAssignment) -> None:
        if assignment.g != self.g or assignment.e != self.e:
            raise RoutingError(
                f"router has G={self.g}, E={self.e}; assignment has G={assignment.g}, E={assignment.e}"
            )
        if self.k > assignment.k * self.g1:
            raise RoutingError(f"k={self.k} exceeds K*g1={assignment.k * self.g1}")


@dataclass
class RoutingDecision:
    token_id: int
    groups: list[int]
    group_probs: list[float]
    experts: list[int]
    # within-group (or flat) softmax probability of each selected expert
    expert_probs: list[float]
    # final gate weights, renormalized over the selected experts
    gates: list[float] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "token_id": int(self.token_id),
            "groups": [int(g) for g in self.groups],
            "experts": [int(i) for i in self.experts],
            "p": [float(p) for p in self.gates],
        }

    @classmethod
    def from_record(cls, rec: dict) -> RoutingDecision:
        try:
            experts = [int(i) for i in rec["experts"]]
            gates = [float(p) for p in rec.get("p", [])]
            return cls(int(rec["token_id"]), [int(g) for g in rec.get("groups", [])], [], experts, gates, gates)
        except (KeyError, TypeError, ValueError) as exc:
            raise RoutingError(f"malformed decision record: {rec!r}") from exc


def dump_decisions(decisions, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_record(), sort_keys=True) + "\n")


def load_decisions(path) -> list[RoutingDecision]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RoutingError(f"{path}:{lineno}: invalid JSON") from exc
            if not isinstance(rec, dict):
                raise RoutingError(f"{path}:{lineno}: expected an object")
            out.append(RoutingDecision.from_record(rec))
    return out


def route_stage1(x, rp: RouterParams, counter: OpCounter | None = None):
    """Group probabilities ``softmax(U x / T)`` and the top-``g1`` groups."""
    x = np.asarray(x, dtype=np.float64)
    z = rp.prototypes @ x / rp.temperature
    if counter is not None:
        counter.add(rp.g * rp.d)
    p = softmax(z)
    return p, top_indices(z, rp.g1)


def route_stage2(x, group: int, rp: RouterParams, assignment: GroupAssignment, counter: OpCounter | None = None):
    """Softmax over the logits ``v_i . x`` of the group's members and the top-``k``.

    Returns probabilities aligned with ``assignment.groups[group]`` and the
    selected expert ids. Stage-2 logits are not temperature scaled.
    """
    if not 0 <= group < assignment.g:
        raise RoutingError(f"group {group} out of range")
    members = assignment.groups[group]
    if rp.k > len(members):
        raise RoutingError(f"k={rp.k} exceeds group size {len(members)}")
    x = np.asarray(x, dtype=np.float64)
    logits = rp.expert_vectors[members] @ x
    if counter is not None:
        counter.add(len(members) * rp.d)
    q = softmax(logits)
    chosen = [members[j] for j in top_indices(logits, rp.k)]
    return q, chosen


def route(x, rp: RouterParams, assignment: GroupAssignment, token_id: int = 0, counter: OpCounter | None = None) -> RoutingDecision:
    """Full hierarchical decision.

    With ``g1 > 1`` stage 2 runs in each selected group, takes the top-``k``
    of the union by ``p_g * p_{i|g}``, and renormalizes those products.
    """
    rp.check(assignment)
    p, groups = route_stage1(x, rp, counter)
    cands = []  # (score, expert, group, p_i|g)
    for g in groups:
        members = assignment.groups[g]
        q, _ = route_stage2(x, int(g), RouterParams(rp.prototypes, rp.expert_vectors, rp.temperature, 1, min(rp.k, len(members))), assignment, counter)
        for j, i in enumerate(members):
            cands.append((p[g] * q[j], i, int(g), q[j]))
    cands.sort(key=lambda c: (-c[0], c[1]))
    chosen = cands[: rp.k]
    scores = np.array([c[0] for c in chosen])
    gates = scores / scores.sum()
    return RoutingDecision(
        token_id=token_id,
        groups=[int(g) for g in groups],
        group_probs=[float(p[g]) for g in groups],
        experts=[c[1] for c in chosen],
        expert_probs=[float(c[3]) for c in chosen],
        gates=[float(v) for v in gates],
    )


def flat_route(x, all_expert_vectors, k: int, token_id: int = 0, temperature: float = 1.0, counter: OpCounter | None = None) -> RoutingDecision:
    """Single softmax over all ``E`` logits, top-``k``, renormalized gates."""
    v = np.asarray(all_expert_vectors, dtype=np.float64)
    e = v.shape[0]
    if not 1 <= k <= e:
        raise RoutingError(f"k={k} outside [1, {e}]")
    logits = v @ np.asarray(x, dtype=np.float64) / temperature
    if counter is not None:
        counter.add(v.shape[0] * v.shape[1])
    p = softmax(logits)
    chosen = top_indices(logits, k)
    sel = p[chosen]
    return RoutingDecision(token_id, [], [], [int(i) for i in chosen], [float(s) for s in sel], [float(s) for s in sel / sel.sum()])


def route_batch_hier(xs, rp: RouterParams, assignment: GroupAssignment) -> np.ndarray:
    """Vectorized ``g1 = 1`` hierarchical selection: ``N x k`` expert ids."""
    rp.check(assignment)
    if rp.g1 != 1:
        raise RoutingError("batch router supports g1 = 1 only")
    xs = np.asarray(xs, dtype=np.float64)
    z = xs @ rp.prototypes.T / rp.temperature
    if not np.all(np.isfinite(z)):
        raise RoutingError("non-finite router logits")
    gsel = np.argmax(z, axis=1)
    members = np.asarray(assignment.groups)  # G x K, ascending ids
    cand = members[gsel]  # N x K
    logits = np.einsum("nkd,nd->nk", rp.expert_vectors[cand], xs)
    order = np.argsort(-logits, axis=1, kind="stable")[:, : rp.k]
    return np.take_along_axis(cand, order, axis=1)


def route_batch_flat(xs, expert_vectors, k: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    logits = xs @ np.asarray(expert_vectors, dtype=np.float64).T
    if not np.all(np.isfinite(logits)):
        raise RoutingError("non-finite router logits")
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def routing_cost(e: int, g: int, k_per_group: int, d: int) -> tuple[int, int, float]:
    """Per-token router multiplies, hierarchical ``(G+K) d`` vs flat ``E d``."""
    for name, v in (("e", e), ("g", g), ("k_per_group", k_per_group), ("d", d)):
        if v < 1:
            raise RoutingError(f"{name} must be >= 1, got {v}")
    hier = (g + k_per_group) * d
    flat = e * d
    return hier, flat, e / (g + k_per_group)


@dataclass
class LoadStats:
    per_expert_tokens: np.ndarray
    cov: float
    zero_mean: bool = False

    def to_dict(self) -> dict:
        return {
            "per_expert_tokens": [int(c) for c in self.per_expert_tokens],
            "cov": float(self.cov),
            "zero_mean": bool(self.zero_mean),
        }


def coefficient_of_variation(loads) -> tuple[float, bool]:
    loads = np.asarray(loads, dtype=np.float64)
    mean = float(loads.mean()) if loads.size else 0.0
    if mean == 0.0:
        return 0.0, True
    return float(loads.std()) / mean, False


def load_stats(decisions, e: int) -> LoadStats:
    """Tokens per expert and population-std / mean.

    ``decisions`` is a list of :class:`RoutingDecision` or an ``N x k`` id array.
    """
    if e < 1:
        raise RoutingError(f"e must be >= 1, got {e}")
    if isinstance(decisions, np.ndarray):
        counts = np.bincount(decisions.ravel(), minlength=e)
    else:
        counts = np.zeros(e, dtype=np.int64)
        for d in decisions:
            for i in d.experts:
                counts[i] += 1
    cov, zero = coefficient_of_variation(counts)
    if zero:
        log.warning("load_stats: no routed tokens, CoV reported as 0")
    return LoadStats(counts[:e].astype(np.int64), cov, zero)


def zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def balanced_topic_groups(masses, g: int) -> list[list[int]]:
    """Assign topics to ``g`` equal-size groups, heaviest first into the lightest open group."""
    masses = np.asarray(masses, dtype=np.float64)
    n = masses.size
    if n % g:
        raise RoutingError(f"{n} topics cannot be split into {g} equal groups")
    cap = n // g
    groups = [[] for _ in range(g)]
    load = np.zeros(g)
    for t in np.argsort(-masses, kind="stable"):
        open_ = [gi for gi in range(g) if len(groups[gi]) < cap]
        gi = min(open_, key=lambda q: (load[q], q))
        groups[gi].append(int(t))
        load[gi] += masses[t]
    return groups


@dataclass
class ZipfScenario:
    """Synthetic skewed token stream and the two routers compared on it.

    Tokens come from ``T = topics_per_expert * E`` orthonormal topic
    directions with Zipf(``s``) popularity, ``x = c_t + noise``. Both routers
    get the same mass-balanced packing of topics (heaviest first into the
    lightest open bin):

    * flat: each expert owns ``T/E`` topics, its vector is their sum;
    * hierarchical: each group owns ``T/G`` topics, its prototype is their
      sum, and its ``K`` experts share that direction up to a jitter
      orthogonal to the group's topics (the near-duplicate experts a shared
      base produces), so stage 2 splits the group's tokens by their noise.
    """

    tokens: np.ndarray
    topics: np.ndarray
    flat_vectors: np.ndarray
    hier: RouterParams
    assignment: GroupAssignment


def make_zipf_scenario(
    n_tokens: int = 100_000,
    e: int = 32,
    g: int = 8,
    topics_per_expert: int = 4,
    s: float = 1.2,
    noise: float = 0.5,
    jitter: float = 0.3,
    k: int = DEFAULT_K,
    seed: int = 0,
) -> ZipfScenario:
    if e % g:
        raise RoutingError(f"E={e} is not divisible by G={g}")
    t = topics_per_expert * e
    d = t
    rng = np.random.default_rng(seed)
    dirs = np.linalg.qr(rng.standard_normal((d, t)))[0].T
    masses = zipf_weights(t, s)
    topics = rng.choice(t, size=n_tokens, p=masses)
    tokens = dirs[topics] + rng.normal(0.0, noise / np.sqrt(d), size=(n_tokens, d))

    flat_vectors = np.stack([dirs[tg].sum(axis=0) for tg in balanced_topic_groups(masses, e)])

    topic_groups = balanced_topic_groups(masses, g)
    assignment = GroupAssignment.contiguous(e, g)
    protos = np.stack([dirs[tg].sum(axis=0) for tg in topic_groups])
    vecs = np.empty((e, d))
    for gi, members in enumerate(assignment.groups):
        unit = protos[gi] / np.linalg.norm(protos[gi])
        span = dirs[topic_groups[gi]].T  # orthonormal columns
        for i in members:
            j = rng.standard_normal(d)
            j -= span @ (span.T @ j)
            vecs[i] = unit + jitter * j / np.linalg.norm(j)
    hier = RouterParams(protos, vecs, 1.0, 1, k)
    return ZipfScenario(tokens, topics, flat_vectors, hier, assignment)


def compare_load_balance(sc: ZipfScenario, k: int = DEFAULT_K) -> dict:
    flat = route_batch_flat(sc.tokens, sc.flat_vectors, k)
    hier = route_batch_hier(sc.tokens, sc.hier, sc.assignment)
    e = sc.flat_vectors.shape[0]
    fs = load_stats(flat, e)
    hs = load_stats(hier, e)
    return {
        "tokens": int(sc.tokens.shape[0]),
        "cov_flat": fs.cov,
        "cov_hier": hs.cov,
        "ratio": fs.cov / hs.cov if hs.cov > 0 else float("inf"),
        "flat_loads": fs.to_dict()["per_expert_tokens"],
        "hier_loads": hs.to_dict()["per_expert_tokens"],
    }
