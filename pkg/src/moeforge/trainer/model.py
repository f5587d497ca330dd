"""Trainable MoE layer with manual forward/backward passes.

Experts are either dense matrices or shared group bases plus rank-``r``
factor pairs. The router is either hierarchical (group prototypes, then
experts inside the chosen group) or flat top-``k`` over all experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..clustering import GroupAssignment
from ..compression import GroupedParams
from ..expert_bank import Centroid, ExpertBank, init_bank
from ..numerics import FactorPair, NumericsError
from ..routing import RouterParams, RoutingDecision, softmax, top_indices

ROUTER_PARAMS = ("prototypes", "expert_vectors")
EXPERT_PARAMS = ("weights", "bases", "a", "b")


class ModelError(NumericsError):
    pass


class MoEModel:
    def __init__(
        self,
        e: int,
        g: int,
        d_in: int,
        d_out: int,
        k: int = 2,
        g1: int = 1,
        r: int = 4,
        hierarchical: bool = True,
        tanh_output: bool = False,
        seed: int = 0,
        beta: float = 0.05,
    ):
        if e % g:
            raise ModelError(f"E={e} is not divisible by G={g}")
        if hierarchical and k > (e // g) * g1:
            raise ModelError(f"k={k} exceeds K*g1={(e // g) * g1}")
        if not 1 <= k <= e:
            raise ModelError(f"k={k} outside [1, {e}]")
        if not 1 <= g1 <= g:
            raise ModelError(f"g1={g1} outside [1, {g}]")
        self.e, self.g, self.d_in, self.d_out = e, g, d_in, d_out
        self.k, self.g1, self.r = k, g1, r
        self.hierarchical = hierarchical
        self.tanh_output = tanh_output
        self.temperature = 1.0
        self.version = 0
        rng = np.random.default_rng(seed)
        bank = init_bank(e, d_in, d_out, int(rng.integers(2**31)), beta)
        self.weights = np.stack(bank.experts)
        self.bases = None
        self.a = None
        self.b = None
        self.pruned = np.zeros(e, dtype=bool)
        self.assignment = GroupAssignment.contiguous(e, g)
        scale = 1.0 / np.sqrt(d_in)
        self.prototypes = rng.normal(0.0, scale, size=(g, d_in))
        self.expert_vectors = rng.normal(0.0, scale, size=(e, d_in))
        self.centroids = [Centroid.zeros(d_in, beta) for _ in range(e)]

    @property
    def compressed(self) -> bool:
        return self.bases is not None

    def params(self) -> dict:
        """Trainable arrays by reference, keyed by name."""
        out = {}
        if self.compressed:
            out.update(bases=self.bases, a=self.a, b=self.b)
        else:
            out["weights"] = self.weights
        if self.hierarchical:
            out["prototypes"] = self.prototypes
        out["expert_vectors"] = self.expert_vectors
        return out

    def router_snapshot(self) -> dict:
        return {n: getattr(self, n).copy() for n in ROUTER_PARAMS}

    def expert_weights(self) -> np.ndarray:
        if not self.compressed:
            return self.weights.copy()
        group_of = self.assignment.group_of
        out = self.bases[group_of].copy()
        out += np.einsum("eor,eir->eoi", self.a, self.b)
        return out

    def bank(self) -> ExpertBank:
        return ExpertBank(list(self.expert_weights()), list(self.centroids))

    def grouped_params(self) -> GroupedParams:
        if not self.compressed:
            raise ModelError("model is not compressed")
        res = [
            None if self.pruned[i] else FactorPair(self.a[i].copy(), self.b[i].copy())
            for i in range(self.e)
        ]
        return GroupedParams(self.assignment, [b.copy() for b in self.bases], res, self.r)

    def set_grouped_params(self, gp: GroupedParams) -> None:
        if gp.e != self.e or gp.assignment.g != self.g:
            raise ModelError("grouped params do not match the model's E/G")
        self.r = gp.r
        self.assignment = gp.assignment
        self.bases = np.stack(gp.bases)
        self.a = np.zeros((self.e, self.d_out, gp.r))
        self.b = np.zeros((self.e, self.d_in, gp.r))
        for i, f in enumerate(gp.residuals):
            if f is not None:
                self.a[i] = f.a
                self.b[i] = f.b
        self.pruned = gp.pruned_mask.copy()
        self.weights = None
        self.version += 1

    def set_assignment(self, assignment: GroupAssignment) -> None:
        if assignment.e != self.e or assignment.g != self.g:
            raise ModelError("assignment does not match the model's E/G")
        self.assignment = assignment
        self.version += 1

    def router_params(self) -> RouterParams:
        return RouterParams(self.prototypes, self.expert_vectors, self.temperature, self.g1, self.k)

    def stored_expert_params(self) -> int:
        if not self.compressed:
            return self.e * self.d_in * self.d_out
        unpruned = int((~self.pruned).sum())
        return self.g * self.d_in * self.d_out + unpruned * self.r * (self.d_in + self.d_out)

    def uncompressed_expert_params(self) -> int:
        return self.e * self.d_in * self.d_out


@dataclass
class TokenCache:
    version: int
    x: np.ndarray
    experts: list
    expert_groups: list
    scores: np.ndarray
    gates: np.ndarray
    outputs: np.ndarray  # k x d_out
    bx: list  # B_i^T x per selected expert (compressed only)
    pred: np.ndarray
    # hierarchical: stage-1 probs, chosen groups, per-group (members, q)
    p: np.ndarray
    groups: list
    stage2: dict


def _route(model: MoEModel, x: np.ndarray):
    if model.hierarchical:
        z = model.prototypes @ x / model.temperature
        p = softmax(z)
        groups = [int(g) for g in top_indices(z, model.g1)]
        stage2 = {}
        cands = []
        for g in groups:
            members = model.assignment.groups[g]
            q = softmax(model.expert_vectors[members] @ x)
            stage2[g] = (members, q)
            for j, i in enumerate(members):
                cands.append((p[g] * q[j], i, g))
        cands.sort(key=lambda c: (-c[0], c[1]))
        chosen = cands[: model.k]
        return p, groups, stage2, [c[1] for c in chosen], [c[2] for c in chosen], np.array([c[0] for c in chosen])
    logits = model.expert_vectors @ x / model.temperature
    p = softmax(logits)
    chosen = [int(i) for i in top_indices(logits, model.k)]
    group_of = model.assignment.group_of
    return p, [], {}, chosen, [int(group_of[i]) for i in chosen], p[chosen]


def forward(model: MoEModel, x, token_id: int = 0):
    """Prediction, routing decision and the cache needed by ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d_in,):
        raise ModelError(f"input shape {x.shape} != ({model.d_in},)")
    p, groups, stage2, experts, egroups, scores = _route(model, x)
    gates = scores / scores.sum()
    outputs = np.empty((len(experts), model.d_out))
    bx = []
    if model.compressed:
        shared = {g: model.bases[g] @ x for g in set(egroups)}
        for j, (i, g) in enumerate(zip(experts, egroups)):
            if model.pruned[i]:
                bx.append(None)
                outputs[j] = shared[g]
            else:
                v = model.b[i].T @ x
                bx.append(v)
                outputs[j] = shared[g] + model.a[i] @ v
    else:
        for j, i in enumerate(experts):
            outputs[j] = model.weights[i] @ x
    pred = gates @ outputs
    if model.tanh_output:
        pred = np.tanh(pred)
    if model.hierarchical:
        gp = [float(p[g]) for g in groups]
        eprobs = [float(stage2[g][1][stage2[g][0].index(i)]) for i, g in zip(experts, egroups)]
    else:
        gp = []
        eprobs = [float(s) for s in scores]
    decision = RoutingDecision(token_id, groups, gp, list(experts), eprobs, [float(w) for w in gates])
    cache = TokenCache(model.version, x, experts, egroups, scores, gates, outputs, bx, pred, p, groups, stage2)
    return pred, decision, cache


def zero_grads(model: MoEModel) -> dict:
    return {n: np.zeros_like(v) for n, v in model.params().items()}


def backward(model: MoEModel, cache: TokenCache, loss_grad, grads: dict | None = None) -> dict:
    """Accumulate exact gradients of the loss for one token into ``grads``.

    Only the selected experts and the routing probabilities that feed their
    gates receive gradient; unselected branches get zero.
    """
    if cache.version != model.version:
        raise ModelError("cache was produced by a different model structure")
    if grads is None:
        grads = zero_grads(model)
    gy = np.asarray(loss_grad, dtype=np.float64)
    if gy.shape != (model.d_out,):
        raise ModelError(f"loss gradient shape {gy.shape} != ({model.d_out},)")
    if model.tanh_output:
        gy = gy * (1.0 - cache.pred**2)
    x = cache.x
    dgate = cache.outputs @ gy
    dscore = (dgate - cache.gates @ dgate) / cache.scores.sum()

    for j, (i, g) in enumerate(zip(cache.experts, cache.expert_groups)):
        do = cache.gates[j] * gy
        if model.compressed:
            grads["bases"][g] += np.outer(do, x)
            if not model.pruned[i]:
                grads["a"][i] += np.outer(do, cache.bx[j])
                grads["b"][i] += np.outer(x, model.a[i].T @ do)
        else:
            grads["weights"][i] += np.outer(do, x)

    if model.hierarchical:
        dp = np.zeros(model.g)
        dq = {g: np.zeros(len(cache.stage2[g][0])) for g in cache.groups}
        for j, (i, g) in enumerate(zip(cache.experts, cache.expert_groups)):
            members, q = cache.stage2[g]
            m = members.index(i)
            dp[g] += dscore[j] * q[m]
            dq[g][m] += dscore[j] * cache.p[g]
        for g in cache.groups:
            members, q = cache.stage2[g]
            dl = q * (dq[g] - q @ dq[g])
            grads["expert_vectors"][members] += np.outer(dl, x)
        p = cache.p
        dz = p * (dp - p @ dp)
        grads["prototypes"] += np.outer(dz, x) / model.temperature
    else:
        p = cache.p
        dp = np.zeros(model.e)
        dp[cache.experts] = dscore
        dl = p * (dp - p @ dp)
        grads["expert_vectors"] += np.outer(dl, x) / model.temperature
    return grads


def forward_batch(model: MoEModel, xs, token_offset: int = 0):
    preds, decisions, caches = [], [], []
    for n, x in enumerate(np.asarray(xs, dtype=np.float64)):
        y, d, c = forward(model, x, token_offset + n)
        preds.append(y)
        decisions.append(d)
        caches.append(c)
    return np.array(preds), decisions, caches


def mse(preds, targets) -> float:
    preds = np.asarray(preds)
    return float(np.mean((preds - np.asarray(targets)) ** 2))


def loss_and_grads(model: MoEModel, xs, ys):
    """Mean squared error over tokens and output dims, and its gradients."""
    preds, decisions, caches = forward_batch(model, xs)
    ys = np.asarray(ys, dtype=np.float64)
    gy = 2.0 * (preds - ys) / preds.size
    grads = zero_grads(model)
    for c, g in zip(caches, gy):
        backward(model, c, g, grads)
    return mse(preds, ys), grads, decisions
