"""Training loop with burn-in, periodic reclustering and the objective report."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..clustering import (
    DEFAULT_ALPHA,
    DEFAULT_DELTA,
    DEFAULT_TAU,
    SimilarityConfig,
    build_similarity,
    cluster_experts,
    mean_intra_similarity,
    recluster_interval,
    should_recluster,
)
from ..comm_sim import GROUP_LOCAL, bytes_per_token, place_experts, simulate_dispatch
from ..compression import DEFAULT_GAMMA, build_grouped_params, prune_residuals, regroup
from ..expert_bank import DEFAULT_BETA, update_centroid
from ..numerics import NumericsError
from ..routing import coefficient_of_variation, flat_route
from .model import EXPERT_PARAMS, ROUTER_PARAMS, MoEModel, forward_batch, loss_and_grads, mse
from .optim import AdamState, adamw_step, clip_gradients, temperature_at
from .task import SyntheticTask, make_task


class ConfigError(NumericsError):
    pass


@dataclass
class TrainConfig:
    # model
    e: int = 8
    g: int = 4
    d_in: int = 16
    d_out: int = 8
    k: int = 2
    g1: int = 1
    r: int = 4
    hierarchical: bool = True
    compress: bool = True
    tanh_output: bool = False
    # protocol
    t_recluster: int | None = None
    t0_burn_in: int = 200
    delta_skip: float = DEFAULT_DELTA
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    tau: float = DEFAULT_TAU
    gamma: float = DEFAULT_GAMMA
    prune_residuals: bool = False
    warm_start_mix: float = 0.5
    # memory simulation knobs carried for reports
    s_idle: int = 10
    lookahead_l: int = 2
    # objective weights (reported, not differentiated)
    a1: float = 0.0
    a2: float = 0.0
    a3: float = 0.0
    # optimizer
    lr: float = 0.01
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    temp_start: float = 1.0
    temp_end: float = 0.7
    steps: int = 600
    batch_size: int = 32
    eval_every: int = 50
    devices: int = 2
    seed: int = 0
    # synthetic task
    clusters: int = 4
    samples_per_cluster: int = 200
    task_noise: float = 0.01

    def validate(self) -> None:
        for name in ("t0_burn_in", "delta_skip", "alpha", "tau", "gamma", "a1", "a2", "a3",
                     "lr", "weight_decay", "clip_norm", "temp_end", "task_noise"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0 or (isinstance(v, float) and math.isnan(v)):
                raise ConfigError(f"{name} must be a nonnegative number, got {v!r}")
        for name in ("e", "g", "d_in", "d_out", "k", "g1", "r", "steps", "batch_size",
                     "eval_every", "devices", "clusters", "samples_per_cluster", "s_idle"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.lookahead_l < 0:
            raise ConfigError("lookahead_l must be >= 0")
        if self.alpha > 1:
            raise ConfigError("alpha must be in [0, 1]")
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must be in (0, 1]")
        if not 0 <= self.warm_start_mix <= 1:
            raise ConfigError("warm_start_mix must be in [0, 1]")
        if self.temp_start <= 0 or self.temp_end <= 0 or self.temp_end > self.temp_start:
            raise ConfigError("need 0 < temp_end <= temp_start")
        if self.t_recluster is not None and (not isinstance(self.t_recluster, int) or self.t_recluster < 1):
            raise ConfigError("t_recluster must be a positive integer or null")
        if self.e % self.g:
            raise ConfigError(f"E={self.e} is not divisible by G={self.g}")
        if self.g % self.devices:
            raise ConfigError(f"G={self.g} is not divisible by devices={self.devices}")
        if self.g1 > self.g:
            raise ConfigError("g1 exceeds G")
        if self.hierarchical and self.k > (self.e // self.g) * self.g1:
            raise ConfigError(f"k={self.k} exceeds K*g1")
        if self.k > self.e:
            raise ConfigError("k exceeds E")
        if self.compress and not self.hierarchical:
            raise ConfigError("compression requires the hierarchical router (groups come from clustering)")
        if self.r > min(self.d_in, self.d_out):
            raise ConfigError(f"rank {self.r} exceeds min(d_in, d_out)")

    @property
    def recluster_period(self) -> int:
        return self.t_recluster if self.t_recluster is not None else recluster_interval(self.e)

    def recluster_steps(self) -> list[int]:
        if not self.hierarchical:
            return []
        return list(range(self.t0_burn_in, self.steps, self.recluster_period))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("delta_skip"), str) and d["delta_skip"].lower() in ("inf", "infinity"):
            d["delta_skip"] = math.inf
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def task(self) -> SyntheticTask:
        return make_task(self.clusters, self.samples_per_cluster, self.d_in, self.d_out, self.task_noise, self.seed + 1)


@dataclass
class ObjectiveReport:
    l_task: float
    i_load: float
    r_red: float
    c_comm: float
    weighted_total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def objective_report(model: MoEModel, xs, ys, a1: float = 0.0, a2: float = 0.0, a3: float = 0.0, devices: int = 2) -> ObjectiveReport:
    """Task loss, load CoV, stored/uncompressed expert params and normalized dispatch bytes.

    Dispatch bytes are measured with group-local placement of the model's
    current grouping and normalized by the bytes of flat top-``k`` routing
    over the same expert vectors (1.0 when both are zero).
    """
    preds, decisions, _ = forward_batch(model, xs)
    l_task = mse(preds, ys)
    loads = np.zeros(model.e)
    for d in decisions:
        loads[d.experts] += 1
    i_load, _ = coefficient_of_variation(loads)
    r_red = model.stored_expert_params() / model.uncompressed_expert_params()
    placement = place_experts(model.assignment, devices, GROUP_LOCAL)
    bpt = bytes_per_token(model.d_in)
    ours = simulate_dispatch(decisions, placement, bpt).total_bytes
    if model.hierarchical:
        # flat reference keeps the temperature that stage 1 sees
        flat = [
            flat_route(x, model.expert_vectors, model.k, n, model.temperature)
            for n, x in enumerate(np.asarray(xs, dtype=np.float64))
        ]
        ref = simulate_dispatch(flat, placement, bpt).total_bytes
    else:
        ref = ours
    c_comm = 1.0 if ref == 0 and ours == 0 else (ours / ref if ref else math.inf)
    total = l_task + a1 * i_load + a2 * r_red + a3 * c_comm
    return ObjectiveReport(l_task, float(i_load), float(r_red), float(c_comm), total)


@dataclass
class TrainResult:
    model: MoEModel
    config: TrainConfig
    reports: list = field(default_factory=list)  # eval-step dicts
    events: list = field(default_factory=list)  # recluster attempts
    trace: list = field(default_factory=list)  # one dict per optimizer step

    @property
    def final(self) -> dict:
        return self.reports[-1]


def _group_centroid_means(model: MoEModel, assignment) -> np.ndarray:
    return np.stack([np.mean([model.centroids[i].mu for i in grp], axis=0) for grp in assignment.groups])


def _recluster(model: MoEModel, cfg: TrainConfig, step: int, sim_prev, adam: AdamState, task: SyntheticTask):
    sim_cfg = SimilarityConfig(cfg.alpha, cfg.tau)
    sim = build_similarity(model.bank(), sim_prev, step, sim_cfg)
    cand = cluster_experts(sim, cfg.g, seed=cfg.seed + step)
    first = not getattr(model, "_clustered", False)
    old_mean = mean_intra_similarity(sim.s_fused, model.assignment.groups)
    new_mean = cand.mean_intra_similarity
    event = {
        "step": step,
        "first": first,
        "old_mean_similarity": float(old_mean),
        "new_mean_similarity": float(new_mean),
        "adopted": False,
    }
    if not first and not should_recluster(old_mean, new_mean, cfg.delta_skip):
        event["groups"] = [list(g) for g in model.assignment.groups]
        return sim, event

    loss_before = mse(forward_batch(model, task.x_eval)[0], task.y_eval)
    new_protos = _group_centroid_means(model, cand)
    if first:
        protos = new_protos
    else:
        old_of = model.assignment.group_of
        carried = np.stack([np.mean(model.prototypes[old_of[list(grp)]], axis=0) for grp in cand.groups])
        protos = cfg.warm_start_mix * carried + (1.0 - cfg.warm_start_mix) * new_protos
    if cfg.compress:
        if model.compressed:
            gp = regroup(model.grouped_params(), cand, "svd", cfg.seed + step)
        else:
            gp = build_grouped_params(list(model.weights), cand, cfg.r, "svd", cfg.seed + step)
        if cfg.prune_residuals:
            prune_residuals(gp, cfg.gamma)
        model.set_grouped_params(gp)
    else:
        model.set_assignment(cand)
    model.prototypes[...] = protos
    # grouped routing starts once groups exist
    model.hierarchical = True
    model._clustered = True
    adam.reset(EXPERT_PARAMS)
    event["adopted"] = True
    event["groups"] = [list(g) for g in cand.groups]
    event["eval_loss_before"] = loss_before
    event["eval_loss_after"] = mse(forward_batch(model, task.x_eval)[0], task.y_eval)
    return sim, event


def train(config: TrainConfig, task: SyntheticTask | None = None) -> TrainResult:
    config.validate()
    if task is None:
        task = config.task()
    if task.d_in != config.d_in or task.d_out != config.d_out:
        raise ConfigError("task dimensions do not match the config")
    model = MoEModel(
        config.e, config.g, config.d_in, config.d_out, config.k, config.g1, config.r,
        config.hierarchical, config.tanh_output, config.seed, config.beta,
    )
    # burn-in routes flat: groups (and prototypes) only exist after the first clustering
    model.hierarchical = False
    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    res = TrainResult(model, config)
    schedule = set(config.recluster_steps())
    sim = None
    frozen_next = False
    n_train = task.x_train.shape[0]

    for step in range(config.steps):
        model.temperature = temperature_at(step, config.steps, config.temp_start, config.temp_end)
        recluster = None
        if step in schedule:
            sim, ev = _recluster(model, config, step, sim, adam, task)
            res.events.append(ev)
            recluster = "adopted" if ev["adopted"] else "skipped"
            frozen_next = ev["adopted"]

        idx = rng.integers(0, n_train, config.batch_size)
        xs, ys = task.x_train[idx], task.y_train[idx]
        loss, grads, decisions = loss_and_grads(model, xs, ys)
        grads, gnorm = clip_gradients(grads, config.clip_norm)
        frozen = frozen_next
        before = model.router_snapshot()
        adamw_step(model.params(), grads, adam, config.lr, config.weight_decay, skip=ROUTER_PARAMS if frozen else ())
        frozen_next = False
        after = model.router_snapshot()
        changed = any(not np.array_equal(before[n], after[n]) for n in ROUTER_PARAMS)

        for i in range(model.e):
            rows = [n for n, d in enumerate(decisions) if i in d.experts]
            if rows:
                model.centroids[i] = update_centroid(model.centroids[i], xs[rows])

        res.trace.append({
            "step": step,
            "loss": loss,
            "grad_norm": gnorm,
            "temperature": model.temperature,
            "recluster": recluster,
            "router_frozen": frozen,
            "router_changed": changed,
        })
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            rep = objective_report(model, task.x_eval, task.y_eval, config.a1, config.a2, config.a3, config.devices)
            entry = {"step": step + 1, **rep.to_dict(),
                     "stored_expert_params": model.stored_expert_params(),
                     "uncompressed_expert_params": model.uncompressed_expert_params()}
            res.reports.append(entry)
    return res
