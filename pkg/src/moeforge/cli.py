"""``moeforge`` command line: reproducible experiments emitting JSON/CSV reports.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime/numeric error.
A ``--config`` JSON object overrides flags of the same name; the
``MOEFORGE_SEED`` environment variable overrides both.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .clustering import (
    GroupAssignment,
    SimilarityConfig,
    build_similarity,
    cluster_experts,
)
from .comm_sim import POLICIES, CommError, bytes_per_token, compare_policies, place_experts
from .compression import (
    build_grouped_params,
    compression_ratio,
    effective_compression_ratio,
    load_compressed,
    prune_residuals,
    rank_sweep,
    reconstruction_errors,
    save_compressed,
)
from .expert_bank import init_planted_bank, load_bank, relative_noise_sigma, save_bank
from .memory_manager import GroupStore, MemoryConfig, group_payload, load_trace, run_trace
from .numerics import NumericsError
from .quantization import dequantize_group
from .routing import (
    RoutingError,
    compare_load_balance,
    dump_decisions,
    load_decisions,
    make_zipf_scenario,
    route_batch_flat,
    route_batch_hier,
    routing_cost,
    RoutingDecision,
)

log = logging.getLogger("moeforge")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
SEED_ENV = "MOEFORGE_SEED"


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _read_json(path) -> object:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg})") from exc


def load_schema(name: str) -> dict:
    """JSON schema shipped for report ``name`` (e.g. ``"comm_sim"``)."""
    text = resources.files("moeforge").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _emit_json(obj, out) -> None:
    text = _dumps(obj)
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _apply_config(args: argparse.Namespace, known: set[str]) -> None:
    """Overlay ``--config`` values onto parsed flags, then the seed env var."""
    if getattr(args, "config", None):
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        for k, v in cfg.items():
            setattr(args, k, v)
    env = os.environ.get(SEED_ENV)
    if env is not None and hasattr(args, "seed"):
        try:
            args.seed = int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _load_bank(path):
    if not Path(path).is_file():
        raise UsageError(f"bank file not found: {path}")
    return load_bank(path)


def _assignment(args, bank):
    """From ``--assignment`` JSON or by clustering the bank into ``--groups``."""
    if getattr(args, "assignment", None):
        d = _read_json(args.assignment)
        try:
            a = GroupAssignment.from_dict(d)
        except (KeyError, TypeError, NumericsError) as exc:
            raise UsageError(f"{args.assignment}: not a valid group assignment ({exc})") from exc
        if a.e != bank.e:
            raise UsageError(f"assignment covers {a.e} experts, bank has {bank.e}")
        return a
    if not args.groups:
        raise UsageError("need --assignment or --groups")
    _check_groups(bank.e, args.groups)
    sim = build_similarity(bank, None, 0, SimilarityConfig(args.alpha, args.tau))
    return cluster_experts(sim, args.groups, args.seed)


def _check_groups(e: int, g: int) -> None:
    if g < 1 or e % g:
        raise UsageError(f"E={e} is not divisible by G={g}")


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must be in [0, 1], got {alpha}")


def _ranks(text) -> list[int]:
    if isinstance(text, list):
        vals = text
    else:
        try:
            vals = [int(t) for t in str(text).split(",") if t.strip()]
        except ValueError as exc:
            raise UsageError(f"ranks must be comma-separated integers, got {text!r}") from exc
    if not vals:
        raise UsageError("no ranks given")
    return [int(v) for v in vals]


def _fmt(v: float) -> str:
    # repr is locale-independent and round-trips
    return repr(float(v))


# ---------------------------------------------------------------- commands


def cmd_make_bank(args) -> int:
    _apply_config(args, {"experts", "groups", "d_in", "d_out", "noise", "residual_rank", "seed", "out", "labels"})
    _check_groups(args.experts, args.groups)
    bank, labels = init_planted_bank(
        args.groups, args.experts // args.groups, args.d_in, args.d_out,
        relative_noise_sigma(args.noise, args.d_in), args.seed, args.residual_rank,
    )
    save_bank(bank, args.out)
    if args.labels:
        _emit_json({"seed": args.seed, "labels": [int(v) for v in labels]}, args.labels)
    return EXIT_OK


def cmd_cluster(args) -> int:
    _apply_config(args, {"bank", "groups", "alpha", "tau", "seed", "labels", "out"})
    _check_alpha(args.alpha)
    if args.tau < 0:
        raise UsageError("tau must be >= 0")
    t0 = time.perf_counter()
    bank = _load_bank(args.bank)
    _check_groups(bank.e, args.groups)
    sim = build_similarity(bank, None, 0, SimilarityConfig(args.alpha, args.tau))
    a = cluster_experts(sim, args.groups, args.seed)
    off = sim.s_fused[~np.eye(bank.e, dtype=bool)]
    report = {
        "command": "cluster",
        "config": {"bank": str(args.bank), "groups": args.groups, "alpha": args.alpha, "tau": args.tau},
        "seed": args.seed,
        "assignment": a.to_dict(),
        "similarity": {
            "mean_offdiag": float(off.mean()) if off.size else 1.0,
            "min_offdiag": float(off.min()) if off.size else 1.0,
            "max_offdiag": float(off.max()) if off.size else 1.0,
            "pairs_kept": int(np.triu(sim.kept, 1).sum()),
        },
        "singletons": a.k == 1,
        "ari": None,
        "wall_clock_s": time.perf_counter() - t0,
    }
    if args.labels:
        from sklearn.metrics import adjusted_rand_score

        labels = _read_json(args.labels)
        labels = labels.get("labels") if isinstance(labels, dict) else labels
        if not isinstance(labels, list) or len(labels) != bank.e:
            raise UsageError(f"{args.labels}: expected {bank.e} labels")
        report["ari"] = float(adjusted_rand_score(labels, a.group_of))
    _emit_json(report, args.out)
    return EXIT_OK


def cmd_compress(args) -> int:
    _apply_config(args, {"bank", "assignment", "groups", "alpha", "tau", "rank", "int4", "prune_gamma", "seed", "out", "report"})
    _check_alpha(args.alpha)
    t0 = time.perf_counter()
    bank = _load_bank(args.bank)
    a = _assignment(args, bank)
    if not 1 <= args.rank <= min(bank.d_in, bank.d_out):
        raise UsageError(f"rank {args.rank} outside [1, {min(bank.d_in, bank.d_out)}]")
    gp = build_grouped_params(bank.experts, a, args.rank, "svd", args.seed)
    pruned = prune_residuals(gp, args.prune_gamma) if args.prune_gamma is not None else gp.pruned_mask
    archive = save_compressed(gp, args.out, int4=args.int4)
    errs = reconstruction_errors(bank.experts, archive.params)
    report = {
        "command": "compress",
        "config": {"bank": str(args.bank), "rank": args.rank, "int4": bool(args.int4),
                   "prune_gamma": args.prune_gamma, "groups": a.g},
        "seed": args.seed,
        "assignment": a.to_dict(),
        "archive": str(args.out),
        "archive_bytes": Path(args.out).stat().st_size,
        "stored_elements": gp.stored_elements(),
        "original_elements": bank.e * bank.d_in * bank.d_out,
        "group_cr": compression_ratio(a.k, bank.d_in, bank.d_out, args.rank),
        "effective_cr": effective_compression_ratio(bank.e, a.g, bank.d_in, bank.d_out, args.rank),
        "pruned": [int(i) for i in np.flatnonzero(pruned)],
        "fp16_saturated": int(archive.fp16_saturated),
        "mean_rel_error": float(errs.mean()),
        "max_rel_error": float(errs.max()),
        "wall_clock_s": time.perf_counter() - t0,
    }
    _emit_json(report, args.report)
    return EXIT_OK


def cmd_sweep_rank(args) -> int:
    _apply_config(args, {"bank", "assignment", "groups", "alpha", "tau", "ranks", "seed", "out"})
    _check_alpha(args.alpha)
    bank = _load_bank(args.bank)
    ranks = _ranks(args.ranks)
    top = min(bank.d_in, bank.d_out)
    for r in ranks:
        if not 1 <= r <= top:
            raise UsageError(f"invalid rank {r}: must be in [1, {top}]")
    a = _assignment(args, bank)
    rows = rank_sweep(bank.experts, a, ranks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "mean_rel_error", "max_rel_error", "cr"])
    for row in rows:
        w.writerow([row["r"], _fmt(row["mean_rel_error"]), _fmt(row["max_rel_error"]), _fmt(row["cr"])])
    if args.out in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


def cmd_route_sim(args) -> int:
    _apply_config(args, {"tokens", "experts", "groups", "k", "zipf_s", "noise", "jitter", "seed", "out", "flat_decisions", "hier_decisions"})
    _check_groups(args.experts, args.groups)
    if args.tokens < 1 or args.k < 1:
        raise UsageError("tokens and k must be >= 1")
    if args.k > args.experts // args.groups:
        raise UsageError(f"k={args.k} exceeds group size {args.experts // args.groups}")
    t0 = time.perf_counter()
    sc = make_zipf_scenario(args.tokens, args.experts, args.groups, s=args.zipf_s, noise=args.noise,
                            jitter=args.jitter, k=args.k, seed=args.seed)
    res = compare_load_balance(sc, args.k)
    hier_cost, flat_cost, reduction = routing_cost(args.experts, args.groups, args.experts // args.groups, sc.tokens.shape[1])
    if args.flat_decisions:
        ids = route_batch_flat(sc.tokens, sc.flat_vectors, args.k)
        dump_decisions([RoutingDecision(n, [], [], [int(i) for i in row], [], []) for n, row in enumerate(ids)], args.flat_decisions)
    if args.hier_decisions:
        ids = route_batch_hier(sc.tokens, sc.hier, sc.assignment)
        gof = sc.assignment.group_of
        dump_decisions([RoutingDecision(n, [int(gof[row[0]])], [], [int(i) for i in row], [], []) for n, row in enumerate(ids)], args.hier_decisions)
    ratio = res["ratio"]
    report = {
        "command": "route-sim",
        "config": {"tokens": args.tokens, "experts": args.experts, "groups": args.groups, "k": args.k,
                   "zipf_s": args.zipf_s, "noise": args.noise, "jitter": args.jitter},
        "seed": args.seed,
        "assignment": sc.assignment.to_dict(),
        "load": {
            "cov_flat": res["cov_flat"],
            "cov_hier": res["cov_hier"],
            "ratio": None if math.isinf(ratio) else ratio,
            "flat_loads": res["flat_loads"],
            "hier_loads": res["hier_loads"],
        },
        "routing_cost": {"hier_mults_per_token": hier_cost, "flat_mults_per_token": flat_cost, "reduction": reduction},
        "wall_clock_s": time.perf_counter() - t0,
    }
    _emit_json(report, args.out)
    return EXIT_OK


def _load_decisions(path):
    if not Path(path).is_file():
        raise UsageError(f"decisions file not found: {path}")
    try:
        return load_decisions(path)
    except RoutingError as exc:
        raise UsageError(str(exc)) from exc


def cmd_comm_sim(args) -> int:
    _apply_config(args, {"flat", "hier", "devices", "placement", "assignment", "experts", "groups", "d_in", "bytes_per_token", "seed", "out"})
    if args.placement not in POLICIES:
        raise UsageError(f"placement must be one of {POLICIES}")
    if args.devices < 1:
        raise UsageError("devices must be >= 1")
    t0 = time.perf_counter()
    flat = _load_decisions(args.flat)
    hier = _load_decisions(args.hier)
    if args.assignment:
        d = _read_json(args.assignment)
        d = d.get("assignment", d) if isinstance(d, dict) else d
        try:
            a = GroupAssignment.from_dict(d)
        except (KeyError, TypeError, NumericsError) as exc:
            raise UsageError(f"{args.assignment}: not a valid group assignment ({exc})") from exc
    else:
        if not args.experts or not args.groups:
            raise UsageError("need --assignment or both --experts and --groups")
        _check_groups(args.experts, args.groups)
        a = GroupAssignment.contiguous(args.experts, args.groups)
    if args.placement == "group-local" and a.g % args.devices:
        raise UsageError(f"G={a.g} is not divisible by devices={args.devices}")
    placement = place_experts(a, args.devices, args.placement)
    bpt = args.bytes_per_token if args.bytes_per_token is not None else bytes_per_token(args.d_in)
    res = compare_policies(flat, hier, placement, bpt)
    report = {
        "command": "comm-sim",
        "config": {"flat": str(args.flat), "hier": str(args.hier), "devices": args.devices,
                   "placement": args.placement, "bytes_per_token": bpt},
        "seed": args.seed,
        **res,
        "wall_clock_s": time.perf_counter() - t0,
    }
    _emit_json(report, args.out)
    return EXIT_OK


def cmd_mem_sim(args) -> int:
    _apply_config(args, {"trace", "archive", "group_bytes", "s_idle", "ema_rate", "lookahead", "min_score", "store_dir", "seed", "out"})
    t0 = time.perf_counter()
    if not Path(args.trace).is_file():
        raise UsageError(f"trace file not found: {args.trace}")
    try:
        trace = load_trace(args.trace)
    except NumericsError as exc:
        raise UsageError(str(exc)) from exc
    payloads = None
    if args.archive:
        if not Path(args.archive).is_file():
            raise UsageError(f"archive not found: {args.archive}")
        gp = load_compressed(args.archive).params
        payloads = [group_payload(gp, g) for g in range(gp.assignment.g)]
        sizes = [len(p) for p in payloads]
    elif args.group_bytes:
        sizes = [int(v) for v in str(args.group_bytes).split(",")] if not isinstance(args.group_bytes, list) else [int(v) for v in args.group_bytes]
    else:
        raise UsageError("need --archive or --group-bytes")
    try:
        cfg = MemoryConfig(args.s_idle, args.ema_rate, args.lookahead, args.min_score)
    except NumericsError as exc:
        raise UsageError(str(exc)) from exc
    store = None
    if args.store_dir:
        if payloads is None:
            raise UsageError("--store-dir needs --archive (real payloads)")
        store = GroupStore(args.store_dir, payloads)
    ledger = run_trace(sizes, trace, cfg, store)
    report = {
        "command": "mem-sim",
        "config": {"trace": str(args.trace), "s_idle": cfg.s_idle, "ema_rate": cfg.ema_rate,
                   "lookahead_l": cfg.lookahead_l, "prefetch_min_score": cfg.prefetch_min_score},
        "seed": args.seed,
        "all_resident_bytes": int(sum(sizes)),
        "ledger": ledger.to_dict(),
        "wall_clock_s": time.perf_counter() - t0,
    }
    _emit_json(report, args.out)
    return EXIT_OK


def cmd_quantize(args) -> int:
    _apply_config(args, {"archive", "out", "seed", "report"})
    t0 = time.perf_counter()
    if not Path(args.archive).is_file():
        raise UsageError(f"archive not found: {args.archive}")
    src = load_compressed(args.archive)
    gp = src.params
    out = save_compressed(gp, args.out, int4=True)
    max_err = 0.0
    bound_ok = True
    for g, (blk, grp) in enumerate(zip(out.blocks, gp.assignment.groups)):
        vals = [np.concatenate([gp.residuals[i].a.ravel(), gp.residuals[i].b.ravel()])
                for i in grp if gp.residuals[i] is not None]
        if not vals:
            continue
        v = np.concatenate(vals)
        err = float(np.max(np.abs(v - dequantize_group(blk))))
        max_err = max(max_err, err)
        bound_ok &= err <= blk.scale / 2 * (1 + 1e-12)
    report = {
        "command": "quantize",
        "config": {"archive": str(args.archive), "out": str(args.out)},
        "seed": args.seed,
        "source_bytes": Path(args.archive).stat().st_size,
        "int4_bytes": Path(args.out).stat().st_size,
        "groups": gp.assignment.g,
        "scales": [float(b.scale) for b in out.blocks],
        "max_abs_error": max_err,
        "within_half_scale": bool(bound_ok),
        "fp16_saturated": int(out.fp16_saturated),
        "wall_clock_s": time.perf_counter() - t0,
    }
    _emit_json(report, args.report)
    return EXIT_OK


def _train_config(args):
    from .trainer import ConfigError, TrainConfig

    d = {}
    for name in ("steps", "e", "g", "d_in", "d_out", "r", "lr"):
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    if args.flat:
        d["hierarchical"] = False
        d["compress"] = False
    if args.config:
        cfg = _read_json(args.config)
        if not isinstance(cfg, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        d.update(cfg)
    if args.seed is not None:
        d.setdefault("seed", args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            d["seed"] = int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    try:
        return TrainConfig.from_dict(d)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"bad train config: {exc}") from exc


def _memory_summary(model, decisions, cfg) -> dict:
    """Replay eval-batch group activations through the offload simulator."""
    if not model.compressed:
        return {"simulated": False}
    gp = model.grouped_params()
    sizes = [len(group_payload(gp, g)) for g in range(gp.assignment.g)]
    gof = gp.assignment.group_of
    trace = [
        sorted({int(gof[i]) for d in decisions[s : s + cfg.batch_size] for i in d.experts})
        for s in range(0, len(decisions), cfg.batch_size)
    ]
    ledger = run_trace(sizes, trace, MemoryConfig(cfg.s_idle, lookahead_l=cfg.lookahead_l))
    return {"simulated": True, "all_resident_bytes": int(sum(sizes)), **ledger.to_dict()}


def cmd_train(args) -> int:
    from .routing import flat_route, load_stats
    from .trainer import forward_batch, train

    cfg = _train_config(args)
    t0 = time.perf_counter()
    task = cfg.task()
    res = train(cfg, task)
    model = res.model
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    _, decisions, _ = forward_batch(model, task.x_eval)
    stats = load_stats(decisions, model.e)
    flat = [flat_route(x, model.expert_vectors, model.k, n, model.temperature) for n, x in enumerate(task.x_eval)]
    placement = place_experts(model.assignment, cfg.devices)
    comm = compare_policies(flat, decisions, placement, bytes_per_token(cfg.d_in))

    save_bank(model.bank(), out / "model.moeb")
    compression = {
        "stored_expert_params": model.stored_expert_params(),
        "uncompressed_expert_params": model.uncompressed_expert_params(),
        "ratio": model.uncompressed_expert_params() / model.stored_expert_params(),
        "archive": None,
    }
    if model.compressed:
        archive = save_compressed(model.grouped_params(), out / "model.moec", int4=False)
        compression["archive"] = "model.moec"
        compression["fp16_saturated"] = int(archive.fp16_saturated)
        compression["group_cr"] = compression_ratio(model.e // model.g, cfg.d_in, cfg.d_out, model.r)

    with open(out / "reports.jsonl", "w", encoding="utf-8") as fh:
        for rep in res.reports:
            fh.write(json.dumps({"config": cfg.to_dict(), "seed": cfg.seed, **rep}, sort_keys=True) + "\n")
    report = {
        "command": "train",
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "objective_series": res.reports,
        "final": res.final,
        "recluster_events": res.events,
        "assignment": model.assignment.to_dict(),
        "load_stats": stats.to_dict(),
        "comm": comm,
        "compression": compression,
        "memory": _memory_summary(model, decisions, cfg),
        "wall_clock_s": time.perf_counter() - t0,
    }
    _emit_json(report, out / "report.json")
    return EXIT_OK


def cmd_report(args) -> int:
    """Flatten a train run's objective series into CSV (plus a JSON summary)."""
    _apply_config(args, {"run_dir", "out", "csv", "seed"})
    path = Path(args.run_dir) / "report.json"
    if not path.is_file():
        raise UsageError(f"no report.json in {args.run_dir}")
    rep = _read_json(path)
    try:
        series = rep["objective_series"]
        cfg = rep["config"]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"{path}: not a train report") from exc
    cols = ["step", "l_task", "i_load", "r_red", "c_comm", "weighted_total"]
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in series:
            w.writerow([row["step"]] + [_fmt(row[c]) for c in cols[1:]])
        Path(args.csv).write_text(buf.getvalue(), encoding="utf-8")
    adopted = [e for e in rep.get("recluster_events", []) if e.get("adopted")]
    summary = {
        "command": "report",
        "config": cfg,
        "seed": rep.get("seed"),
        "steps": cfg.get("steps"),
        "final": rep.get("final"),
        "best_l_task": min((r["l_task"] for r in series), default=None),
        "reclusters_attempted": len(rep.get("recluster_events", [])),
        "reclusters_adopted": len(adopted),
        "compression": rep.get("compression"),
        "wall_clock_s": 0.0,
    }
    _emit_json(summary, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moeforge", description=__doc__.splitlines()[0],
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--version", action="version", version=f"moeforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON object overriding flags of the same name")
        sp.add_argument("--seed", type=int, default=0, help=f"RNG seed (env {SEED_ENV} wins)")
        return sp

    sp = add("make-bank", cmd_make_bank, "write a planted-cluster expert bank (MOEB)")
    sp.add_argument("--experts", type=int, default=32)
    sp.add_argument("--groups", type=int, default=8)
    sp.add_argument("--d-in", dest="d_in", type=int, default=16)
    sp.add_argument("--d-out", dest="d_out", type=int, default=16)
    sp.add_argument("--noise", type=float, default=0.05, help="relative noise around each group anchor")
    sp.add_argument("--residual-rank", dest="residual_rank", type=int, default=None)
    sp.add_argument("--labels", help="also write planted labels JSON here")
    sp.add_argument("--out", required=True)

    sp = add("cluster", cmd_cluster, "cluster a bank into uniform groups")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--groups", type=int, required=True)
    sp.add_argument("--alpha", type=float, default=0.7, help="weight of parameter similarity")
    sp.add_argument("--tau", type=float, default=0.1, help="prune pairs below this similarity")
    sp.add_argument("--labels", help="planted labels JSON; reports ARI")
    sp.add_argument("--out", help="report path (stdout if omitted)")

    def grouping_flags(sp):
        sp.add_argument("--bank", required=True)
        sp.add_argument("--assignment", help="GroupAssignment JSON; otherwise cluster with --groups")
        sp.add_argument("--groups", type=int)
        sp.add_argument("--alpha", type=float, default=0.7)
        sp.add_argument("--tau", type=float, default=0.1)

    sp = add("compress", cmd_compress, "shared bases + low-rank residuals into a MOEC archive")
    grouping_flags(sp)
    sp.add_argument("--rank", type=int, default=16)
    sp.add_argument("--int4", action="store_true", help="store residuals as INT4 blocks")
    sp.add_argument("--prune-gamma", dest="prune_gamma", type=float, default=None,
                    help="drop residuals with |cos(residual, base)| below this")
    sp.add_argument("--out", required=True, help="archive path")
    sp.add_argument("--report", help="report path (stdout if omitted)")

    sp = add("sweep-rank", cmd_sweep_rank, "reconstruction error and compression ratio versus rank (CSV)")
    grouping_flags(sp)
    sp.add_argument("--ranks", default="4,8,16,32")
    sp.add_argument("--out", help="CSV path (stdout if omitted)")

    sp = add("route-sim", cmd_route_sim, "flat vs hierarchical load balance on a Zipf token stream")
    sp.add_argument("--tokens", type=int, default=100_000)
    sp.add_argument("--experts", type=int, default=32)
    sp.add_argument("--groups", type=int, default=8)
    sp.add_argument("--k", type=int, default=2)
    sp.add_argument("--zipf-s", dest="zipf_s", type=float, default=1.2)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--jitter", type=float, default=0.3)
    sp.add_argument("--flat-decisions", dest="flat_decisions", help="write flat decisions JSONL here")
    sp.add_argument("--hier-decisions", dest="hier_decisions", help="write hierarchical decisions JSONL here")
    sp.add_argument("--out")

    sp = add("comm-sim", cmd_comm_sim, "all-to-all bytes for flat and hierarchical decision files")
    sp.add_argument("--flat", required=True, help="flat decisions JSONL")
    sp.add_argument("--hier", required=True, help="hierarchical decisions JSONL")
    sp.add_argument("--devices", type=int, default=4)
    sp.add_argument("--placement", default="group-local", choices=POLICIES)
    sp.add_argument("--assignment", help="GroupAssignment JSON (or a report embedding one)")
    sp.add_argument("--experts", type=int)
    sp.add_argument("--groups", type=int)
    sp.add_argument("--d-in", dest="d_in", type=int, default=64)
    sp.add_argument("--bytes-per-token", dest="bytes_per_token", type=int, default=None)
    sp.add_argument("--out")

    sp = add("mem-sim", cmd_mem_sim, "offload/prefetch simulation over a group activation trace")
    sp.add_argument("--trace", required=True, help='JSONL, one {"groups": [...]} per step')
    sp.add_argument("--archive", help="MOEC archive giving per-group payload sizes")
    sp.add_argument("--group-bytes", dest="group_bytes", help="comma-separated bytes per group")
    sp.add_argument("--s-idle", dest="s_idle", type=int, default=10)
    sp.add_argument("--ema-rate", dest="ema_rate", type=float, default=0.1)
    sp.add_argument("--lookahead", type=int, default=2)
    sp.add_argument("--min-score", dest="min_score", type=float, default=0.05)
    sp.add_argument("--store-dir", dest="store_dir", help="back offloaded groups with files here")
    sp.add_argument("--out")

    sp = add("quantize", cmd_quantize, "rewrite a MOEC archive with INT4 residuals")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = add("train", cmd_train, "train on a synthetic clustered regression task")
    sp.set_defaults(seed=None)
    sp.add_argument("--out-dir", dest="out_dir", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--e", type=int)
    sp.add_argument("--g", type=int)
    sp.add_argument("--d-in", dest="d_in", type=int)
    sp.add_argument("--d-out", dest="d_out", type=int)
    sp.add_argument("--r", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--flat", action="store_true", help="uncompressed flat top-k baseline")

    sp = add("report", cmd_report, "summarize a train run directory")
    sp.add_argument("--run-dir", dest="run_dir", required=True)
    sp.add_argument("--csv", help="write the objective series as CSV")
    sp.add_argument("--out")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except UsageError as exc:
        print(f"moeforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommError as exc:
        print(f"moeforge: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NumericsError, FloatingPointError, OverflowError) as exc:
        print(f"moeforge: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"moeforge: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
