"""Shared group bases with per-expert low-rank residuals."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import GroupAssignment
from .numerics import (
    FactorPair,
    NumericsError,
    OpCounter,
    as_matrix,
    cosine_similarity,
    frobenius_rel_error,
    svd_full,
    truncated_svd,
)
from .quantization import QuantBlock, decode_fp16, dequantize_group, encode_fp16, quantize_group

DEFAULT_RANK = 16
DEFAULT_GAMMA = 0.05

ARCHIVE_MAGIC = b"MOEC"
ARCHIVE_VERSION = 1
_ARCHIVE_HEADER = struct.Struct("<4sIIIIIIII")
FLAG_INT4 = 1


@dataclass
class GroupedParams:
    assignment: GroupAssignment
    bases: list[np.ndarray]
    # None marks a pruned residual: nothing stored, the expert is its base
    residuals: list[FactorPair | None]
    r: int
    pruned_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.bases) != self.assignment.g:
            raise NumericsError(f"{len(self.bases)} bases for {self.assignment.g} groups")
        if len(self.residuals) != self.assignment.e:
            raise NumericsError(f"{len(self.residuals)} residuals for {self.assignment.e} experts")
        if self.pruned_mask is None:
            self.pruned_mask = np.array([f is None for f in self.residuals], dtype=bool)
        shape = self.bases[0].shape
        for f in self.residuals:
            if f is not None and (f.rank != self.r or f.shape != shape):
                raise NumericsError(f"residual of rank {f.rank}, shape {f.shape} does not fit")

    @property
    def d_out(self) -> int:
        return self.bases[0].shape[0]

    @property
    def d_in(self) -> int:
        return self.bases[0].shape[1]

    @property
    def e(self) -> int:
        return self.assignment.e

    def expert_weight(self, i: int) -> np.ndarray:
        g = int(self.assignment.group_of[i])
        return reconstruct(self.bases[g], self.residuals[i])

    def expert_weights(self) -> list[np.ndarray]:
        group_of = self.assignment.group_of
        return [reconstruct(self.bases[group_of[i]], self.residuals[i]) for i in range(self.e)]

    def stored_elements(self) -> int:
        return sum(b.size for b in self.bases) + sum(f.size for f in self.residuals if f is not None)


def compute_base(member_weights) -> np.ndarray:
    """Entrywise mean of the group's expert matrices."""
    if len(member_weights) == 0:
        raise NumericsError("cannot compute the base of an empty group")
    mats = [as_matrix(w) for w in member_weights]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise NumericsError("group members have differing shapes")
    return np.mean(np.stack(mats), axis=0)


def factor_residual(w, base, r: int, mode: str = "svd", seed: int = 0) -> FactorPair:
    """Rank-``r`` factors for ``w - base`` (truncated SVD, or seeded Gaussian)."""
    w = as_matrix(w)
    base = as_matrix(base)
    if w.shape != base.shape:
        raise NumericsError(f"shape mismatch: {w.shape} vs {base.shape}")
    if mode == "svd":
        return truncated_svd(w - base, r)
    if mode == "random":
        if not 1 <= r <= min(w.shape):
            raise NumericsError(f"rank {r} outside [1, {min(w.shape)}]")
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(r)
        return FactorPair(
            rng.normal(0.0, scale, size=(w.shape[0], r)),
            rng.normal(0.0, scale, size=(w.shape[1], r)),
        )
    raise NumericsError(f"unknown factorization mode {mode!r}")


def reconstruct(base, f: FactorPair | None) -> np.ndarray:
    base = as_matrix(base)
    if f is None:
        return base.copy()
    if f.shape != base.shape:
        raise NumericsError(f"factor shape {f.shape} does not match base {base.shape}")
    return base + f.delta()


def build_grouped_params(
    weights, assignment: GroupAssignment, r: int = DEFAULT_RANK, mode: str = "svd", seed: int = 0
) -> GroupedParams:
    """Bases from group means, residual factors per expert.

    ``weights`` is a list of expert matrices (or anything with ``.experts``).
    """
    weights = list(getattr(weights, "experts", weights))
    if len(weights) != assignment.e:
        raise NumericsError(f"{len(weights)} experts but the assignment covers {assignment.e}")
    bases = [compute_base([weights[i] for i in grp]) for grp in assignment.groups]
    group_of = assignment.group_of
    residuals = [
        factor_residual(weights[i], bases[group_of[i]], r, mode, seed + i) for i in range(len(weights))
    ]
    return GroupedParams(assignment, bases, residuals, r)


def regroup(gp: GroupedParams, new_assignment: GroupAssignment, mode: str = "svd", seed: int = 0) -> GroupedParams:
    """Warm start after regrouping: refactor the current effective weights."""
    return build_grouped_params(gp.expert_weights(), new_assignment, gp.r, mode, seed)


def compressed_forward(
    gp: GroupedParams, g: int, x, expert_ids, counter: OpCounter | None = None
) -> dict[int, np.ndarray]:
    """Outputs of several experts of group ``g`` with one shared base product.

    Counts ``d_out * d_in`` multiplies for the base plus ``r * (d_in + d_out)``
    per unpruned expert.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gp.d_in,):
        raise NumericsError(f"input length {x.shape} != d_in {gp.d_in}")
    members = set(gp.assignment.groups[g])
    ids = list(expert_ids)
    for i in ids:
        if i not in members:
            raise NumericsError(f"expert {i} is not in group {g}")
    shared = gp.bases[g] @ x
    if counter is not None:
        counter.add(gp.d_out * gp.d_in)
    out = {}
    for i in ids:
        f = gp.residuals[i]
        if f is None:
            out[i] = shared.copy()
            continue
        out[i] = shared + f.apply(x)
        if counter is not None:
            counter.add(gp.r * (gp.d_in + gp.d_out))
    return out


def compression_ratio(k: int, d_in: int, d_out: int, r: int) -> float:
    """Original over stored parameters for one group of ``k`` experts."""
    for name, v in (("k", k), ("d_in", d_in), ("d_out", d_out), ("r", r)):
        if v < 1:
            raise NumericsError(f"{name} must be >= 1, got {v}")
    return (k * d_in * d_out) / (d_in * d_out + k * r * (d_in + d_out))


def group_storage(k: int, d_in: int, d_out: int, r: int) -> int:
    """Stored elements for one group: base plus ``k`` factor pairs."""
    return d_in * d_out + k * r * (d_in + d_out)


def effective_compression_ratio(e: int, g: int, d_in: int, d_out: int, r: int) -> float:
    """Whole-layer ratio including router parameters.

    Dense reference: ``E`` experts plus a flat router (``E`` vectors).
    Compressed: ``G`` bases, ``E`` factor pairs, ``G`` prototypes and ``E``
    expert vectors.
    """
    dense = e * d_in * d_out + e * d_in
    compressed = g * d_in * d_out + e * r * (d_in + d_out) + g * d_in + e * d_in
    return dense / compressed


def prune_residuals(gp: GroupedParams, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Drop residuals whose absolute cosine to their base is below ``gamma``.

    Mutates ``gp`` (pruned residuals become ``None``) and returns the mask.
    Experts in a group with an all-zero base are skipped.
    """
    if not 0.0 <= gamma <= 1.0:
        raise NumericsError(f"gamma must be in [0, 1], got {gamma}")
    group_of = gp.assignment.group_of
    for i, f in enumerate(gp.residuals):
        if f is None:
            continue
        base = gp.bases[group_of[i]]
        if not np.any(base):
            continue
        delta = f.delta()
        if not np.any(delta):
            cos = 0.0
        else:
            cos = abs(cosine_similarity(delta, base))
        if cos < gamma:
            gp.residuals[i] = None
            gp.pruned_mask[i] = True
    return gp.pruned_mask.copy()


def reconstruction_errors(weights, gp: GroupedParams) -> np.ndarray:
    """Per-expert ``||W_i - W~_i||_F / ||W_i||_F``."""
    weights = list(getattr(weights, "experts", weights))
    return np.array([frobenius_rel_error(w, gp.expert_weight(i)) for i, w in enumerate(weights)])


def rank_sweep(weights, assignment: GroupAssignment, ranks=(4, 8, 16, 32)) -> list[dict]:
    """Mean reconstruction error and group CR for each rank.

    Each residual is decomposed once; every rank truncates the same SVD.
    """
    weights = list(getattr(weights, "experts", weights))
    ranks = sorted(set(int(r) for r in ranks))
    d_out, d_in = weights[0].shape
    if not ranks or ranks[0] < 1 or ranks[-1] > min(d_in, d_out):
        raise NumericsError(f"ranks must lie in [1, {min(d_in, d_out)}], got {ranks}")
    bases = [compute_base([weights[i] for i in grp]) for grp in assignment.groups]
    group_of = assignment.group_of
    errs = {r: [] for r in ranks}
    for i, w in enumerate(weights):
        base = bases[group_of[i]]
        u, s, vt = svd_full(w - base)
        for r in ranks:
            approx = base + (u[:, :r] * s[:r]) @ vt[:r]
            errs[r].append(frobenius_rel_error(w, approx))
    return [
        {
            "r": r,
            "mean_rel_error": float(np.mean(errs[r])),
            "max_rel_error": float(np.max(errs[r])),
            "cr": compression_ratio(assignment.k, d_in, d_out, r),
        }
        for r in ranks
    ]


def quantize_residuals(gp: GroupedParams) -> list[QuantBlock]:
    """One INT4 block per group over all unpruned member factors (a then b, by expert id)."""
    blocks = []
    for grp in gp.assignment.groups:
        parts = [
            np.concatenate([gp.residuals[i].a.ravel(), gp.residuals[i].b.ravel()])
            for i in grp
            if gp.residuals[i] is not None
        ]
        if parts:
            blocks.append(quantize_group(np.concatenate(parts)))
        else:
            blocks.append(QuantBlock(b"", 1.0, 0, 0))
    return blocks


def _dequantized_residuals(gp_shape, assignment, pruned, r, blocks) -> list[FactorPair | None]:
    d_out, d_in = gp_shape
    residuals: list[FactorPair | None] = [None] * assignment.e
    n_a, n_b = d_out * r, d_in * r
    for grp, block in zip(assignment.groups, blocks):
        vals = dequantize_group(block) if block.count else np.zeros(0)
        off = 0
        for i in grp:
            if pruned[i]:
                continue
            a = vals[off : off + n_a].reshape(d_out, r)
            off += n_a
            b = vals[off : off + n_b].reshape(d_in, r)
            off += n_b
            residuals[i] = FactorPair(a, b)
        if off != vals.size:
            raise NumericsError("INT4 block size does not match the group's factors")
    return residuals


def dequantize_residuals(gp: GroupedParams, blocks: list[QuantBlock]) -> GroupedParams:
    residuals = _dequantized_residuals(gp.bases[0].shape, gp.assignment, gp.pruned_mask, gp.r, blocks)
    return GroupedParams(gp.assignment, [b.copy() for b in gp.bases], residuals, gp.r, gp.pruned_mask.copy())


@dataclass
class CompressedArchive:
    params: GroupedParams
    blocks: list[QuantBlock] | None
    fp16_saturated: int = 0


def save_compressed(gp: GroupedParams, path, int4: bool = False) -> CompressedArchive:
    """Write the ``MOEC`` archive: FP16 bases, FP64 or INT4 residuals, pruned bitset.

    Returns what a reader will see when loading the file back.
    """
    a = gp.assignment
    header = _ARCHIVE_HEADER.pack(
        ARCHIVE_MAGIC, ARCHIVE_VERSION, a.e, a.g, a.k, gp.d_in, gp.d_out, gp.r, FLAG_INT4 if int4 else 0
    )
    parts = [header]
    parts.append(np.array([i for grp in a.groups for i in grp], dtype="<u4").tobytes())
    parts.append(np.array(a.medoids, dtype="<u4").tobytes())
    saturated = 0
    for base in gp.bases:
        bits, sat = encode_fp16(base)
        saturated += sat
        parts.append(bits.astype("<u2").tobytes())
    parts.append(np.packbits(gp.pruned_mask.astype(np.uint8), bitorder="little").tobytes())
    blocks = None
    if int4:
        blocks = quantize_residuals(gp)
        parts.extend(b.to_bytes() for b in blocks)
    else:
        for f in gp.residuals:
            if f is not None:
                parts.append(np.ascontiguousarray(f.a, dtype="<f8").tobytes())
                parts.append(np.ascontiguousarray(f.b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))
    archive = load_compressed(path)
    archive.fp16_saturated = saturated
    return archive


def load_compressed(path) -> CompressedArchive:
    data = Path(path).read_bytes()
    if len(data) < _ARCHIVE_HEADER.size:
        raise NumericsError(f"{path}: truncated archive")
    magic, version, e, g, k, d_in, d_out, r, flags = _ARCHIVE_HEADER.unpack_from(data, 0)
    if magic != ARCHIVE_MAGIC:
        raise NumericsError(f"{path}: bad magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise NumericsError(f"{path}: unsupported archive version {version}")
    if g * k != e:
        raise NumericsError(f"{path}: G*K != E in header")
    off = _ARCHIVE_HEADER.size
    ids = np.frombuffer(data, "<u4", e, off).astype(np.int64)
    off += 4 * e
    medoids = np.frombuffer(data, "<u4", g, off).astype(np.int64)
    off += 4 * g
    groups = [ids[gi * k : (gi + 1) * k].tolist() for gi in range(g)]
    assignment = GroupAssignment(groups, medoids.tolist(), 1.0)
    bases = []
    for _ in range(g):
        bits = np.frombuffer(data, "<u2", d_out * d_in, off)
        off += 2 * d_out * d_in
        bases.append(decode_fp16(bits).reshape(d_out, d_in))
    nmask = (e + 7) // 8
    pruned = np.unpackbits(np.frombuffer(data, np.uint8, nmask, off), bitorder="little")[:e].astype(bool)
    off += nmask
    blocks = None
    if flags & FLAG_INT4:
        blocks = []
        for _ in range(g):
            block, off = QuantBlock.from_bytes(data, off)
            blocks.append(block)
        residuals = _dequantized_residuals((d_out, d_in), assignment, pruned, r, blocks)
    else:
        residuals = []
        for i in range(e):
            if pruned[i]:
                residuals.append(None)
                continue
            a_ = np.frombuffer(data, "<f8", d_out * r, off).reshape(d_out, r).astype(np.float64)
            off += 8 * d_out * r
            b_ = np.frombuffer(data, "<f8", d_in * r, off).reshape(d_in, r).astype(np.float64)
            off += 8 * d_in * r
            residuals.append(FactorPair(a_, b_))
    if off != len(data):
        raise NumericsError(f"{path}: {len(data) - off} trailing bytes")
    return CompressedArchive(GroupedParams(assignment, bases, residuals, r, pruned), blocks)

