"""Full-precision experts plus their activation centroids.

The bank is the uncompressed ground truth: clustering reads its weights and
centroids, compression factors its weights against group bases.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import NumericsError, as_matrix

DEFAULT_BETA = 0.05

BANK_MAGIC = b"MOEB"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sIIII")


@dataclass
class Centroid:
    mu: np.ndarray
    beta: float = DEFAULT_BETA
    tokens_seen: int = 0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if not 0.0 < self.beta <= 1.0:
            raise NumericsError(f"EMA rate beta must be in (0, 1], got {self.beta}")
        if self.tokens_seen < 0:
            raise NumericsError("tokens_seen must be nonnegative")

    @classmethod
    def zeros(cls, d_in: int, beta: float = DEFAULT_BETA) -> Centroid:
        return cls(np.zeros(d_in), beta, 0)


def update_centroid(c: Centroid, assigned_tokens) -> Centroid:
    """EMA step ``mu <- (1 - beta) mu + beta * mean(tokens)``.

    An empty token list leaves the centroid unchanged.
    """
    tokens = np.asarray(assigned_tokens, dtype=np.float64)
    if tokens.size == 0:
        return c
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] != c.mu.shape[0]:
        raise NumericsError(
            f"token dim mismatch: centroid has {c.mu.shape[0]}, tokens have shape {tokens.shape}"
        )
    xbar = tokens.mean(axis=0)
    mu = (1.0 - c.beta) * c.mu + c.beta * xbar
    return replace(c, mu=mu, tokens_seen=c.tokens_seen + tokens.shape[0])


@dataclass
class ExpertBank:
    experts: list[np.ndarray]
    centroids: list[Centroid] = field(default_factory=list)

    def __post_init__(self):
        if len(self.experts) < 2:
            raise NumericsError(f"a bank needs at least 2 experts, got {len(self.experts)}")
        self.experts = [as_matrix(w) for w in self.experts]
        shape = self.experts[0].shape
        for i, w in enumerate(self.experts):
            if w.shape != shape:
                raise NumericsError(f"expert {i} has shape {w.shape}, expected {shape}")
        if not self.centroids:
            self.centroids = [Centroid.zeros(self.d_in) for _ in self.experts]
        if len(self.centroids) != len(self.experts):
            raise NumericsError("one centroid per expert required")
        for c in self.centroids:
            if c.mu.shape != (self.d_in,):
                raise NumericsError(f"centroid length {c.mu.shape} != d_in {self.d_in}")

    @property
    def e(self) -> int:
        return len(self.experts)

    @property
    def d_out(self) -> int:
        return self.experts[0].shape[0]

    @property
    def d_in(self) -> int:
        return self.experts[0].shape[1]

    def check_groups(self, g: int) -> None:
        if g < 1 or self.e % g:
            raise NumericsError(f"E={self.e} is not divisible by G={g}")

    def flat_weights(self) -> np.ndarray:
        """``E x (d_out * d_in)`` matrix of flattened expert weights."""
        return np.stack([w.ravel() for w in self.experts])


def _check_dims(e: int, d_in: int, d_out: int) -> None:
    if e < 2:
        raise NumericsError(f"need at least 2 experts, got {e}")
    if d_in < 1 or d_out < 1:
        raise NumericsError(f"dims must be >= 1, got d_in={d_in}, d_out={d_out}")


def init_bank(e: int, d_in: int, d_out: int, seed: int, beta: float = DEFAULT_BETA) -> ExpertBank:
    """Seeded Gaussian experts, std ``1/sqrt(d_in)``, zero centroids."""
    _check_dims(e, d_in, d_out)
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(d_in)
    experts = [rng.normal(0.0, std, size=(d_out, d_in)) for _ in range(e)]
    return ExpertBank(experts, [Centroid.zeros(d_in, beta) for _ in range(e)])


def relative_noise_sigma(rel: float, d_in: int) -> float:
    """Per-entry noise std giving ``||noise||_F ~= rel * ||anchor||_F`` for planted banks."""
    return rel / np.sqrt(d_in)


def init_planted_bank(
    g: int,
    k_per_group: int,
    d_in: int,
    d_out: int,
    noise_sigma: float,
    seed: int,
    residual_rank: int | None = None,
    beta: float = DEFAULT_BETA,
) -> tuple[ExpertBank, np.ndarray]:
    """Bank with ``g`` planted groups of ``k_per_group`` noisy copies of an anchor.

    Experts are laid out group-major (expert ``i`` belongs to group
    ``i // k_per_group``) and the returned labels say so. With
    ``residual_rank`` set, each group's noise lives in a shared
    ``d_out x residual_rank`` column space, so every member's deviation from
    the group mean has rank at most ``residual_rank``.
    """
    if noise_sigma < 0:
        raise NumericsError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if g < 1 or k_per_group < 1:
        raise NumericsError("need g >= 1 and k_per_group >= 1")
    _check_dims(g * k_per_group, d_in, d_out)
    if residual_rank is not None and not 1 <= residual_rank <= min(d_in, d_out):
        raise NumericsError(f"residual_rank {residual_rank} out of range")
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(d_in)
    experts = []
    labels = np.repeat(np.arange(g), k_per_group)
    for _ in range(g):
        anchor = rng.normal(0.0, std, size=(d_out, d_in))
        if residual_rank is None:
            for _ in range(k_per_group):
                experts.append(anchor + rng.normal(0.0, noise_sigma, size=(d_out, d_in)))
        else:
            basis = np.linalg.qr(rng.standard_normal((d_out, residual_rank)))[0]
            # scale so the per-entry std of the noise is noise_sigma
            coef_std = noise_sigma * np.sqrt(d_out / residual_rank)
            for _ in range(k_per_group):
                coef = rng.normal(0.0, coef_std, size=(d_in, residual_rank))
                experts.append(anchor + basis @ coef.T)
    bank = ExpertBank(experts, [Centroid.zeros(d_in, beta) for _ in experts])
    return bank, labels


def save_bank(bank: ExpertBank, path) -> None:
    """Write the little-endian ``MOEB`` archive."""
    parts = [_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.e, bank.d_in, bank.d_out)]
    for w in bank.experts:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    for c in bank.centroids:
        parts.append(np.ascontiguousarray(c.mu, dtype="<f8").tobytes())
        parts.append(struct.pack("<dQ", c.beta, c.tokens_seen))
    Path(path).write_bytes(b"".join(parts))


def load_bank(path) -> ExpertBank:
    data = Path(path).read_bytes()
    if len(data) < _BANK_HEADER.size:
        raise NumericsError(f"{path}: truncated bank archive")
    magic, version, e, d_in, d_out = _BANK_HEADER.unpack_from(data, 0)
    if magic != BANK_MAGIC:
        raise NumericsError(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise NumericsError(f"{path}: unsupported bank version {version}")
    off = _BANK_HEADER.size
    expected = off + e * d_out * d_in * 8 + e * (d_in * 8 + 16)
    if len(data) != expected:
        raise NumericsError(f"{path}: expected {expected} bytes, found {len(data)}")
    experts = []
    for _ in range(e):
        n = d_out * d_in
        experts.append(np.frombuffer(data, "<f8", n, off).reshape(d_out, d_in).astype(np.float64))
        off += n * 8
    centroids = []
    for _ in range(e):
        mu = np.frombuffer(data, "<f8", d_in, off).astype(np.float64)
        off += d_in * 8
        beta, seen = struct.unpack_from("<dQ", data, off)
        off += 16
        centroids.append(Centroid(mu, beta, seen))
    return ExpertBank(experts, centroids)
