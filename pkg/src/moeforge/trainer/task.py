"""Synthetic clustered regression task."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import NumericsError


@dataclass
class SyntheticTask:
    cluster_count: int
    means: np.ndarray  # clusters x d_in
    maps: np.ndarray  # clusters x d_out x d_in
    x_train: np.ndarray
    y_train: np.ndarray
    c_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    c_eval: np.ndarray

    @property
    def d_in(self) -> int:
        return self.means.shape[1]

    @property
    def d_out(self) -> int:
        return self.maps.shape[1]

    def oracle_predict(self, x: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Noise-free targets ``M_c x`` given the true cluster labels."""
        return np.einsum("noi,ni->no", self.maps[c], x)


def make_task(
    clusters: int,
    samples_per_cluster: int,
    d_in: int,
    d_out: int,
    noise: float,
    seed: int,
    separation: float = 3.0,
    spread: float = 1.0,
    eval_fraction: float = 0.25,
) -> SyntheticTask:
    """``y = M_c x + noise`` with inputs scattered around per-cluster means.

    Cluster means are ``separation`` times orthonormal directions (random
    unit directions if ``clusters > d_in``). Inputs are the mean plus a
    perturbation drawn uniformly from a ball of radius ``spread``, so with
    orthonormal means and ``separation > 2 * spread`` the clusters are
    linearly separable by ``argmax_c x . mean_c``.
    """
    if clusters < 1:
        raise NumericsError(f"clusters must be >= 1, got {clusters}")
    if samples_per_cluster < 2:
        raise NumericsError("need at least 2 samples per cluster")
    if noise < 0:
        raise NumericsError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    if clusters <= d_in:
        dirs = np.linalg.qr(rng.standard_normal((d_in, clusters)))[0].T
    else:
        dirs = rng.standard_normal((clusters, d_in))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    maps = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(clusters, d_out, d_in))

    n = clusters * samples_per_cluster
    c = np.repeat(np.arange(clusters), samples_per_cluster)
    z = rng.standard_normal((n, d_in))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    radius = spread * rng.random(n) ** (1.0 / d_in)
    x = means[c] + z * radius[:, None]
    y = np.einsum("noi,ni->no", maps[c], x) + noise * rng.standard_normal((n, d_out))

    order = rng.permutation(n)
    n_eval = max(1, int(round(eval_fraction * n)))
    ev, tr = order[:n_eval], order[n_eval:]
    return SyntheticTask(clusters, means, maps, x[tr], y[tr], c[tr], x[ev], y[ev], c[ev])
