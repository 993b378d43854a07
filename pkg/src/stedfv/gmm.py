"""Diagonal-covariance Gaussian mixture: sampling, k-means init, EM, posteriors.

GMM model file (little-endian)::

    magic "GMM1" | version u32 | K u32 | dim u32
    | weights f32[K] | means f32[K x dim] | variances f32[K x dim]

Reductions over points run in fixed-size chunks summed in chunk order, so a
fit gives the same bits whatever the worker count.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import DatasetManifest, FormatError, normalize_locations

_GMM_HEADER = struct.Struct("<4sIII")
_LOG_2PI = float(np.log(2.0 * np.pi))
# fixed chunking for every reduction over points; never derived from threads
CHUNK_ROWS = 4096
_BLOCK_ELEMS = 1 << 21


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, dim)
    variances: np.ndarray  # (K, dim)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class GmmTrainConfig:
    K: int = 256
    max_iter: int = 100
    rel_tol: float = 1e-5
    seed: int = 0
    variance_floor: float | None = None  # None: 1e-4 x mean per-dim data variance
    weight_floor: float = 1e-6
    sample_count: int = 256000

    def __post_init__(self):
        if self.K < 1 or self.max_iter < 1 or self.sample_count < 1:
            raise ValueError("K, max_iter and sample_count must be positive")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.variance_floor is not None and self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        if not 0 < self.weight_floor * self.K <= 1:
            raise ValueError("weight_floor must be positive and at most 1/K")


def resolve_variance_floor(points, variance_floor: float | None = None) -> float:
    if variance_floor is not None:
        return float(variance_floor)
    points = np.asarray(points, dtype=np.float64)
    floor = 1e-4 * float(points.var(axis=0).mean())
    return max(floor, 1e-12)


# -- sampling ---------------------------------------------------------------

def sample_indices(pool_size: int, count: int, seed: int) -> np.ndarray:
    """Uniform draw of ``count`` indices; with replacement only if the pool is short."""
    if pool_size < 1:
        raise ValueError("empty descriptor pool")
    rng = np.random.default_rng(seed)
    return rng.choice(pool_size, size=count, replace=pool_size < count)


def descriptor_pool(manifest: DatasetManifest, channel: int = 0):
    """All descriptors of the manifest's videos, concatenated in entry order.

    Returns ``(phi, uvw)`` with normalized locations alongside.
    """
    phis, locs = [], []
    for entry in manifest.entries:
        video = manifest.read(entry, channel)
        phis.append(video.phi.astype(np.float64))
        locs.append(normalize_locations(video))
    if not phis:
        raise ValueError("manifest has no entries")
    return np.concatenate(phis), np.concatenate(locs)


def sample_training_points(manifest: DatasetManifest, count: int, seed: int,
                           channel: int = 0, with_locations: bool = False):
    phi, uvw = descriptor_pool(manifest, channel)
    idx = sample_indices(phi.shape[0], count, seed)
    if with_locations:
        return phi[idx], uvw[idx]
    return phi[idx]


# -- k-means initialization -------------------------------------------------

def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    out = np.empty((x.shape[0], centers.shape[0]))
    step = max(1, _BLOCK_ELEMS // max(1, centers.size))
    for lo in range(0, x.shape[0], step):
        diff = x[lo:lo + step, None, :] - centers[None, :, :]
        out[lo:lo + step] = (diff * diff).sum(axis=2)
    return out


def _floored_weights(counts: np.ndarray, floor: float) -> np.ndarray:
    """Maximize sum(counts * log w) subject to w >= floor, sum(w) = 1."""
    counts = np.asarray(counts, dtype=np.float64)
    fixed = np.zeros(counts.shape, dtype=bool)
    while True:
        free_total = counts[~fixed].sum()
        free_mass = 1.0 - floor * fixed.sum()
        if free_total <= 0:
            w = np.full(counts.shape, floor)
            w[~fixed] = free_mass / max(1, (~fixed).sum())
            return w
        w = np.where(fixed, floor, counts * (free_mass / free_total))
        low = (w < floor) & ~fixed
        if not low.any():
            return w
        fixed |= low


def kmeans_init(points, K: int, seed: int, variance_floor: float | None = None,
                weight_floor: float = 1e-6, lloyd_iters: int = 10) -> GmmModel:
    """Initial mixture from k-means with farthest-point seeding.

    The first center is a seeded random point; each later center is the point
    farthest from those already chosen (lowest index on ties).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("points must be a nonempty 2-D array")
    if np.unique(x, axis=0).shape[0] < K:
        raise ValueError(f"fewer than K={K} distinct points")
    var_floor = resolve_variance_floor(x, variance_floor)
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(x.shape[0]))]
    d2 = _sq_dists(x, x[chosen[0]][None])[:, 0]
    for _ in range(1, K):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt][None])[:, 0])
    centers = x[chosen].copy()

    for _ in range(lloyd_iters):
        assign = np.argmin(_sq_dists(x, centers), axis=1)
        for k in range(K):
            members = x[assign == k]
            if members.shape[0]:
                centers[k] = members.mean(axis=0)

    assign = np.argmin(_sq_dists(x, centers), axis=1)
    variances = np.empty_like(centers)
    counts = np.zeros(K)
    for k in range(K):
        members = x[assign == k]
        counts[k] = members.shape[0]
        if members.shape[0]:
            variances[k] = ((members - centers[k]) ** 2).mean(axis=0)
        else:
            variances[k] = x.var(axis=0)
    variances = np.maximum(variances, var_floor)
    weights = np.maximum(counts / x.shape[0], weight_floor)
    weights = weights / weights.sum()
    return GmmModel(weights=weights, means=centers, variances=variances)


# -- densities and posteriors ------------------------------------------------

def log_joint(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """``log w_k + log N(x; mu_k, var_k)`` for rows of ``x``, shape (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {x.shape[1]}")
    inv_var = 1.0 / model.variances
    const = np.log(model.weights) - 0.5 * (model.dim * _LOG_2PI + np.log(model.variances).sum(axis=1))
    out = np.empty((x.shape[0], model.K))
    step = max(1, _BLOCK_ELEMS // max(1, model.means.size))
    for lo in range(0, x.shape[0], step):
        diff = x[lo:lo + step, None, :] - model.means[None, :, :]
        out[lo:lo + step] = const - 0.5 * (diff * diff * inv_var).sum(axis=2)
    return out


def _normalize_log(lj: np.ndarray):
    norm = logsumexp(lj, axis=1, keepdims=True)
    post = np.exp(lj - norm)
    post /= post.sum(axis=1, keepdims=True)
    return post, norm[:, 0]


def gmm_posteriors(model: GmmModel, phi) -> np.ndarray:
    """Soft assignments; a vector for a single input, rows for 2-D input."""
    phi = np.asarray(phi, dtype=np.float64)
    post, _ = _normalize_log(log_joint(model, phi))
    return post[0] if phi.ndim == 1 else post


def average_log_likelihood(model: GmmModel, points) -> float:
    _, norm = _normalize_log(log_joint(model, points))
    return float(norm.sum() / norm.shape[0])


# -- EM ---------------------------------------------------------------------

def _chunk_stats(model: GmmModel, x: np.ndarray):
    post, norm = _normalize_log(log_joint(model, x))
    return norm.sum(), post.sum(axis=0), post.T @ x, post.T @ (x * x)


def _estep(model: GmmModel, x: np.ndarray, pool):
    chunks = [x[lo:lo + CHUNK_ROWS] for lo in range(0, x.shape[0], CHUNK_ROWS)]
    results = pool.map(lambda c: _chunk_stats(model, c), chunks) if pool else map(
        lambda c: _chunk_stats(model, c), chunks)
    ll, nk, sx, sxx = 0.0, 0.0, 0.0, 0.0
    for r in results:  # chunk order
        ll, nk, sx, sxx = ll + r[0], nk + r[1], sx + r[2], sxx + r[3]
    return ll / x.shape[0], nk, sx, sxx


def _mstep(prev: GmmModel, nk, sx, sxx, var_floor: float, weight_floor: float) -> GmmModel:
    means = prev.means.copy()
    variances = prev.variances.copy()
    live = nk > 1e-10
    means[live] = sx[live] / nk[live, None]
    ex2 = sxx[live] / nk[live, None]
    variances[live] = np.maximum(ex2 - means[live] ** 2, var_floor)
    weights = _floored_weights(nk, weight_floor)
    return GmmModel(weights=weights, means=means, variances=variances)


def gmm_fit_em_trace(points, config: GmmTrainConfig, threads: int = 1):
    """EM fit returning ``(model, trace)``.

    ``trace[i]`` is the average log-likelihood of the i-th model visited.
    Iteration stops at ``max_iter`` or when the relative improvement falls
    below ``rel_tol``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("points must be a nonempty 2-D array")
    if not np.isfinite(x).all():
        raise FloatingPointError("non-finite training points")
    var_floor = resolve_variance_floor(x, config.variance_floor)
    # fit on centered data; shifting is exact for the likelihood and keeps
    # the second-moment variance formula well conditioned
    shift = x.mean(axis=0)
    xc = x - shift
    model = kmeans_init(xc, config.K, config.seed, var_floor, config.weight_floor)

    trace: list[float] = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for _ in range(config.max_iter):
            ll, nk, sx, sxx = _estep(model, xc, pool)
            if not np.isfinite(ll):
                raise FloatingPointError("non-finite log-likelihood in EM")
            if trace and ll - trace[-1] < config.rel_tol * abs(trace[-1]):
                trace.append(ll)
                break
            trace.append(ll)
            model = _mstep(model, nk, sx, sxx, var_floor, config.weight_floor)
    finally:
        if pool:
            pool.shutdown()
    model = GmmModel(weights=model.weights, means=model.means + shift, variances=model.variances)
    return model, trace


def gmm_fit_em(points, config: GmmTrainConfig, threads: int = 1) -> GmmModel:
    return gmm_fit_em_trace(points, config, threads)[0]


# -- serialization ------------------------------------------------------------

def save_gmm(model: GmmModel, path) -> None:
    parts = [
        _GMM_HEADER.pack(b"GMM1", 1, model.K, model.dim),
        np.asarray(model.weights, dtype="<f4").tobytes(),
        np.asarray(model.means, dtype="<f4").tobytes(),
        np.asarray(model.variances, dtype="<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_gmm(path) -> GmmModel:
    buf = Path(path).read_bytes()
    if len(buf) < _GMM_HEADER.size:
        raise FormatError("truncated GMM header")
    magic, version, K, dim = _GMM_HEADER.unpack_from(buf)
    if magic != b"GMM1" or version != 1:
        raise FormatError(f"not a GMM1 v1 file: {magic!r} v{version}")
    if K < 1 or dim < 1 or len(buf) != _GMM_HEADER.size + 4 * (K + 2 * K * dim):
        raise FormatError("GMM payload size mismatch")
    flat = np.frombuffer(buf, dtype="<f4", offset=_GMM_HEADER.size).astype(np.float64)
    return GmmModel(
        weights=flat[:K],
        means=flat[K:K + K * dim].reshape(K, dim),
        variances=flat[K + K * dim:].reshape(K, dim),
    )
