"""RootSIFT-style descriptor transform and PCA.

PCA model file (little-endian)::

    magic "PCA1" | version u32 | input_dim u32 | output_dim u32
    | mean f32[D] | eigenvalues f32[D'] | basis f32[D' x D] (row-major)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FormatError

_PCA_HEADER = struct.Struct("<4sIII")


def rootsift_transform(phi):
    """Signed square root of the L1-normalized vector.

    Works row-wise on 2-D input.  All-zero rows stay zero.
    """
    phi = np.asarray(phi, dtype=np.float64)
    l1 = np.abs(phi).sum(axis=-1, keepdims=True)
    safe = np.where(l1 > 0, l1, 1.0)
    return np.sign(phi) * np.sqrt(np.abs(phi) / safe)


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray         # (D,)
    basis: np.ndarray        # (D', D), orthonormal rows
    eigenvalues: np.ndarray  # (D',), non-increasing

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]


def default_output_dim(input_dim: int) -> int:
    """Halve the dimension, keeping at least one component."""
    return max(1, input_dim // 2)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # first nonzero entry of each row made positive
    out = vectors.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return out


def pca_fit(samples, output_dim: int | None = None, seed: int = 0) -> PcaModel:
    """Top principal directions of the sample covariance (n - 1 denominator).

    The fit is a dense eigendecomposition and fully deterministic; ``seed``
    is accepted for interface symmetry with the other trainers.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    n, d = x.shape
    if output_dim is None:
        output_dim = default_output_dim(d)
    if not 1 <= output_dim <= d:
        raise ValueError(f"output_dim must be in [1, {d}], got {output_dim}")
    if n < output_dim:
        raise ValueError(f"need at least {output_dim} samples, got {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(n - 1, 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:output_dim]
    evals = np.maximum(evals[order], 0.0)
    basis = _fix_signs(evecs[:, order].T)
    return PcaModel(mean=mean, basis=basis, eigenvalues=evals)


def pca_transform(model: PcaModel, phi) -> np.ndarray:
    """Project ``phi`` (a vector or rows of vectors) onto the basis."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != model.input_dim:
        raise ValueError(f"expected dimension {model.input_dim}, got {phi.shape[-1]}")
    return (phi - model.mean) @ model.basis.T


def pca_reconstruct(model: PcaModel, projected) -> np.ndarray:
    return np.asarray(projected, dtype=np.float64) @ model.basis + model.mean


def reconstruction_error(model: PcaModel, samples) -> float:
    """Summed squared reconstruction error over samples, divided by n - 1.

    Uses the same denominator as the covariance so the value equals the sum
    of the discarded eigenvalues on the training set.
    """
    x = np.asarray(samples, dtype=np.float64)
    resid = x - pca_reconstruct(model, pca_transform(model, x))
    return float((resid ** 2).sum() / max(x.shape[0] - 1, 1))


def save_pca(model: PcaModel, path) -> None:
    parts = [
        _PCA_HEADER.pack(b"PCA1", 1, model.input_dim, model.output_dim),
        np.asarray(model.mean, dtype="<f4").tobytes(),
        np.asarray(model.eigenvalues, dtype="<f4").tobytes(),
        np.asarray(model.basis, dtype="<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_pca(path) -> PcaModel:
    buf = Path(path).read_bytes()
    if len(buf) < _PCA_HEADER.size:
        raise FormatError("truncated PCA header")
    magic, version, d, dp = _PCA_HEADER.unpack_from(buf)
    if magic != b"PCA1" or version != 1:
        raise FormatError(f"not a PCA1 v1 file: {magic!r} v{version}")
    if not 1 <= dp <= d:
        raise FormatError(f"bad dimensions {d} -> {dp}")
    count = d + dp + dp * d
    if len(buf) != _PCA_HEADER.size + 4 * count:
        raise FormatError("PCA payload size mismatch")
    flat = np.frombuffer(buf, dtype="<f4", offset=_PCA_HEADER.size).astype(np.float64)
    return PcaModel(
        mean=flat[:d],
        eigenvalues=flat[d:d + dp],
        basis=flat[d + dp:].reshape(dp, d),
    )
