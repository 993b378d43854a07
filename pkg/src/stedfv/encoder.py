"""Fisher-vector encoding of located descriptors.

Each descriptor contributes the gradient of the GMM log-likelihood with
respect to means and variances (improved Fisher vector, no weight part).
Contributions are averaged per pooling cell, power- and L2-normalized per
cell, concatenated and L2-normalized once more.  With STED switched on the
normalized (u, v, w) location is appended to each descriptor before
encoding and a single cell is used.

Encoding files (little-endian)::

    FVEC: magic | version u32 | length u64 | f32[length]
    FMAT: magic | version u32 | rows u64 | cols u64 | f32[rows x cols]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FormatError, VideoDescriptorSet, normalize_locations
from .gmm import GmmModel, gmm_posteriors
from .pooling import EncodingLayout, PyramidSpec, VideoEncoding, pooled_cells
from .preprocess import PcaModel, pca_transform, rootsift_transform


@dataclass(frozen=True)
class EncoderConfig:
    sted_enabled: bool = False
    location_scale: float = 1.0
    power_alpha: float = 0.5
    rootsift: bool = False

    def __post_init__(self):
        if not 0 < self.power_alpha <= 1:
            raise ValueError("power_alpha must lie in (0, 1]")
        if not np.isfinite(self.location_scale) or self.location_scale < 0:
            raise ValueError("location_scale must be finite and non-negative")


def sted_augment(phi, location, scale: float = 1.0) -> np.ndarray:
    """Append the scaled location: ``[phi, scale*u, scale*v, scale*w]``.

    Row-wise for 2-D ``phi`` with matching ``(M, 3)`` locations.
    """
    phi = np.asarray(phi, dtype=np.float64)
    loc = np.asarray(location, dtype=np.float64)
    return np.concatenate([phi, scale * loc], axis=-1)


def fv_contribution(model: GmmModel, phi) -> np.ndarray:
    """Per-descriptor Fisher block of length ``2 * dim * K``.

    For each component k: ``dim`` mean-gradient values followed by ``dim``
    variance-gradient values.
    """
    phi = np.asarray(phi, dtype=np.float64)
    x = np.atleast_2d(phi)
    if x.shape[1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {x.shape[1]}")
    gamma = np.atleast_2d(gmm_posteriors(model, x))              # (M, K)
    z = (x[:, None, :] - model.means) / np.sqrt(model.variances)  # (M, K, dim)
    g_mean = gamma[:, :, None] * z / np.sqrt(model.weights)[:, None]
    g_var = gamma[:, :, None] * (z * z - 1.0) / np.sqrt(2.0 * model.weights)[:, None]
    out = np.stack([g_mean, g_var], axis=2).reshape(x.shape[0], -1)
    return out[0] if phi.ndim == 1 else out


def power_normalize(x, alpha: float = 0.5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.abs(x) ** alpha


def l2_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt((x * x).sum())
    return x / norm if norm > 0 else x.copy()


def descriptor_features(video: VideoDescriptorSet, pca: PcaModel | None,
                        config: EncoderConfig):
    """Descriptors as the GMM sees them, plus their normalized locations.

    Order: optional RootSIFT, optional PCA, optional location append.
    """
    feats = video.phi.astype(np.float64)
    uvw = normalize_locations(video)
    if config.rootsift:
        feats = rootsift_transform(feats)
    if pca is not None:
        feats = pca_transform(pca, feats) if len(video) else np.zeros((0, pca.output_dim))
    if config.sted_enabled:
        feats = sted_augment(feats, uvw, config.location_scale)
    return feats, uvw


def _check(model: GmmModel, pca: PcaModel | None, config: EncoderConfig,
           pyramid: PyramidSpec, video_dim: int) -> None:
    if config.sted_enabled and not pyramid.is_trivial:
        raise ValueError("STED uses the single 1x1x1 grid; drop the pyramid")
    if pca is not None and pca.input_dim != video_dim:
        raise ValueError(f"PCA expects dimension {pca.input_dim}, video has {video_dim}")
    base = pca.output_dim if pca is not None else video_dim
    expected = base + (3 if config.sted_enabled else 0)
    if model.dim != expected:
        raise ValueError(f"GMM dimension {model.dim} != descriptor dimension {expected}")


def pooled_fisher(video: VideoDescriptorSet, model: GmmModel, pca: PcaModel | None,
                  config: EncoderConfig, pyramid: PyramidSpec) -> np.ndarray:
    """Per-cell mean Fisher blocks before normalization, shape (cells, 2*dim*K)."""
    _check(model, pca, config, pyramid, video.header.dim)
    feats, uvw = descriptor_features(video, pca, config)
    if feats.shape[0] == 0:
        return np.zeros((pyramid.cells, 2 * model.K * model.dim))
    blocks, _ = pooled_cells(fv_contribution(model, feats), uvw, pyramid)
    return blocks


def normalize_blocks(blocks: np.ndarray, alpha: float) -> np.ndarray:
    """Per-row power then L2 normalization, then global L2 of the flattening."""
    rows = [l2_normalize(power_normalize(b, alpha)) for b in blocks]
    return l2_normalize(np.concatenate(rows) if rows else np.zeros(0))


def encode_video(video: VideoDescriptorSet, model: GmmModel, pca: PcaModel | None,
                 config: EncoderConfig, pyramid: PyramidSpec | None = None) -> VideoEncoding:
    pyramid = pyramid or PyramidSpec.trivial()
    blocks = pooled_fisher(video, model, pca, config, pyramid)
    layout = EncodingLayout(pyramid, model.K, model.dim)
    return VideoEncoding(normalize_blocks(blocks, config.power_alpha), (layout,))


def encode_channels(videos: Sequence[VideoDescriptorSet], models: Sequence[GmmModel],
                    pcas: Sequence[PcaModel | None], config: EncoderConfig,
                    pyramid: PyramidSpec | None = None) -> VideoEncoding:
    """Encode parallel descriptor channels of one video and concatenate them."""
    if not (len(videos) == len(models) == len(pcas)):
        raise ValueError("need one GMM and one PCA slot per channel")
    parts = [encode_video(v, m, p, config, pyramid) for v, m, p in zip(videos, models, pcas)]
    if len(parts) == 1:
        return parts[0]
    values = l2_normalize(np.concatenate([p.values for p in parts]))
    return VideoEncoding(values, tuple(lay for p in parts for lay in p.layouts))


# -- encoding files ----------------------------------------------------------

_FVEC = struct.Struct("<4sIQ")
_FMAT = struct.Struct("<4sIQQ")


def save_fvec(values, path) -> None:
    values = np.asarray(values, dtype="<f4").reshape(-1)
    Path(path).write_bytes(_FVEC.pack(b"FVEC", 1, values.shape[0]) + values.tobytes())


def load_fvec(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _FVEC.size:
        raise FormatError("truncated FVEC header")
    magic, version, n = _FVEC.unpack_from(buf)
    if magic != b"FVEC" or version != 1:
        raise FormatError(f"not an FVEC v1 file: {magic!r}")
    if len(buf) != _FVEC.size + 4 * n:
        raise FormatError("FVEC payload size mismatch")
    return np.frombuffer(buf, dtype="<f4", offset=_FVEC.size).astype(np.float64)


def save_fmat(matrix, path) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("FMAT needs a 2-D matrix")
    rows, cols = matrix.shape
    Path(path).write_bytes(_FMAT.pack(b"FMAT", 1, rows, cols) + np.ascontiguousarray(matrix).tobytes())


def load_fmat(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _FMAT.size:
        raise FormatError("truncated FMAT header")
    magic, version, rows, cols = _FMAT.unpack_from(buf)
    if magic != b"FMAT" or version != 1:
        raise FormatError(f"not an FMAT v1 file: {magic!r}")
    if len(buf) != _FMAT.size + 4 * rows * cols:
        raise FormatError("FMAT payload size mismatch")
    flat = np.frombuffer(buf, dtype="<f4", offset=_FMAT.size)
    return flat.reshape(rows, cols).astype(np.float64)
