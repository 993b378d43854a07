"""End-to-end training and evaluation: codebooks, encodings, SVM, protocols.

Codebooks (PCA and GMM, one pair per descriptor channel) are always fitted
on the training videos of a split only.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .classifier import (
    EvalReport,
    LinearOvaModel,
    SvmTrainOpts,
    mean_accuracy,
    mean_average_precision,
    predict_scores,
    svm_train_ova,
)
from .data import DatasetManifest
from .encoder import EncoderConfig, encode_channels, sted_augment
from .gmm import GmmModel, GmmTrainConfig, gmm_fit_em, sample_training_points
from .pooling import PyramidSpec, representation_dim
from .preprocess import PcaModel, default_output_dim, pca_fit, pca_transform, rootsift_transform


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a train/evaluate run; defaults follow the published setup."""

    K: int = 256
    pca: bool = True
    pca_dim: int | None = None  # None: half the descriptor dimension
    rootsift: bool = False
    sample_count: int = 256000
    gmm_max_iter: int = 100
    gmm_rel_tol: float = 1e-5
    pyramid: str = "1x1x1"
    sted: bool = False
    location_scale: float = 1.0
    power_alpha: float = 0.5
    C: float = 100.0
    svm_tol: float = 1e-6
    svm_max_epochs: int = 1000
    metric: str = "macc"
    seed: int = 0

    def __post_init__(self):
        if self.metric not in ("macc", "map"):
            raise ValueError(f"metric must be 'macc' or 'map', got {self.metric!r}")
        if self.sted and not self.pyramid_spec().is_trivial:
            raise ValueError("STED uses the single 1x1x1 grid; drop the pyramid")
        self.encoder_config()
        self.svm_opts()

    def pyramid_spec(self) -> PyramidSpec:
        return PyramidSpec.parse(self.pyramid)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.sted, self.location_scale, self.power_alpha, self.rootsift)

    def gmm_config(self, channel: int = 0) -> GmmTrainConfig:
        return GmmTrainConfig(K=self.K, max_iter=self.gmm_max_iter, rel_tol=self.gmm_rel_tol,
                              seed=self.seed + channel, sample_count=self.sample_count)

    def svm_opts(self) -> SvmTrainOpts:
        return SvmTrainOpts(C=self.C, max_epochs=self.svm_max_epochs, tol=self.svm_tol, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(doc: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved configuration."""
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class Codebooks:
    pcas: tuple[PcaModel | None, ...]
    gmms: tuple[GmmModel, ...]

    def gmm_input_dims(self) -> list[int]:
        return [g.dim for g in self.gmms]


def fit_codebooks(train: DatasetManifest, config: PipelineConfig, threads: int = 1) -> Codebooks:
    pcas, gmms = [], []
    for channel in range(train.num_channels):
        gcfg = config.gmm_config(channel)
        phi, uvw = sample_training_points(train, gcfg.sample_count, gcfg.seed,
                                          channel=channel, with_locations=True)
        if config.rootsift:
            phi = rootsift_transform(phi)
        pca = None
        if config.pca:
            out_dim = config.pca_dim or default_output_dim(phi.shape[1])
            pca = pca_fit(phi, out_dim, seed=config.seed)
            phi = pca_transform(pca, phi)
        if config.sted:
            phi = sted_augment(phi, uvw, config.location_scale)
        pcas.append(pca)
        gmms.append(gmm_fit_em(phi, gcfg, threads=threads))
    return Codebooks(tuple(pcas), tuple(gmms))


def encode_manifest(manifest: DatasetManifest, books: Codebooks, config: PipelineConfig,
                    threads: int = 1) -> np.ndarray:
    """Encode every video; rows follow manifest order."""
    enc_cfg = config.encoder_config()
    pyramid = config.pyramid_spec()

    def one(entry):
        videos = [manifest.read(entry, c) for c in range(manifest.num_channels)]
        return encode_channels(videos, books.gmms, books.pcas, enc_cfg, pyramid).values

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, manifest.entries))
    else:
        rows = [one(e) for e in manifest.entries]
    if not rows:
        return np.zeros((0, encoded_dim(books, config)))
    return np.stack(rows)


def encoded_dim(books: Codebooks, config: PipelineConfig) -> int:
    pyramid = config.pyramid_spec()
    return sum(representation_dim(g.dim - (3 if config.sted else 0), g.K, pyramid, config.sted)
               for g in books.gmms)


@dataclass
class SplitResult:
    report: EvalReport
    model: LinearOvaModel
    test_ids: list[str]
    truths: list[str]
    scores: np.ndarray  # (test videos, classes) in model.class_labels order
    representation_dim: int
    encode_seconds: float
    train_rows: np.ndarray = field(repr=False, default=None)
    test_rows: np.ndarray = field(repr=False, default=None)


def score_report(model: LinearOvaModel, scores: np.ndarray, truths: list[str],
                 label_set, metric: str, protocol: str) -> EvalReport:
    if metric == "map":
        full = np.full((scores.shape[0], len(label_set)), -np.inf)
        for c, label in enumerate(model.class_labels):
            full[:, list(label_set).index(label)] = scores[:, c]
        present = [i for i, lab in enumerate(label_set) if lab in set(truths)]
        labels = [label_set[i] for i in present]
        return mean_average_precision(full[:, present], truths, labels, protocol)
    preds = [model.class_labels[i] for i in np.argmax(scores, axis=1)]
    return mean_accuracy(preds, truths, label_set, protocol)


def train_and_evaluate(train: DatasetManifest, test: DatasetManifest, config: PipelineConfig,
                       threads: int = 1, protocol: str = "split") -> SplitResult:
    missing = {e.label for e in test.entries} - {e.label for e in train.entries}
    if missing:
        raise ValueError(f"test labels never seen in training: {sorted(missing)}")
    books = fit_codebooks(train, config, threads)
    start = time.perf_counter()
    x_train = encode_manifest(train, books, config, threads)
    x_test = encode_manifest(test, books, config, threads)
    encode_seconds = time.perf_counter() - start
    model = svm_train_ova(x_train, [e.label for e in train.entries], config.svm_opts(),
                          label_order=train.label_set, threads=threads)
    scores = np.atleast_2d(predict_scores(model, x_test))
    truths = [e.label for e in test.entries]
    report = score_report(model, scores, truths, train.label_set, config.metric, protocol)
    report.config_digest = config.digest()
    return SplitResult(report, model, [e.id for e in test.entries], truths, scores,
                       x_train.shape[1], encode_seconds, x_train, x_test)


def holdout_split(manifest: DatasetManifest, test_groups):
    test_groups = set(test_groups)
    train = [e for e in manifest.entries if e.group not in test_groups]
    test = [e for e in manifest.entries if e.group in test_groups]
    return manifest.subset(train), manifest.subset(test)


def leave_one_group_out(manifest: DatasetManifest, config: PipelineConfig,
                        threads: int = 1) -> EvalReport:
    """Hold out each group once; aggregate is the mean of the fold scores.

    ``per_class`` lists one entry per held-out group so that the aggregate
    stays the plain mean of the listed values; class breakdowns are kept in
    ``folds``.
    """
    manifest.require_groups()
    groups = manifest.groups
    if len(groups) < 2:
        raise ValueError("leave-one-group-out needs at least two groups")
    folds = []
    for g in groups:
        train, test = holdout_split(manifest, [g])
        result = train_and_evaluate(train, test, config, threads, protocol=f"logo:{g}")
        folds.append(result.report)
    per_group = [(f"group={g}", f.aggregate) for g, f in zip(groups, folds)]
    aggregate = float(np.mean([v for _, v in per_group]))
    return EvalReport("logo", aggregate, per_group, config.digest(), folds)


def with_overrides(config: PipelineConfig, **changes) -> PipelineConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
