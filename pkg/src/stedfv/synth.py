"""Synthetic descriptor datasets with space-time class structure, and the
method comparison harness (baseline vs. spatio-temporal pyramids vs. STED).

Every class is an ordered sequence of phases.  A phase has a prototype in
descriptor space and a spatial anchor on a per-class line segment.  A video
of the class lays its phases out in time order, each phase's descriptors
drawn around the prototype at positions near its anchor.  With
``reversed_pairs`` class 2i+1 reuses class 2i's phases (prototypes and
anchors) in the opposite time order, so the two classes differ only in
where along the clip each kind of descriptor occurs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .data import (
    DatasetManifest,
    ManifestEntry,
    VideoDescriptorSet,
    VideoHeader,
    save_manifest,
    write_video_file,
)
from .pipeline import (
    PipelineConfig,
    config_digest,
    holdout_split,
    train_and_evaluate,
    with_overrides,
)
from .pooling import PyramidSpec, single_level, temporal_pyramid

WIDTH, HEIGHT, FRAMES = 320, 240, 120
_ANCHOR_RADIUS = 0.05


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    videos_per_class: int = 40
    phases_per_class: int = 2
    descriptors_per_video: int = 200
    dim: int = 8
    spatial_jitter: float = 0.1
    temporal_jitter: float = 0.1
    reversed_pairs: bool = True
    noise_sigma: float = 6.0
    seed: int = 0
    groups: int = 2

    def __post_init__(self):
        counts = (self.num_classes, self.videos_per_class, self.phases_per_class,
                  self.descriptors_per_video, self.dim, self.groups)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if not (0 <= self.spatial_jitter <= 0.5 and 0 <= self.temporal_jitter <= 0.5):
            raise ValueError("jitters must lie in [0, 0.5]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def pairs(self) -> list[tuple[str, str]]:
        """Label pairs that share phase content in reversed order."""
        if not self.reversed_pairs:
            return []
        return [(label(2 * i), label(2 * i + 1)) for i in range(self.num_classes // 2)]


def label(c: int) -> str:
    return f"class{c:02d}"


@dataclass(frozen=True, eq=False)
class _ClassModel:
    means: np.ndarray    # (phases, dim) prototypes
    anchors: np.ndarray  # (phases, 2) normalized spatial anchors
    order: tuple[int, ...]  # phase shown in each time slot


def _class_models(spec: SynthSpec) -> list[_ClassModel]:
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    P = spec.phases_per_class
    frac = np.linspace(0.0, 1.0, P)[:, None] if P > 1 else np.zeros((1, 1))
    models = []
    for c in range(spec.num_classes):
        if spec.reversed_pairs and c % 2 == 1:
            base = models[c - 1]
            models.append(_ClassModel(base.means, base.anchors, tuple(reversed(base.order))))
            continue
        means = rng.standard_normal((P, spec.dim))
        start, end = rng.uniform(0.2, 0.8, size=(2, 2))
        anchors = start + frac * (end - start)
        models.append(_ClassModel(means, anchors, tuple(range(P))))
    return models


def _phase_counts(total: int, phases: int) -> np.ndarray:
    counts = np.full(phases, total // phases)
    counts[: total % phases] += 1
    return counts


def _boundaries(P: int, jitter: float, rng) -> np.ndarray:
    inner = np.arange(1, P) / P
    if jitter > 0:
        inner = inner + rng.uniform(-jitter, jitter, size=inner.shape)
    inner = np.sort(np.clip(inner, 0.0, 1.0))
    return np.concatenate([[0.0], inner, [1.0]])


def generate_video(spec: SynthSpec, cls: _ClassModel, class_index: int, video_index: int) -> VideoDescriptorSet:
    rng = np.random.default_rng([spec.seed, class_index, video_index])
    P = spec.phases_per_class
    counts = _phase_counts(spec.descriptors_per_video, P)
    bounds = _boundaries(P, spec.temporal_jitter, rng)
    shift = rng.uniform(-spec.spatial_jitter, spec.spatial_jitter, size=2) if spec.spatial_jitter > 0 else np.zeros(2)

    locs, phis = [], []
    for slot, phase in enumerate(cls.order):
        n = counts[phase]
        if n == 0:
            continue
        steps = (np.arange(n) + 0.5) / n
        t = bounds[slot] + steps * (bounds[slot + 1] - bounds[slot])
        angle = 2.0 * np.pi * np.arange(n) / n
        ring = _ANCHOR_RADIUS * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        uv = cls.anchors[phase] + shift + ring
        locs.append(np.column_stack([uv, t]))
        phis.append(cls.means[phase] + spec.noise_sigma * rng.standard_normal((n, spec.dim)))
    uvw = np.clip(np.concatenate(locs), 0.0, 1.0)
    phi = np.concatenate(phis)
    perm = rng.permutation(uvw.shape[0])
    uvw, phi = uvw[perm], phi[perm]

    # float32 storage must stay strictly inside [0, width) x [0, height)
    x = np.minimum(uvw[:, 0] * WIDTH, np.nextafter(np.float32(WIDTH), 0, dtype=np.float32))
    y = np.minimum(uvw[:, 1] * HEIGHT, np.nextafter(np.float32(HEIGHT), 0, dtype=np.float32))
    t = uvw[:, 2] * (FRAMES - 1)
    xyt = np.column_stack([x, y, t]).astype(np.float32)
    return VideoDescriptorSet(VideoHeader(WIDTH, HEIGHT, FRAMES, spec.dim), xyt, phi)


def generate_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write descriptor files plus ``manifest.json`` and ``synth.json`` to ``out_dir``."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    classes = _class_models(spec)
    entries = []
    for c, cls in enumerate(classes):
        for v in range(spec.videos_per_class):
            vid = f"{label(c)}_v{v:04d}"
            rel = f"videos/{vid}.sted"
            write_video_file(generate_video(spec, cls, c, v), out / rel)
            entries.append(ManifestEntry(vid, rel, label(c), f"g{v % spec.groups:02d}"))
    manifest = DatasetManifest(tuple(entries), tuple(label(c) for c in range(spec.num_classes)), out)
    save_manifest(manifest, out / "manifest.json")
    (out / "synth.json").write_text(json.dumps(asdict(spec), indent=1) + "\n", encoding="utf-8")
    return manifest


# -- experiments ----------------------------------------------------------------

def method_overrides(method: str) -> dict:
    """Pipeline overrides for a method name.

    ``baseline``; ``stp:L`` (1x1 and 2x2 grids at L temporal cells);
    ``stp-pyramid:L`` (union over L' = 1, 2, 4, .. L); ``sted`` or ``sted:SCALE``;
    ``grid:SPEC`` for an explicit pyramid string.
    """
    name, _, arg = method.partition(":")
    if name == "baseline":
        return {"pyramid": "1x1x1", "sted": False}
    if name == "stp":
        return {"pyramid": str(single_level(int(arg or 2))), "sted": False}
    if name == "stp-pyramid":
        return {"pyramid": str(temporal_pyramid(int(arg or 2))), "sted": False}
    if name == "sted":
        return {"pyramid": "1x1x1", "sted": True, "location_scale": float(arg) if arg else 1.0}
    if name == "grid":
        return {"pyramid": str(PyramidSpec.parse(arg)), "sted": False}
    raise ValueError(f"unknown method {method!r}")


DESK_PIPELINE = PipelineConfig(K=16, sample_count=20000, gmm_max_iter=100)


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...] = ("baseline", "stp:2", "sted")
    pipeline: PipelineConfig = DESK_PIPELINE
    split: str = "holdout"  # or "logo"
    test_groups: tuple[str, ...] = ()  # holdout only; default: the first group
    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.split not in ("holdout", "logo"):
            raise ValueError("split must be 'holdout' or 'logo'")
        for m in self.methods:
            method_overrides(m)

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "pipeline": self.pipeline.to_dict(),
            "split": self.split,
            "test_groups": list(self.test_groups),
            "pairs": [list(p) for p in self.pairs],
        }


@dataclass
class MethodResult:
    method: str
    aggregate: float
    representation_dim: int
    encode_seconds: float
    pair_correct: int = 0
    pair_total: int = 0
    per_class: list = field(default_factory=list)
    # (train rows, test rows) per fold; not serialized
    encodings: list = field(default_factory=list, repr=False)

    @property
    def pair_accuracy(self) -> float | None:
        return self.pair_correct / self.pair_total if self.pair_total else None

    def pair_pvalue(self) -> float | None:
        """Two-sided binomial test of the pairwise accuracy against 1/2."""
        if not self.pair_total:
            return None
        return float(binomtest(self.pair_correct, self.pair_total, 0.5).pvalue)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "aggregate": self.aggregate,
            "representation_dim": self.representation_dim,
            "pair_correct": self.pair_correct,
            "pair_total": self.pair_total,
            "per_class": [{"label": k, "value": v} for k, v in self.per_class],
        }


@dataclass
class ExperimentReport:
    config_digest: str
    split: str
    results: list[MethodResult]

    def to_json(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "split": self.split,
            "methods": [r.to_json() for r in self.results],
        }

    def table(self, with_time: bool = False) -> str:
        header = ["method", "aggregate", "dim", "pair_acc"] + (["encode_s"] if with_time else [])
        rows = []
        for r in self.results:
            pair = f"{r.pair_accuracy:.4f}" if r.pair_accuracy is not None else "-"
            row = [r.method, f"{r.aggregate:.4f}", str(r.representation_dim), pair]
            if with_time:
                row.append(f"{r.encode_seconds:.3f}")
            rows.append(row)
        widths = [max(len(x) for x in col) for col in zip(header, *rows)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                      for i, (c, w) in enumerate(zip(cells, widths)))
        return "\n".join([fmt(header)] + [fmt(r) for r in rows]) + "\n"


def _pairwise(scores, class_labels, truths, pairs) -> tuple[int, int]:
    """Correct/total when each reversed-pair video only chooses between its pair."""
    index = {lab: i for i, lab in enumerate(class_labels)}
    correct = total = 0
    for a, b in pairs:
        if a not in index or b not in index:
            continue
        for row, truth in zip(scores, truths):
            if truth not in (a, b):
                continue
            guess = a if row[index[a]] >= row[index[b]] else b
            correct += guess == truth
            total += 1
    return correct, total


def run_experiment(config: ExperimentConfig, manifest: DatasetManifest, threads: int = 1) -> ExperimentReport:
    """Train and evaluate each method on identical splits, one after another.

    With ``split="logo"`` the aggregate is the mean over held-out groups and
    the reversed-pair counts are pooled over all folds.
    """
    results = []
    for method in config.methods:
        pcfg = with_overrides(config.pipeline, **method_overrides(method))
        if config.split == "logo":
            manifest.require_groups()
            if len(manifest.groups) < 2:
                raise ValueError("leave-one-group-out needs at least two groups")
            folds = [holdout_split(manifest, [g]) for g in manifest.groups]
        else:
            folds = [holdout_split(manifest, config.test_groups or (manifest.groups[0],))]
        fold_results = [train_and_evaluate(train, test, pcfg, threads,
                                           protocol=f"{config.split}:{i}")
                        for i, (train, test) in enumerate(folds)]
        correct = total = 0
        for res in fold_results:
            c, t = _pairwise(res.scores, res.model.class_labels, res.truths, config.pairs)
            correct, total = correct + c, total + t
        if len(fold_results) == 1:
            per_class = fold_results[0].report.per_class
        else:
            per_class = [(f"group={g}", r.report.aggregate) for g, r in zip(manifest.groups, fold_results)]
        aggregate = float(np.mean([r.report.aggregate for r in fold_results]))
        results.append(MethodResult(method, aggregate, fold_results[0].representation_dim,
                                    sum(r.encode_seconds for r in fold_results),
                                    correct, total, per_class,
                                    [(r.train_rows, r.test_rows) for r in fold_results]))
    return ExperimentReport(config_digest(config.to_dict()), config.split, results)


def seeds_sweep(spec: SynthSpec, config: ExperimentConfig, seeds: Sequence[int], workdir,
                threads: int = 1) -> list[ExperimentReport]:
    """Regenerate the dataset for each seed and rerun the experiment."""
    reports = []
    for s in seeds:
        sspec = SynthSpec(**{**asdict(spec), "seed": s})
        manifest = generate_dataset(sspec, Path(workdir) / f"seed{s}")
        cfg = ExperimentConfig(config.methods, with_overrides(config.pipeline, seed=s), config.split,
                               config.test_groups, tuple(sspec.pairs()) or config.pairs)
        reports.append(run_experiment(cfg, manifest, threads))
    return reports
