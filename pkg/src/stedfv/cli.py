"""Command-line entry point: ``stedfv <command> [options]``.

Settings resolve as command-line flags over ``--config`` JSON keys over
built-in defaults.  Config keys mirror the long flag names (``k``,
``location-scale`` or ``location_scale``, ...).  Every artifact the CLI
writes records the SHA-256 digest of its resolved settings: JSON outputs
carry a ``config_digest`` field, binary outputs get a ``<file>.meta.json``
sidecar.  Output paths and ``--threads`` are excluded from the digest, so
reruns with the same settings reproduce identical bytes.

Exit codes: 0 success, 1 usage error, 2 data-format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .classifier import (
    load_model,
    predict_scores,
    save_model,
    svm_train_ova,
)
from .data import DataError, load_manifest, read_video_file
from .encoder import load_fmat, save_fmat, sted_augment
from .gmm import GmmTrainConfig, gmm_fit_em, load_gmm, sample_training_points, save_gmm
from .pipeline import (
    Codebooks,
    PipelineConfig,
    config_digest,
    encode_manifest,
    holdout_split,
    leave_one_group_out,
    score_report,
    train_and_evaluate,
)
from .pooling import PyramidSpec, representation_dim
from .preprocess import default_output_dim, load_pca, pca_fit, pca_transform, rootsift_transform, save_pca
from .synth import DESK_PIPELINE, ExperimentConfig, SynthSpec, generate_dataset, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# settings that never enter a digest
_UNDIGESTED = {"out", "threads", "config", "command", "action"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add(p, name, **kw):
    p.add_argument(_flag(name), dest=name, default=argparse.SUPPRESS, **kw)


def _bool(p, name, help=None):
    p.add_argument(_flag(name), dest=name, default=argparse.SUPPRESS,
                   action=argparse.BooleanOptionalAction, help=help)


def _synth_args(p):
    _add(p, "num_classes", type=int)
    _add(p, "videos_per_class", type=int)
    _add(p, "phases_per_class", type=int)
    _add(p, "descriptors_per_video", type=int)
    _add(p, "dim", type=int)
    _add(p, "spatial_jitter", type=float)
    _add(p, "temporal_jitter", type=float)
    _bool(p, "reversed_pairs")
    _add(p, "noise_sigma", type=float)
    _add(p, "groups", type=int)


def _codebook_args(p):
    _add(p, "k", type=int, help="GMM components")
    _bool(p, "pca", help="PCA before the GMM (default on)")
    _add(p, "pca_dim", type=int, help="PCA output dimension (default: half)")
    _bool(p, "rootsift")
    _add(p, "sample_count", type=int)
    _add(p, "gmm_max_iter", type=int)
    _add(p, "gmm_rel_tol", type=float)


def _encoding_args(p):
    _add(p, "pyramid", help="grids such as 1x1x1,2x2x1")
    _bool(p, "sted", help="append normalized (x, y, t); single 1x1x1 cell")
    _add(p, "location_scale", type=float, help="weight of the appended locations")
    _add(p, "power_alpha", type=float)


def _svm_args(p):
    p.add_argument("--C", "--c", dest="C", type=float, default=argparse.SUPPRESS, help="SVM cost (default 100)")
    _add(p, "svm_tol", type=float)
    _add(p, "svm_max_epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--threads", type=int, default=1)

    parser = _Parser(prog="stedfv", description="Fisher-vector video encoding with space-time pooling.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    _synth_args(p)
    _add(p, "seed", type=int)

    pca = sub.add_parser("pca", help="fit or apply PCA").add_subparsers(dest="action", required=True,
                                                                          parser_class=_Parser)
    p = pca.add_parser("fit", parents=[common], help="fit PCA on sampled descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add(p, "pca_dim", type=int)
    _bool(p, "rootsift")
    _add(p, "sample_count", type=int)
    _add(p, "channel", type=int)
    _add(p, "seed", type=int)
    p = pca.add_parser("apply", parents=[common], help="project one descriptor file")
    p.add_argument("--pca", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="FMAT of projected descriptors")
    _bool(p, "rootsift")

    gmm = sub.add_parser("gmm", help="fit a GMM").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = gmm.add_parser("fit", parents=[common], help="EM on sampled (projected) descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add(p, "pca", help="PCA model to apply first")
    _add(p, "k", type=int)
    _bool(p, "rootsift")
    _add(p, "sample_count", type=int)
    _add(p, "gmm_max_iter", type=int)
    _add(p, "gmm_rel_tol", type=float)
    _bool(p, "sted")
    _add(p, "location_scale", type=float)
    _add(p, "channel", type=int)
    _add(p, "seed", type=int)

    p = sub.add_parser("encode", parents=[common], help="encode every video of a manifest to FMAT")
    p.add_argument("--manifest", required=True)
    p.add_argument("--gmm", nargs="+", required=True, help="one GMM per channel")
    p.add_argument("--pca", nargs="+", default=argparse.SUPPRESS, help="one PCA per channel")
    p.add_argument("--out", required=True)
    _encoding_args(p)
    _bool(p, "rootsift")

    p = sub.add_parser("train", parents=[common], help="train one-vs-all linear SVMs")
    p.add_argument("--features", required=True, help="FMAT rows in manifest order")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model JSON")
    _svm_args(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model or a full pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report JSON (default: standard output only)")
    _add(p, "protocol", choices=["split", "logo"])
    _add(p, "test_groups", help="comma-separated held-out groups (split protocol)")
    _add(p, "model", help="trained model JSON; scores --features instead of training")
    _add(p, "features", help="FMAT rows of the manifest, with --model")
    _add(p, "metric", choices=["macc", "map"])
    _codebook_args(p)
    _encoding_args(p)
    _svm_args(p)
    _add(p, "seed", type=int)

    p = sub.add_parser("dims", parents=[common], help="representation dimension calculator")
    _add(p, "dim", type=int, help="descriptor dimension after PCA")
    _add(p, "k", type=int)
    _add(p, "pyramid")
    _bool(p, "sted")
    _add(p, "channels", type=int)

    p = sub.add_parser("bench", parents=[common], help="generate synthetic data and compare methods")
    p.add_argument("--out", required=True)
    _add(p, "methods", help="comma list: baseline, stp:L, stp-pyramid:L, sted[:scale], grid:SPEC")
    _add(p, "split", choices=["holdout", "logo"])
    _add(p, "test_groups")
    _synth_args(p)
    _codebook_args(p)
    _add(p, "power_alpha", type=float)
    _svm_args(p)
    _add(p, "seed", type=int)
    return parser


# -- settings -------------------------------------------------------------------

def _resolve(ns: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then config-file keys, then explicit flags."""
    explicit = {k: v for k, v in vars(ns).items() if k not in ("config", "threads", "command", "action")}
    file_cfg = {}
    if ns.config:
        try:
            doc = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in doc.items()}
        known = set(defaults) | set(explicit) | _PATH_KEYS
        unknown = set(file_cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return {**defaults, **file_cfg, **explicit}


_PATH_KEYS = {"manifest", "pca", "gmm", "features", "model", "input"}


def _digest(command: str, settings: dict) -> tuple[dict, str]:
    doc = {"command": command, **{k: v for k, v in settings.items() if k not in _UNDIGESTED}}
    return doc, config_digest(doc)


def _write_meta(path, command: str, settings: dict, **extra) -> str:
    doc, digest = _digest(command, settings)
    meta = {"config": doc, "config_digest": digest, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def _pipeline_defaults(base: PipelineConfig) -> dict:
    d = base.to_dict()
    d["k"] = d.pop("K")
    return d


def _pipeline_config(s: dict) -> PipelineConfig:
    names = {f.name for f in fields(PipelineConfig)}
    doc = {k: v for k, v in s.items() if k in names}
    if "k" in s:
        doc["K"] = s["k"]
    return PipelineConfig(**doc)


def _csv(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(str(v) for v in value)
    return tuple(v for v in str(value).split(",") if v)


def _out_path(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- commands -------------------------------------------------------------------

def cmd_synth(ns):
    s = _resolve(ns, asdict(SynthSpec()))
    spec = SynthSpec(**{k: s[k] for k in asdict(SynthSpec())})
    out = Path(ns.out)
    manifest = generate_dataset(spec, out)
    _write_meta(out / "manifest.json", "synth", s)
    print(f"wrote {len(manifest.entries)} videos to {out}")


def _training_points(manifest, s, channel):
    phi, uvw = sample_training_points(manifest, s["sample_count"], s["seed"] + channel,
                                      channel=channel, with_locations=True)
    if s.get("rootsift"):
        phi = rootsift_transform(phi)
    return phi, uvw


def cmd_pca_fit(ns):
    defaults = {"pca_dim": None, "rootsift": False, "sample_count": 256000, "channel": 0, "seed": 0}
    s = _resolve(ns, defaults)
    manifest = load_manifest(s["manifest"])
    phi, _ = _training_points(manifest, s, s["channel"])
    model = pca_fit(phi, s["pca_dim"] or default_output_dim(phi.shape[1]), seed=s["seed"])
    save_pca(model, _out_path(ns.out))
    _write_meta(ns.out, "pca fit", s)
    print(f"pca {model.input_dim} -> {model.output_dim}")


def cmd_pca_apply(ns):
    s = _resolve(ns, {"rootsift": False})
    model = load_pca(s["pca"])
    video = read_video_file(s["input"])
    phi = video.phi.astype(np.float64)
    if s["rootsift"]:
        phi = rootsift_transform(phi)
    save_fmat(pca_transform(model, phi), _out_path(ns.out))
    _write_meta(ns.out, "pca apply", s)


def cmd_gmm_fit(ns):
    defaults = {"pca": None, "k": 256, "rootsift": False, "sample_count": 256000, "gmm_max_iter": 100,
                "gmm_rel_tol": 1e-5, "sted": False, "location_scale": 1.0, "channel": 0, "seed": 0}
    s = _resolve(ns, defaults)
    cfg = GmmTrainConfig(K=s["k"], max_iter=s["gmm_max_iter"], rel_tol=s["gmm_rel_tol"],
                         seed=s["seed"] + s["channel"], sample_count=s["sample_count"])
    manifest = load_manifest(s["manifest"])
    phi, uvw = _training_points(manifest, s, s["channel"])
    if s["pca"]:
        phi = pca_transform(load_pca(s["pca"]), phi)
    if s["sted"]:
        phi = sted_augment(phi, uvw, s["location_scale"])
    model = gmm_fit_em(phi, cfg, threads=ns.threads)
    save_gmm(model, _out_path(ns.out))
    _write_meta(ns.out, "gmm fit", s)
    print(f"gmm K={model.K} dim={model.dim}")


def cmd_encode(ns):
    defaults = {"pca": None, "pyramid": "1x1x1", "sted": False, "location_scale": 1.0,
                "power_alpha": 0.5, "rootsift": False}
    s = _resolve(ns, defaults)
    pcfg = _pipeline_config(s)  # validates STED vs pyramid before any I/O
    gmm_paths = _csv(s["gmm"])
    pca_paths = _csv(s["pca"])
    if pca_paths and len(pca_paths) != len(gmm_paths):
        raise UsageError("give one --pca per --gmm")
    manifest = load_manifest(s["manifest"])
    if manifest.num_channels != len(gmm_paths):
        raise UsageError(f"manifest has {manifest.num_channels} channel(s) but {len(gmm_paths)} GMM(s) given")
    gmms = [load_gmm(p) for p in gmm_paths]
    pcas = [load_pca(p) for p in pca_paths] if pca_paths else [None] * len(gmms)
    rows = encode_manifest(manifest, Codebooks(tuple(pcas), tuple(gmms)), pcfg, ns.threads)
    save_fmat(rows, _out_path(ns.out))
    _write_meta(ns.out, "encode", s, ids=[e.id for e in manifest.entries])
    print(f"encoded {rows.shape[0]} videos, dim {rows.shape[1]}")


def cmd_train(ns):
    s = _resolve(ns, {"C": 100.0, "svm_tol": 1e-6, "svm_max_epochs": 1000})
    pcfg = _pipeline_config(s)
    manifest = load_manifest(s["manifest"])
    X = load_fmat(s["features"])
    if X.shape[0] != len(manifest.entries):
        raise DataError(f"{X.shape[0]} feature rows for {len(manifest.entries)} manifest entries")
    model = svm_train_ova(X, [e.label for e in manifest.entries], pcfg.svm_opts(),
                          label_order=manifest.label_set, threads=ns.threads)
    _, digest = _digest("train", s)
    save_model(model, _out_path(ns.out), digest)
    print(f"trained {len(model.class_labels)} classifiers")


def cmd_eval(ns):
    defaults = {**_pipeline_defaults(PipelineConfig()), "protocol": "split", "test_groups": None,
                "model": None, "features": None}
    s = _resolve(ns, defaults)
    _, digest = _digest("eval", s)
    manifest = load_manifest(s["manifest"])
    if s["model"]:
        if not s["features"]:
            raise UsageError("--model needs --features")
        model = load_model(s["model"])
        X = load_fmat(s["features"])
        if X.shape[0] != len(manifest.entries):
            raise DataError(f"{X.shape[0]} feature rows for {len(manifest.entries)} manifest entries")
        scores = np.atleast_2d(predict_scores(model, X))
        report = score_report(model, scores, [e.label for e in manifest.entries], manifest.label_set,
                              s["metric"], "split")
    else:
        pcfg = _pipeline_config(s)
        if s["protocol"] == "logo":
            report = leave_one_group_out(manifest, pcfg, ns.threads)
        else:
            groups = _csv(s["test_groups"]) or (manifest.groups[0],)
            train, test = holdout_split(manifest, groups)
            if not train.entries or not test.entries:
                raise UsageError("split leaves an empty train or test set")
            report = train_and_evaluate(train, test, pcfg, ns.threads).report
    report.config_digest = digest
    text = json.dumps(report.to_json(), indent=1) + "\n"
    if ns.out:
        _out_path(ns.out).write_text(text, encoding="utf-8")
    print(f"{report.protocol} aggregate {report.aggregate:.6f}")


def cmd_dims(ns):
    s = _resolve(ns, {"dim": None, "k": None, "pyramid": "1x1x1", "sted": False, "channels": 1})
    if s["dim"] is None or s["k"] is None:
        raise UsageError("--dim and --k are required")
    print(representation_dim(s["dim"], s["k"], PyramidSpec.parse(s["pyramid"]), s["sted"], s["channels"]))


def cmd_bench(ns):
    synth_defaults = asdict(SynthSpec())
    defaults = {**synth_defaults, **_pipeline_defaults(DESK_PIPELINE),
                "methods": "baseline,stp:2,sted", "split": "holdout", "test_groups": None}
    s = _resolve(ns, defaults)
    spec = SynthSpec(**{k: s[k] for k in synth_defaults})
    config = ExperimentConfig(_csv(s["methods"]), _pipeline_config(s), s["split"],
                              _csv(s["test_groups"]), tuple(spec.pairs()))
    out = Path(ns.out)
    manifest = generate_dataset(spec, out / "data")
    report = run_experiment(config, manifest, ns.threads)
    _, report.config_digest = _digest("bench", s)

    enc_dir = out / "encodings"
    enc_dir.mkdir(parents=True, exist_ok=True)
    for r in report.results:
        stem = r.method.replace(":", "_").replace(",", "+")
        for i, (train_rows, test_rows) in enumerate(r.encodings):
            for part, rows in (("train", train_rows), ("test", test_rows)):
                path = enc_dir / f"{stem}.fold{i}.{part}.fmat"
                save_fmat(rows, path)
                _write_meta(path, "bench", s)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.table(), encoding="utf-8")
    timings = {r.method: r.encode_seconds for r in report.results}
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n", encoding="utf-8")
    sys.stdout.write(report.table(with_time=True))


_COMMANDS = {
    ("synth", None): cmd_synth,
    ("pca", "fit"): cmd_pca_fit,
    ("pca", "apply"): cmd_pca_apply,
    ("gmm", "fit"): cmd_gmm_fit,
    ("encode", None): cmd_encode,
    ("train", None): cmd_train,
    ("eval", None): cmd_eval,
    ("dims", None): cmd_dims,
    ("bench", None): cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.threads < 1:
        print("stedfv: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    handler = _COMMANDS[(ns.command, getattr(ns, "action", None))]
    try:
        handler(ns)
    except (DataError, OSError) as exc:
        print(f"stedfv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"stedfv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, TypeError, KeyError) as exc:
        print(f"stedfv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
