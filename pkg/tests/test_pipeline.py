import numpy as np
import pytest

import stedfv.pipeline as pl
from stedfv.data import DatasetManifest, ManifestEntry
from stedfv.pipeline import (
    PipelineConfig,
    config_digest,
    holdout_split,
    leave_one_group_out,
    train_and_evaluate,
    with_overrides,
)
from stedfv.synth import SynthSpec, generate_dataset

# fewer components than phase prototypes keeps the classes far apart in FV space
SMALL = PipelineConfig(K=3, sample_count=3000, gmm_max_iter=30)


@pytest.fixture(scope="module")
def easy(tmp_path_factory):
    spec = SynthSpec(num_classes=3, videos_per_class=6, descriptors_per_video=60, dim=4,
                     reversed_pairs=False, noise_sigma=1.0, seed=5)
    return generate_dataset(spec, tmp_path_factory.mktemp("easy"))


def test_logo_separable_is_perfect(easy):
    report = leave_one_group_out(easy, SMALL)
    assert report.aggregate == 1.0
    assert report.protocol == "logo" and len(report.folds) == 2
    assert report.aggregate == np.mean([v for _, v in report.per_class])
    assert report.config_digest == SMALL.digest()


def test_logo_never_trains_on_held_out(easy, monkeypatch):
    fitted, svm_rows = [], []
    fit, svm = pl.fit_codebooks, pl.svm_train_ova

    def spy_fit(train, *a, **k):
        fitted.append({e.group for e in train.entries})
        return fit(train, *a, **k)

    def spy_svm(features, labels, *a, **k):
        svm_rows.append(len(labels))
        return svm(features, labels, *a, **k)

    monkeypatch.setattr(pl, "fit_codebooks", spy_fit)
    monkeypatch.setattr(pl, "svm_train_ova", spy_svm)
    leave_one_group_out(easy, SMALL)
    assert fitted == [{"g01"}, {"g00"}]
    per_group = {g: sum(e.group == g for e in easy.entries) for g in easy.groups}
    assert svm_rows == [per_group["g01"], per_group["g00"]]


def test_identical_groups_give_identical_folds(easy):
    half = [e for e in easy.entries if e.group == "g00"]
    twin = [ManifestEntry(e.id + "_twin", e.path, e.label, "g01") for e in half]
    manifest = DatasetManifest(tuple(half) + tuple(twin), easy.label_set, easy.root)
    report = leave_one_group_out(manifest, SMALL)
    a, b = report.folds
    assert a.aggregate == b.aggregate and a.per_class == b.per_class


def test_logo_needs_two_groups(easy):
    one = easy.subset([e for e in easy.entries if e.group == "g00"])
    with pytest.raises(ValueError):
        leave_one_group_out(one, SMALL)


def test_unseen_test_label_raises(easy):
    train = easy.subset([e for e in easy.entries if e.label != "class02"])
    with pytest.raises(ValueError, match="never seen"):
        train_and_evaluate(train, easy, SMALL)


def test_split_map_metric_and_dims(easy):
    train, test = holdout_split(easy, ["g01"])
    res = train_and_evaluate(train, test, with_overrides(SMALL, metric="map", pyramid="1x1x1,1x1x2"))
    assert res.report.aggregate == 1.0
    assert res.representation_dim == 2 * 2 * 3 * 3
    assert res.scores.shape == (len(test.entries), 3)


def test_sted_pipeline_dimension(easy):
    train, test = holdout_split(easy, ["g01"])
    res = train_and_evaluate(train, test, with_overrides(SMALL, sted=True))
    assert res.representation_dim == 2 * (2 + 3) * 3


def test_config_round_trip_and_digest():
    cfg = PipelineConfig(K=8, pyramid="1x1x1,2x2x1")
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == PipelineConfig.from_dict(cfg.to_dict()).digest()
    assert cfg.digest() != with_overrides(cfg, C=1.0).digest()
    assert config_digest({"b": 1, "a": 2}) == config_digest({"a": 2, "b": 1})
    with pytest.raises(ValueError):
        PipelineConfig.from_dict({"K": 4, "bogus": 1})
    with pytest.raises(ValueError, match="STED"):
        PipelineConfig(sted=True, pyramid="2x2x2")
    assert with_overrides(cfg, K=None).K == 8
