import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stedfv.data import (
    BoundsError,
    DatasetManifest,
    FormatError,
    LocalDescriptor,
    ManifestEntry,
    ManifestError,
    NonFiniteError,
    VideoDescriptorSet,
    VideoHeader,
    from_bytes,
    load_manifest,
    normalize_locations,
    read_video_file,
    save_manifest,
    to_bytes,
    write_video_file,
)

from conftest import random_video


def test_empty_file_is_header_only(tmp_path):
    video = VideoDescriptorSet(VideoHeader(320, 240, 10, 5), np.zeros((0, 3)), np.zeros((0, 5)))
    path = tmp_path / "empty.sted"
    write_video_file(video, path)
    assert path.stat().st_size == 24
    back = read_video_file(path)
    assert len(back) == 0
    assert back.header == video.header


def test_one_descriptor_record_width(tmp_path):
    header = VideoHeader(10, 10, 5, 2)
    video = VideoDescriptorSet.from_descriptors(header, [LocalDescriptor(1.0, 2.0, 3.0, np.array([0.5, -0.5]))])
    path = tmp_path / "one.sted"
    write_video_file(video, path)
    assert path.stat().st_size == 24 + 4 * (3 + 2)


def test_byte_layout_little_endian():
    header = VideoHeader(7, 6, 5, 1)
    video = VideoDescriptorSet(header, np.array([[1.0, 2.0, 3.0]]), np.array([[4.5]]))
    raw = to_bytes(video)
    assert raw[:4] == b"STED"
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 7, 6, 5, 1)
    assert struct.unpack_from("<4f", raw, 24) == (1.0, 2.0, 3.0, 4.5)


def test_round_trip_bit_identical(tmp_path, rng):
    video = random_video(rng, m=100, dim=6)
    path = tmp_path / "v.sted"
    write_video_file(video, path)
    back = read_video_file(path)
    assert back == video
    assert to_bytes(back) == path.read_bytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_round_trip_property(m, dim, seed):
    video = random_video(np.random.default_rng(seed), m=m, dim=dim)
    assert from_bytes(to_bytes(video)) == video


def test_bad_magic_rejected():
    raw = bytearray(to_bytes(VideoDescriptorSet(VideoHeader(4, 4, 4, 1), np.zeros((0, 3)), np.zeros((0, 1)))))
    raw[:4] = b"XXXX"
    with pytest.raises(FormatError):
        from_bytes(bytes(raw))


def test_bad_version_and_truncation(rng):
    raw = bytearray(to_bytes(random_video(rng, m=3, dim=2)))
    bad = bytearray(raw)
    bad[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError):
        from_bytes(bytes(bad))
    with pytest.raises(FormatError):
        from_bytes(bytes(raw[:-3]))
    with pytest.raises(FormatError):
        from_bytes(bytes(raw[:10]))


def test_zero_dimension_header_is_format_error():
    raw = struct.pack("<4sIIIII", b"STED", 1, 4, 4, 4, 0)
    with pytest.raises(FormatError):
        from_bytes(raw)


def test_out_of_bounds_rejected():
    header = VideoHeader(10, 10, 5, 1)
    with pytest.raises(BoundsError):
        VideoDescriptorSet(header, np.array([[10.0, 1.0, 1.0]]), np.array([[0.0]]))
    with pytest.raises(BoundsError):
        VideoDescriptorSet(header, np.array([[1.0, 1.0, 4.5]]), np.array([[0.0]]))
    raw = bytearray(to_bytes(VideoDescriptorSet(header, np.array([[1.0, 1.0, 1.0]]), np.array([[0.0]]))))
    raw[24:28] = struct.pack("<f", -1.0)
    with pytest.raises(BoundsError):
        from_bytes(bytes(raw))


def test_non_finite_rejected():
    header = VideoHeader(10, 10, 5, 1)
    with pytest.raises(NonFiniteError):
        VideoDescriptorSet(header, np.array([[1.0, 1.0, 1.0]]), np.array([[np.nan]]))


def test_header_validation():
    with pytest.raises(ValueError):
        VideoHeader(0, 1, 1, 1)


def test_normalize_locations_examples():
    header = VideoHeader(320, 240, 10, 1)
    video = VideoDescriptorSet(header, np.array([[160.0, 0.0, 9.0]]), np.array([[0.0]]))
    u, v, w = normalize_locations(video)[0]
    assert u == 0.5 and v == 0.0 and w == 1.0


def test_single_frame_clip_maps_to_zero():
    header = VideoHeader(8, 8, 1, 1)
    video = VideoDescriptorSet(header, np.array([[1.0, 1.0, 0.0]]), np.array([[0.0]]))
    assert normalize_locations(video)[0, 2] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 500), st.integers(1, 500), st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_normalized_locations_in_unit_cube(m, width, height, frames, seed):
    video = random_video(np.random.default_rng(seed), m=m, dim=1, width=width, height=height, frames=frames)
    uvw = normalize_locations(video)
    assert uvw.shape == (m, 3)
    assert (uvw >= 0).all() and (uvw <= 1).all()


def _manifest_doc():
    return {
        "entries": [
            {"id": "a", "path": "a.sted", "label": "run", "group": "g1"},
            {"id": "b", "path": "b.sted", "label": "walk", "group": "g2"},
        ],
        "labels": ["run", "walk"],
    }


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps(_manifest_doc()))
    m = load_manifest(path)
    assert [e.id for e in m.entries] == ["a", "b"]
    assert m.groups == ["g1", "g2"]
    assert m.resolve("a.sted") == tmp_path / "a.sted"
    save_manifest(m, tmp_path / "m2.json")
    assert load_manifest(tmp_path / "m2.json") == m


def test_manifest_rejects_duplicates_and_unknown_labels():
    doc = _manifest_doc()
    doc["entries"][1]["id"] = "a"
    with pytest.raises(ManifestError, match="duplicate id"):
        DatasetManifest.from_json(doc)
    doc = _manifest_doc()
    doc["entries"][1]["label"] = "jump"
    with pytest.raises(ManifestError, match="unknown label"):
        DatasetManifest.from_json(doc)


def test_manifest_groups_required_for_logo():
    m = DatasetManifest((ManifestEntry("a", "a.sted", "x"),), ("x",))
    with pytest.raises(ManifestError):
        m.require_groups()


def test_manifest_channels():
    doc = _manifest_doc()
    for e in doc["entries"]:
        e["channels"] = [e["path"], e["path"] + ".hof"]
    m = DatasetManifest.from_json(doc)
    assert m.num_channels == 2
    assert m.to_json()["entries"][0]["channels"] == ["a.sted", "a.sted.hof"]
