import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pwes.errors import ConfigurationError, DataError, FormatError, ShapeError, SynthesisError
from pwes.tensors_io import (MAGIC, DatasetManifest, ManifestEntry, PointAnnotation, SynthConfig, VideoRecord,
                             annotation_snippet_indices, decode_video, derive_video_labels, encode_video,
                             gt_classes, load_dataset, load_video, point_label_matrix, sample_point_labels,
                             synth_dataset, write_dataset, write_video)


def make_record(L=80, g=8, D=16, anns=(), gts=None, T=None, seed=0, vid="v0"):
    rng = np.random.default_rng(seed)
    T = L // g if T is None else T
    return VideoRecord(vid, rng.normal(size=(T, D)), rng.normal(size=(T, D)), L, 30.0, g, list(anns), gts)


def me(psi):
    return PointAnnotation.of_class(psi, 0, 2)


def mae(psi):
    return PointAnnotation.of_class(psi, 1, 2)


def raw_container(header: dict, raw: np.ndarray, flow: np.ndarray) -> bytes:
    head = json.dumps(header).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + raw.astype("<f4").tobytes() + flow.astype("<f4").tobytes()


# -- container round trips ----------------------------------------------------

def test_container_gives_T_from_L(tmp_path):
    rec = make_record(L=80, g=8, D=1024)
    write_video(rec, tmp_path / "a.pwes")
    back = load_video(tmp_path / "a.pwes")
    assert back.T == 10
    np.testing.assert_array_equal(back.features_raw, rec.features_raw)


def test_trailing_frames_dropped():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(10, 1024))
    header = {"video_id": "x", "L": 81, "fps": 30.0, "g": 8, "T": 10, "D": 1024, "annotations": []}
    rec = decode_video(raw_container(header, feats, feats))
    assert rec.T == 10 and rec.frame_count == 81


def test_flow_row_mismatch_is_shape_error():
    rng = np.random.default_rng(2)
    header = {"video_id": "x", "L": 80, "fps": 30.0, "g": 8, "T": 10, "D": 4, "annotations": []}
    with pytest.raises(ShapeError):
        decode_video(raw_container(header, rng.normal(size=(10, 4)), rng.normal(size=(9, 4))))
    with pytest.raises(ShapeError):
        make_record(L=80, g=8, T=9)


def test_missing_header_field_named():
    header = {"video_id": "x", "L": 8, "fps": 30.0, "g": 8, "T": 1, "annotations": []}
    with pytest.raises(FormatError, match="'D'"):
        decode_video(raw_container(header, np.zeros((1, 2)), np.zeros((1, 2))))


def test_bad_magic_and_bad_json():
    with pytest.raises(FormatError):
        decode_video(b"NOPE" + b"\0" * 20)
    head = b"{not json"
    with pytest.raises(FormatError):
        decode_video(MAGIC + struct.pack("<I", len(head)) + head)


def test_nan_features_rejected():
    feats = np.zeros((2, 3))
    feats[1, 2] = np.nan
    header = {"video_id": "x", "L": 16, "fps": 30.0, "g": 8, "T": 2, "D": 3, "annotations": []}
    with pytest.raises(DataError):
        decode_video(raw_container(header, feats, np.zeros((2, 3))))


def test_annotation_outside_video_rejected():
    with pytest.raises(DataError):
        make_record(L=80, g=8, anns=[me(80)])


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 12), D=st.integers(1, 6), g=st.integers(1, 9), extra=st.integers(0, 8),
       seed=st.integers(0, 10**6), with_gt=st.booleans())
def test_encode_decode_is_byte_stable(T, D, g, extra, seed, with_gt):
    extra = extra % g
    rng = np.random.default_rng(seed)
    L = T * g + extra
    anns = [PointAnnotation.of_class(int(rng.integers(0, T * g)), int(rng.integers(0, 2)), 2)]
    gts = [(0, T * g - 1)] if with_gt else None
    rec = VideoRecord("vid", rng.normal(size=(T, D)), rng.normal(size=(T, D)), L, 25.0, g, anns, gts)
    blob = encode_video(rec)
    assert encode_video(decode_video(blob)) == blob


# -- labels -------------------------------------------------------------------

@pytest.mark.parametrize("anns, expected", [
    ([me(120), mae(900), mae(1500)], [1, 1, 1]),
    ([], [0, 0, 1]),
    ([me(40), me(500)], [1, 0, 1]),
])
def test_video_labels(anns, expected):
    assert derive_video_labels(anns, 2).tolist() == expected


@given(st.lists(st.tuples(st.integers(0, 999), st.integers(0, 1)), max_size=8), st.randoms())
def test_video_labels_idempotent_and_order_free(items, rnd):
    anns = [PointAnnotation.of_class(p, c, 2) for p, c in items]
    y = derive_video_labels(anns, 2)
    shuffled = list(anns)
    rnd.shuffle(shuffled)
    assert derive_video_labels(shuffled, 2).tolist() == y.tolist()
    assert derive_video_labels(anns + anns, 2).tolist() == y.tolist()


def test_point_annotation_validation():
    with pytest.raises(DataError):
        PointAnnotation(3, [1, 1, 0])
    with pytest.raises(DataError):
        PointAnnotation(3, [0, 0, 1])  # background
    assert PointAnnotation(3, [0, 1, 0]).class_index == 1


@pytest.mark.parametrize("psis, expected", [([17, 43], [2, 5]), ([16, 23], [2]), ([0], [0])])
def test_annotation_snippet_indices(psis, expected):
    rec = make_record(L=80, g=8, anns=[me(p) for p in psis])
    idx, _ = annotation_snippet_indices(rec)
    assert idx.tolist() == expected


def test_same_snippet_labels_merge():
    rec = make_record(L=80, g=8, anns=[me(16), mae(23)])
    Y = point_label_matrix(rec)
    assert Y[2].tolist() == [1, 1, 0]
    assert Y.sum() == 2


def test_gt_classes_follow_annotations():
    rec = make_record(L=800, g=8, anns=[mae(20), me(300)], gts=[(16, 31), (296, 303), (500, 599)])
    # the last interval has no annotation: 100 frames at 30 fps is a macro-expression
    assert gt_classes(rec) == [1, 0, 1]


# -- point-label sampling -----------------------------------------------------

def test_random_point_inside_interval():
    anns = sample_point_labels([(100, 101)], [0], "random", seed=3)
    assert anns[0].psi in (100, 101)


def test_apex_is_midpoint():
    assert sample_point_labels([(200, 260)], [1], "apex")[0].psi == 230


def test_sampling_deterministic():
    spans = [(0, 50), (70, 71), (100, 400)]
    a = sample_point_labels(spans, [1, 0, 1], "random", seed=11)
    b = sample_point_labels(spans, [1, 0, 1], "random", seed=11)
    assert [x.psi for x in a] == [x.psi for x in b]


def test_empty_interval_rejected():
    with pytest.raises(DataError):
        sample_point_labels([(10, 9)], [0], "random")


# -- synthesis ----------------------------------------------------------------

def test_synthesis_deterministic():
    cfg = SynthConfig(n_videos=40, t_range=(100, 100), dim=32, sigma=0.5)
    a, ma = synth_dataset(cfg, 7)
    b, mb = synth_dataset(cfg, 7)
    assert [encode_video(r) for r in a] == [encode_video(r) for r in b]
    assert ma.to_json() == mb.to_json()


def test_background_density_bounds_foreground():
    cfg = SynthConfig(n_videos=20, t_range=(100, 100), bg_density=0.9)
    recs, _ = synth_dataset(cfg, 0)
    for r in recs:
        assert sum((b - a + 1) // r.snippet_len for a, b in r.gt_intervals) <= 10


def test_noise_free_foreground_equals_class_mean():
    means = np.random.default_rng(5).normal(size=(3, 8))
    cfg = SynthConfig(n_videos=1, t_range=(40, 40), dim=8, sigma=0.0, class_means=means.tolist(),
                      durations=((1, 1), (6, 6)), intervals_per_video=(1, 1), class_probs=(0.0, 1.0),
                      n_subjects=1)
    (rec,), _ = synth_dataset(cfg, 0)
    (on, off), = rec.gt_intervals
    rows = range(on // rec.snippet_len, off // rec.snippet_len + 1)
    assert len(rows) == 6
    for t in range(rec.T):
        expect = means[1] if t in rows else means[2]
        np.testing.assert_allclose(rec.features_raw[t], expect.astype(np.float32))
        np.testing.assert_allclose(rec.features_flow[t], expect.astype(np.float32))


def test_intensity_profile_blends_toward_background():
    means = np.random.default_rng(6).normal(size=(3, 8))
    cfg = SynthConfig(n_videos=1, t_range=(40, 40), dim=8, sigma=0.0, class_means=means.tolist(),
                      durations=((1, 1), (6, 6)), intervals_per_video=(1, 1), class_probs=(0.0, 1.0),
                      n_subjects=1, intensity_floor=0.25)
    (rec,), _ = synth_dataset(cfg, 0)
    (on, _), = rec.gt_intervals
    a = on // rec.snippet_len
    # weight of the class mean at each interval snippet
    w = [(rec.features_raw[a + i] - means[2]) @ (means[1] - means[2]) / np.sum((means[1] - means[2]) ** 2)
         for i in range(6)]
    expected = 0.25 + 0.75 * np.sin(np.pi * (np.arange(6) + 0.5) / 6)
    np.testing.assert_allclose(w, expected, atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), mode=st.sampled_from(["random", "apex"]))
def test_synthetic_annotations_inside_one_interval(seed, mode):
    recs, manifest = synth_dataset(SynthConfig(n_videos=5, supervision=mode, n_subjects=2), seed)
    for r in recs:
        spans = sorted(r.gt_intervals)
        assert all(b0 < a1 for (_, b0), (a1, _) in zip(spans, spans[1:]))
        assert len(r.annotations) == len(spans)
        for ann in r.annotations:
            assert sum(a <= ann.psi <= b for a, b in spans) == 1
        assert r.T == r.frame_count // r.snippet_len


def test_infeasible_spec_raises():
    with pytest.raises(SynthesisError):
        synth_dataset(SynthConfig(n_videos=1, t_range=(20, 20), durations=((1, 3), (10, 12)),
                                  class_probs=(0.0, 1.0), bg_density=0.8), 0)


def test_dataset_round_trip(tmp_path):
    recs, manifest = synth_dataset(SynthConfig(n_videos=6, n_subjects=3), 4)
    path = write_dataset(recs, manifest, tmp_path)
    m2, recs2 = load_dataset(path)
    assert m2.to_json() == manifest.to_json()
    assert [encode_video(r) for r in recs2] == [encode_video(r) for r in recs]
    assert sorted({v.subject_id for v in m2.videos}) == ["s00", "s01", "s02"]


def test_manifest_invariants():
    with pytest.raises(FormatError):
        DatasetManifest("d", [ManifestEntry("a", "s1", "a.pwes"), ManifestEntry("a", "s2", "b.pwes")], 30.0, 8)
    with pytest.raises(FormatError):
        DatasetManifest("d", [ManifestEntry("a", "", "a.pwes")], 30.0, 8)


def test_unknown_supervision_mode():
    with pytest.raises(ConfigurationError):
        sample_point_labels([(0, 5)], [0], "onset")
