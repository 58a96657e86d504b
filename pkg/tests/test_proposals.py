import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (iou_frames, multi_top_reference, nms_reference, oic_reference, random_attention,
                     random_scored_intervals)
from pwes.proposals import (MAE, ME, Proposal, classify_by_duration, default_top_set, multi_top_proposals, nms,
                            oic_score, read_proposals, temporal_iou, union_set, video_proposal_sets,
                            write_proposals)


def spans(props):
    return [(p.onset, p.offset) for p in props]


def scored(on, off, s):
    return Proposal(on, off, phi=np.array([s, 0.0]))


# -- multi-top ----------------------------------------------------------------------

def test_multi_top_examples():
    assert spans(multi_top_proposals([0.9, 0.8, 0.1, 0.7], 8, [2])) == [(0, 15)]
    assert spans(multi_top_proposals([0.9, 0.1, 0.8, 0.1], 8, [2])) == [(0, 7), (16, 23)]


def test_union_keeps_smallest_k():
    props = multi_top_proposals([0.9, 0.1, 0.8, 0.7, 0.1], 4, [1, 2, 3])
    assert [(p.onset, p.offset, p.k_src) for p in props] == [(0, 3, 1), (8, 11, 2), (8, 15, 3)]


def test_all_snippets_selected_gives_whole_video():
    A = np.random.default_rng(0).random(13)
    assert spans(multi_top_proposals(A, 5, [13])) == [(0, 64)]


def test_top_value_out_of_range():
    with pytest.raises(ValueError):
        multi_top_proposals([0.5, 0.4], 8, [3])
    with pytest.raises(ValueError):
        multi_top_proposals([0.5, 0.4], 8, [0])


@pytest.mark.parametrize("seed", range(30))
def test_multi_top_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    A = random_attention(rng, 20)
    got = [(p.onset, p.offset, p.k_src) for p in multi_top_proposals(A, 8, range(1, 11))]
    assert got == multi_top_reference(A, 8, range(1, 11))


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 40), g=st.integers(1, 10), seed=st.integers(0, 10**6))
def test_proposals_stay_inside_video(T, g, seed):
    A = np.random.default_rng(seed).random(T)
    for p in multi_top_proposals(A, g, default_top_set(T)):
        assert 0 <= p.onset <= p.offset < T * g and p.length % g == 0


def test_default_top_set():
    assert default_top_set(100) == [5, 10, 15, 20, 25, 30, 35, 40, 45, 50]
    # rungs stay aligned for short videos, duplicates included
    assert default_top_set(10) == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]
    assert default_top_set(1) == [1] * 10


# -- outer-inner contrast -----------------------------------------------------------------

def test_oic_examples():
    S = np.full((10, 2), 0.4)
    np.testing.assert_allclose(oic_score(Proposal(16, 31), S, 8), [0.0, 0.0])
    S = np.full((10, 1), 0.1)
    S[4:8] = 0.9
    np.testing.assert_allclose(oic_score(Proposal(32, 63), S, 8), [0.8])


def test_oic_margin_rounds_half_up():
    S = np.arange(20, dtype=float)[:, None]
    # two snippets: 0.25 * 2 = 0.5 rounds up to a one-snippet margin
    np.testing.assert_allclose(oic_score(Proposal(10, 11), S, 1), [10.5 - 10.5])
    # six snippets: 1.5 rounds up to 2
    np.testing.assert_allclose(oic_score(Proposal(6, 11), S, 1), [8.5 - np.mean([4, 5, 12, 13])])


def test_oic_whole_video_uses_inner_mean():
    S = np.random.default_rng(1).random((5, 2))
    np.testing.assert_allclose(oic_score(Proposal(0, 19), S, 4), S.mean(0))
    with pytest.raises(ValueError):
        oic_score(Proposal(0, 20), S, 4)


@pytest.mark.parametrize("seed", range(30))
def test_oic_matches_mean_difference(seed):
    rng = np.random.default_rng(seed)
    T, g = int(rng.integers(1, 30)), int(rng.integers(1, 9))
    S = rng.random((T, 2))
    a = int(rng.integers(0, T))
    b = int(rng.integers(a, T))
    ref = oic_reference((a, b), S.tolist(), 0.25)
    np.testing.assert_allclose(oic_score(Proposal(a * g, (b + 1) * g - 1), S, g), ref, rtol=0, atol=1e-12)


# -- NMS --------------------------------------------------------------------------------

def test_nms_examples():
    keep = nms([scored(0, 9, 0.5), scored(0, 9, 0.9)], 0.01)
    assert len(keep) == 1 and keep[0].score == 0.9
    disjoint = [scored(0, 9, 0.5), scored(20, 29, 0.6), scored(40, 49, 0.1)]
    assert len(nms(disjoint, 0.01)) == 3


def test_nms_ties_prefer_earlier_then_longer():
    keep = nms([scored(5, 9, 0.5), scored(0, 9, 0.5), scored(0, 4, 0.5)], 0.01)
    assert spans(keep) == [(0, 9)]


@pytest.mark.parametrize("seed", range(30))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    items = random_scored_intervals(rng, 20)
    got = nms([scored(*it) for it in items], 0.01)
    assert [(p.onset, p.offset, p.score) for p in got] == nms_reference(items, 0.01)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), threshold=st.sampled_from([0.0, 0.01, 0.3, 0.7]))
def test_nms_output_is_antichain(seed, threshold):
    rng = np.random.default_rng(seed)
    keep = nms([scored(*it) for it in random_scored_intervals(rng, 15)], threshold)
    for i, p in enumerate(keep):
        for q in keep[i + 1:]:
            assert temporal_iou(p, q) <= threshold
            assert temporal_iou(p, q) == iou_frames((p.onset, p.offset), (q.onset, q.offset))


# -- classification and sets ---------------------------------------------------------------

@pytest.mark.parametrize("frames, fps, label", [(8, 30, ME), (24, 30, MAE), (96, 200, ME), (100, 200, MAE),
                                                (15, 30, MAE)])
def test_classify_by_duration(frames, fps, label):
    assert classify_by_duration(Proposal(0, frames - 1), fps) == label


def test_video_sets_are_scored_and_suppressed():
    rng = np.random.default_rng(3)
    A, S_hat = rng.random(30), rng.random((30, 2))
    sets = video_proposal_sets(A, S_hat, 8, 30.0, default_top_set(30))
    assert sorted(sets) == list(range(10))
    for props in sets.values():
        assert all(p.phi is not None and p.label in (ME, MAE) for p in props)
        assert all(temporal_iou(p, q) <= 0.01 for i, p in enumerate(props) for q in props[i + 1:])
    merged = union_set(sets)
    assert all(temporal_iou(p, q) <= 0.01 for i, p in enumerate(merged) for q in merged[i + 1:])


def test_proposal_file_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    per_video = {vid: video_proposal_sets(rng.random(20), rng.random((20, 2)), 4, 30.0, [2, 5])
                 for vid in ("b", "a")}
    write_proposals(tmp_path / "p.jsonl", per_video)
    back = read_proposals(tmp_path / "p.jsonl")
    assert sorted(back) == ["a", "b"]
    for vid in per_video:
        for key, props in per_video[vid].items():
            assert [(p.onset, p.offset, p.label, p.k_src) for p in back[vid][key]] == \
                [(p.onset, p.offset, p.label, p.k_src) for p in props]
            for p, q in zip(back[vid][key], props):
                np.testing.assert_array_equal(p.phi, q.phi)
    write_proposals(tmp_path / "q.jsonl", back)
    assert (tmp_path / "q.jsonl").read_text() == (tmp_path / "p.jsonl").read_text()
