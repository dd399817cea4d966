from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecea.boxes import decode, encode, iou, iou_matrix, make_anchors, nms
from ecea.checkpoint import Checkpoint, CheckpointError, config_hash, dumps, load, loads, save
from ecea.metrics import average_precision, average_precision_50, extension_coverage

from oracles import brute_ap, brute_nms, random_boxes, ref_iou


# -- iou ---------------------------------------------------------------------

def test_iou_hand_values(caplog):
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou([0, 0, 1, 1], [0, 0.5, 1, 1.5]) == pytest.approx(1 / 3)
    with caplog.at_level(logging.WARNING):
        assert iou([0, 0, 0, 1], [0, 0, 1, 1]) == 0.0
    assert "degenerate" in caplog.text


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 7), random_boxes(rng, 5)
    m = iou_matrix(a, b)
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(ref_iou(a[i], b[j]), abs=1e-12)


# -- nms ---------------------------------------------------------------------

def test_nms_identical_boxes_keep_one():
    assert nms(np.array([[0, 0, 5, 5], [0, 0, 5, 5]]), np.array([0.3, 0.9])).tolist() == [1]


def test_nms_disjoint_keep_all_in_score_order():
    b = np.array([[0, 0, 1, 1], [5, 5, 6, 6], [10, 10, 11, 11]])
    assert nms(b, np.array([0.1, 0.5, 0.3])).tolist() == [1, 2, 0]


def test_nms_ties_break_by_index():
    b = np.array([[0, 0, 1, 1], [5, 5, 6, 6], [0, 0, 1, 1]])
    assert nms(b, np.array([0.5, 0.5, 0.5])).tolist() == [0, 1]


def test_nms_rejects_nonfinite_scores():
    with pytest.raises(ValueError):
        nms(np.zeros((1, 4)) + [0, 0, 1, 1], np.array([np.nan]))


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    b = random_boxes(rng, 10)
    s = rng.uniform(size=10)
    assert nms(b, s, 0.5).tolist() == brute_nms(b, s, 0.5)


# -- anchors and deltas ------------------------------------------------------

def test_anchor_layout():
    a = make_anchors(2, 3, 4, (8.0, 16.0))
    assert a.shape == (12, 4)
    # location (row 1, col 2), second scale
    np.testing.assert_allclose(a[(1 * 3 + 2) * 2 + 1], [6 - 8, 10 - 8, 6 + 8, 10 + 8])


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(1)
    ref, box = random_boxes(rng, 20), random_boxes(rng, 20)
    np.testing.assert_allclose(decode(encode(box, ref), ref), box, atol=1e-10)
    np.testing.assert_allclose(encode(ref, ref), 0.0, atol=1e-12)


# -- AP ----------------------------------------------------------------------

def test_ap_single_correct():
    assert average_precision_50([(0, 0.9, [0, 0, 10, 10])], {0: [[0, 0, 10, 10]]}) == 1.0


def test_ap_false_positive_ranked_first():
    dets = [(0, 0.9, [50, 50, 60, 60]), (0, 0.8, [0, 0, 10, 10])]
    assert average_precision_50(dets, {0: [[0, 0, 10, 10]]}) == pytest.approx(0.5)


def test_ap_absent_without_ground_truth():
    assert average_precision_50([(0, 0.9, [0, 0, 1, 1])], {0: np.zeros((0, 4))}) is None


def test_ap_no_detections_is_zero():
    assert average_precision_50([], {0: [[0, 0, 1, 1]]}) == 0.0


def test_duplicate_detection_is_false_positive():
    dets = [(0, 0.9, [0, 0, 10, 10]), (0, 0.8, [0, 0, 10, 10])]
    gts = {0: [[0, 0, 10, 10], [20, 20, 30, 30]]}
    # recall 0.5 at precision 1, never reaches 1
    assert average_precision_50(dets, gts) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(15))
def test_ap_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    gts = {i: random_boxes(rng, int(rng.integers(0, 3))) for i in range(3)}
    dets = []
    for i in range(3):
        for g in gts[i]:
            if rng.uniform() < 0.7:
                dets.append((i, float(rng.uniform()), g + rng.normal(0, 1.0, 4)))
        for b in random_boxes(rng, int(rng.integers(0, 3))):
            dets.append((i, float(rng.uniform()), b))
    if sum(len(g) for g in gts.values()) == 0:
        assert average_precision_50(dets, gts) is None
    else:
        assert abs(average_precision_50(dets, gts) - brute_ap(dets, gts)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_invariant_under_monotone_score_transform(seed):
    rng = np.random.default_rng(seed)
    gts = {0: random_boxes(rng, 3)}
    dets = [(0, float(rng.uniform()), b) for b in np.concatenate([gts[0] + rng.normal(0, 2, (3, 4)),
                                                                   random_boxes(rng, 3)])]
    warped = [(i, float(np.exp(5 * s) - 3), b) for i, s, b in dets]
    assert average_precision(dets, gts) == average_precision(warped, gts)


# -- extension coverage ------------------------------------------------------

def test_coverage_hand_cases():
    full, vis = [0, 0, 10, 10], [0, 0, 5, 10]
    assert extension_coverage(full, full, vis) == 1.0
    assert extension_coverage(vis, full, vis) == 0.0
    # pred covers the left half of the hidden bottom strip
    assert extension_coverage([0, 0, 10, 5], full, vis) == pytest.approx(0.5)
    assert extension_coverage([3, 3, 4, 4], full, full) is None


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_coverage_monotone_toward_full(a, b):
    lo, hi = min(a, b), max(a, b)
    full = np.array([0.0, 0.0, 20.0, 30.0])
    vis = np.array([0.0, 0.0, 8.0, 12.0])

    def pred(t):
        return vis + t * (full - vis)

    assert extension_coverage(pred(lo), full, vis) <= extension_coverage(pred(hi), full, vis) + 1e-12


# -- checkpoint container ----------------------------------------------------

def _ckpt():
    rng = np.random.default_rng(3)
    return Checkpoint({"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32)},
                      {"a": np.zeros((3, 4))}, {"step": 7})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ck = _ckpt()
    back = load(save(tmp_path / "x.bin", ck))
    for k, v in ck.params.items():
        assert back.params[k].dtype == v.dtype
        assert back.params[k].tobytes() == v.tobytes()
    assert back.optimizer["a"].tobytes() == ck.optimizer["a"].tobytes()
    assert back.meta == {"step": 7}


@pytest.mark.parametrize("cut", [0, 5, 20, -1, -40])
def test_truncated_checkpoint_refused(cut):
    data = dumps(_ckpt())
    with pytest.raises(CheckpointError):
        loads(data[:cut])


def test_corrupted_byte_refused():
    data = bytearray(dumps(_ckpt()))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(data))


def test_version_mismatch_refused():
    import hashlib
    import struct
    data = dumps(_ckpt())
    body = data[:-32]
    body = body[:8] + struct.pack("<I", 99) + body[12:]
    with pytest.raises(CheckpointError, match="version 99"):
        loads(body + hashlib.sha256(body).digest())


def test_config_hash_stable_and_sensitive():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
