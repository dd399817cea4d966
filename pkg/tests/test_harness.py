from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from ecea import autograd as ag
from ecea.attention import EAConfig
from ecea.autograd import Tensor
from ecea.boxes import iou, make_anchors
from ecea.data import (SplitSpec, export_dataset, generate_part_whole_dataset, make_template, read_pnm,
                       render_glyph)
from ecea.errors import ConfigError, DimensionError, DivergenceError
from ecea.fusion import FusedFeatures, FusionConfig
from ecea.gradcheck import grad_check
from ecea.losses import RPNTargets, ROITargets, assign_roi, assign_rpn, loss_total
from ecea.model import (Detector, DetectorConfig, decouple_gradient, roi_features, roi_head, rpn_forward,
                        select_proposals, toy_backbone)
from ecea.train import (SGD, TrainConfig, clone_detector, detection_loss, load_detector_state,
                        run_two_stage, save_detector, train_stage)

TINY_EA = EAConfig(channels=8, points=2, heads=2, layers=1)
TINY_SPEC = SplitSpec(base_per_class=3, test_per_class=2, probe_per_class=2, image_size=32)


def tiny_train(**kw) -> TrainConfig:
    base = dict(fusion=FusionConfig(ea=TINY_EA), base_steps=3, novel_steps=2, batch_size=2, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def tiny_detector(seed=0, dtype=np.float64, **kw) -> Detector:
    cfg = DetectorConfig(fusion=FusionConfig(ea=TINY_EA), num_classes=TINY_SPEC.num_classes, **kw)
    return Detector.create(cfg, TINY_SPEC.all_classes, seed=seed, dtype=dtype)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_part_whole_dataset(TINY_SPEC, 0)


# -- dataset -----------------------------------------------------------------

def test_dataset_is_deterministic():
    a = generate_part_whole_dataset(TINY_SPEC, 5)
    b = generate_part_whole_dataset(TINY_SPEC, 5)
    for name, sa in a.splits().items():
        sb = b.splits()[name]
        assert len(sa) == len(sb)
        for x, y in zip(sa, sb):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.boxes.tobytes() == y.boxes.tobytes()
    c = generate_part_whole_dataset(TINY_SPEC, 6)
    assert a.base_train[0].image.tobytes() != c.base_train[0].image.tobytes()


def test_full_visibility_mask_fits_box():
    ds = generate_part_whole_dataset(SplitSpec(base_per_class=20, test_per_class=5), 1)
    checked = 0
    for s in ds.base_train + ds.novel_test + ds.base_test:
        if s.visibility[0] == 1.0:
            ys, xs = np.nonzero(s.masks[0])
            mbox = [ys.min(), xs.min(), ys.max() + 1, xs.max() + 1]
            assert iou(mbox, s.boxes[0]) >= 0.95
            checked += 1
    assert checked > 20


def test_split_counts_and_visibility():
    for K in (1, 5):
        ds = generate_part_whole_dataset(replace(TINY_SPEC, shots=K), 0)
        for c in TINY_SPEC.novel_classes:
            assert sum(int(s.classes[0]) == c for s in ds.novel_train) == K
        assert len(ds.novel_train) == K * len(TINY_SPEC.novel_classes)
    ds = generate_part_whole_dataset(SplitSpec(base_per_class=30, test_per_class=2), 2)
    vis = np.array([s.visibility[0] for s in ds.base_train])
    assert vis.min() >= 0.4 and vis.max() == 1.0
    assert all(s.visibility[0] <= 0.5 for s in ds.novel_train)
    assert all(s.visibility[0] == 1.0 for s in ds.novel_test)
    assert all(s.visibility[0] < 1.0 for s in ds.novel_probe)


def test_novel_train_uses_one_fixed_view_per_class():
    ds = generate_part_whole_dataset(replace(TINY_SPEC, shots=5), 0)
    for c in TINY_SPEC.novel_classes:
        t = make_template(c)
        for s in (s for s in ds.novel_train if s.classes[0] == c):
            # the drawn mask equals a fresh render of exactly the head parts
            m = render_glyph(np.zeros_like(s.image), t, s.boxes[0], t.head)
            assert np.array_equal(m, s.masks[0])


def test_boxes_cover_full_extent_even_when_partial():
    ds = generate_part_whole_dataset(SplitSpec(base_per_class=20, test_per_class=2), 3)
    for s in ds.base_train:
        b, v = s.boxes[0], s.visible_boxes[0]
        assert v[0] >= math.floor(b[0]) and v[2] <= math.ceil(b[2])
        assert v[1] >= math.floor(b[1]) and v[3] <= math.ceil(b[3])
        assert 0 <= b[0] < b[2] <= 64 and 0 <= b[1] < b[3] <= 64


def test_class_templates_are_distinct():
    sig = {(tuple(p.box for p in make_template(c).parts), tuple(p.texture for p in make_template(c).parts))
           for c in range(8)}
    assert len(sig) == 8
    assert all(3 <= len(make_template(c).parts) <= 5 for c in range(8))


@pytest.mark.parametrize("kw", [
    dict(base_classes=(0,), novel_classes=(1,)),
    dict(base_classes=(0, 1), novel_classes=()),
    dict(base_classes=(0, 1, 2), novel_classes=(2, 3)),
    dict(shots=0),
    dict(mode="nonsense"),
    dict(image_size=40),
])
def test_bad_split_spec_rejected(kw):
    with pytest.raises(ConfigError):
        SplitSpec(**kw)


def test_more_shots_than_views_rejected():
    with pytest.raises(ConfigError, match="distinct novel views"):
        generate_part_whole_dataset(replace(TINY_SPEC, shots=10_000), 0)


def test_gfsod_balanced_set():
    ds = generate_part_whole_dataset(replace(TINY_SPEC, mode="gfsod", shots=2), 0)
    counts = {c: sum(int(s.classes[0]) == c for s in ds.balanced_train) for c in TINY_SPEC.all_classes}
    assert set(counts.values()) == {2}
    assert ds.finetune_set() is ds.balanced_train


def test_export_roundtrip(tmp_path, tiny_ds):
    out = export_dataset(tiny_ds, tmp_path / "ds")
    img = read_pnm(out / "base_train" / "00000.ppm")
    np.testing.assert_array_equal(img, np.rint(tiny_ds.base_train[0].image * 255).astype(np.uint8))
    rows = (out / "boxes.csv").read_text().strip().splitlines()
    n = sum(len(v) for k, v in tiny_ds.splits().items() if k != "balanced_train")
    assert len(rows) == n + 1
    assert rows[0] == "image,class,y1,x1,y2,x2,visibility,split"


# -- backbone ----------------------------------------------------------------

def test_backbone_shapes():
    det = tiny_detector()
    b = toy_backbone(Tensor(np.zeros((2, 3, 64, 64))), det.params.backbone)
    assert b.s3.shape == (2, 16, 16, 16)
    assert b.s4.shape == (2, 32, 8, 8)
    assert b.s5.shape == (2, 64, 4, 4)
    u = toy_backbone(Tensor(np.zeros((3, 64, 48))), det.params.backbone)
    assert u.s5.shape == (64, 4, 3)


def test_backbone_zero_image_zero_bias():
    det = tiny_detector()
    b = toy_backbone(Tensor(np.zeros((1, 3, 32, 32))), det.params.backbone)
    for s in (b.s3, b.s4, b.s5):
        assert np.all(s.data == 0)


def test_backbone_rejects_bad_size():
    with pytest.raises(DimensionError):
        toy_backbone(Tensor(np.zeros((1, 3, 40, 32))), tiny_detector().params.backbone)


@pytest.mark.parametrize("kernel", [2, 3])
def test_backbone_gradient(kernel):
    det = tiny_detector(backbone_kernel=kernel)
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(size=(1, 3, 32, 32)), requires_grad=True)
    for t in det.params.backbone.values():
        t.data = t.data + 0.01 * rng.standard_normal(t.shape)
    params = list(det.params.backbone.values())

    def f(*_):
        b = toy_backbone(x, det.params.backbone)
        return b.s3.sum() + (b.s4 * b.s4).mean() + b.s5.sum()

    rep = grad_check(f, [x] + params, max_coords=30, tol=1e-4)
    assert rep.passed, str(rep)


# -- rpn ---------------------------------------------------------------------

def _fused(det, images):
    return det.features(Tensor(images))


def test_rpn_zero_heads_return_anchors():
    det = tiny_detector()
    for t in det.params.rpn.values():
        t.data = np.zeros_like(t.data)
    img = np.random.default_rng(0).uniform(size=(1, 3, 32, 32))
    anchors = det.anchors(32, 32)
    out, props = rpn_forward(_fused(det, img), anchors, det.params.rpn, det.cfg, (32, 32), top_k=500)
    assert np.all(out.objectness == 0.5)
    assert np.all(out.deltas.data == 0)
    p = props[0]
    # all scores tie: proposals follow anchor index among the survivors of suppression
    assert np.all(np.diff(p.anchor_index) > 0)
    np.testing.assert_allclose(p.boxes, np.clip(anchors[p.anchor_index], 0, 32))


def test_rpn_topk_descending_and_stable():
    det = tiny_detector()
    img = np.random.default_rng(1).uniform(size=(1, 3, 32, 32))
    out, props = rpn_forward(_fused(det, img), det.anchors(32, 32), det.params.rpn, det.cfg, (32, 32), top_k=10)
    s = props[0].scores
    assert np.all(np.diff(s) <= 0)
    # force ties between two far-apart anchors
    out.logits.data[0] = 0.0
    out.logits.data[0, [40, 7]] = 3.0
    p = select_proposals(out, 0, det.cfg, (32, 32), 2)
    assert p.anchor_index.tolist() == [7, 40]


def test_anchor_count_matches_head():
    det = tiny_detector()
    out, _ = rpn_forward(_fused(det, np.zeros((1, 3, 32, 32))), det.anchors(32, 32), det.params.rpn,
                         det.cfg, (32, 32))
    assert out.logits.shape == (1, 8 * 8 * 3)
    with pytest.raises(DimensionError):
        rpn_forward(_fused(det, np.zeros((1, 3, 32, 32))), make_anchors(4, 4, 8), det.params.rpn, det.cfg, (32, 32))


# -- roi head ----------------------------------------------------------------

def test_roi_scores_are_distributions():
    det = tiny_detector()
    fused = _fused(det, np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    props = [np.array([[2, 2, 20, 20], [0, 5, 31, 30]]), np.array([[4, 4, 10, 12]])]
    out = roi_head(fused, props, det.params.roi, det.cfg)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)
    assert out.image_index.tolist() == [0, 0, 1]


def test_roi_crop_of_constant_map_is_constant():
    cfg = tiny_detector().cfg
    fmap = Tensor(np.full((1, 5, 8, 8), 2.5))
    h, *_ = roi_features(fmap, [np.array([[0, 0, 32, 32], [3, 7, 9, 30], [30, 30, 31, 31]])], cfg)
    assert np.all(h.data == 2.5)


def test_roi_degenerate_proposals_skipped(caplog):
    det = tiny_detector()
    fused = _fused(det, np.zeros((1, 3, 32, 32)))
    with caplog.at_level(logging.WARNING):
        out = roi_head(fused, [np.array([[2, 2, 2, 9], [1, 1, 9, 9], [5, 5, 4, 8]])], det.params.roi, det.cfg)
    assert out.skipped == 2
    assert len(out.boxes) == 1
    assert "skipped 2" in caplog.text


def test_roi_gradient():
    det = tiny_detector()
    rng = np.random.default_rng(2)
    fmap = Tensor(rng.standard_normal((1, 24, 8, 8)), requires_grad=True)
    fused = FusedFeatures(fmap, 8)
    props = [np.array([[1.3, 2.2, 20.7, 25.1], [6.0, 3.5, 30.0, 17.2]])]
    params = list(det.params.roi.values())
    w = rng.standard_normal((2, det.cfg.num_classes + 1))

    def f(*_):
        out = roi_head(fused, props, det.params.roi, det.cfg)
        return (ag.log_softmax(out.logits, axis=1) * Tensor(w)).sum() + (out.deltas * out.deltas).sum()

    rep = grad_check(f, [fmap] + params, max_coords=40, tol=1e-4)
    assert rep.passed, str(rep)


# -- decoupling --------------------------------------------------------------

def _upstream_grad(det, img, head, c):
    fused = _fused(det, img)
    fused.map.retain_grad()
    if head == "rpn":
        out, _ = rpn_forward(fused, det.anchors(32, 32), det.params.rpn, det.cfg, (32, 32), eta=c)
        loss = (out.logits * out.logits).sum() + out.deltas.sum()
    else:
        out = roi_head(fused, [np.array([[2, 3, 20, 28], [5, 1, 30, 12]])], det.params.roi, det.cfg, gamma=c)
        loss = (out.logits * out.logits).sum() + out.deltas.sum()
    loss.backward()
    grads = {k: None if t.grad is None else t.grad.copy() for k, t in det.params.named_tensors().items()}
    for t in det.params.named_tensors().values():
        t.grad = None
    return fused.map.grad.copy(), grads


@pytest.mark.parametrize("head", ["rpn", "roi"])
def test_decouple_scales_upstream_exactly(head):
    det = tiny_detector()
    img = np.random.default_rng(3).uniform(size=(1, 3, 32, 32))
    g1, p1 = _upstream_grad(det, img, head, 1.0)
    for c in (0.5, 0.75, 0.01):
        gc, pc = _upstream_grad(det, img, head, c)
        assert np.array_equal(gc, g1 * c)
    g0, p0 = _upstream_grad(det, img, head, 0.0)
    assert np.all(g0 == 0)
    for k, g in p0.items():
        if k.startswith(("backbone", "ecea")):
            assert g is None or np.all(g == 0), k
        if k.startswith(head):
            assert np.array_equal(g, p1[k]), k


def test_decouple_forward_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    assert decouple_gradient(x, 0.3).data.tobytes() == x.data.tobytes()
    assert decouple_gradient(x, None) is x
    with pytest.raises(ValueError):
        decouple_gradient(x, 1.5)


def test_decouple_one_matches_undecoupled_training(tiny_ds):
    traces = []
    for c in (1.0, None):
        det = tiny_detector(seed=4)
        opt = SGD(det.params.named_tensors(), 0.01, 0.9, 5e-5)
        rng = np.random.default_rng(9)
        trace = []
        for step in range(3):
            opt.zero_grad()
            lb = detection_loss(det, tiny_ds.base_train[step * 2:step * 2 + 2], 1.0, c, c, rng, 1)
            lb.total.backward()
            opt.step(10.0)
            trace.append(lb.total.item())
        traces.append(trace)
    assert traces[0] == traces[1]


# -- loss --------------------------------------------------------------------

def test_rpn_assignment_hand_case():
    anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 12], [0, 5, 10, 15], [20, 20, 30, 30]], dtype=float)
    t = assign_rpn(anchors, [np.array([[0, 0, 10, 10.5]])])
    # IoUs: 0.952, 0.875, 0.35, 0 -> pos, pos, ignored, neg
    assert t.labels[0].tolist() == [1, 1, -1, 0]
    t2 = assign_rpn(anchors, [np.array([[20, 20, 40, 40]])])
    # best IoU 0.25 < 0.7 yet the GT keeps its best anchor
    assert t2.labels[0].tolist() == [0, 0, 0, 1]


def test_assignment_is_deterministic():
    rng = np.random.default_rng(0)
    anchors = make_anchors(8, 8, 4)
    gt = [np.array([[3.0, 4.0, 20.0, 25.0]])]
    a = assign_rpn(anchors, gt, np.random.default_rng(1))
    b = assign_rpn(anchors, gt, np.random.default_rng(1))
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.deltas, b.deltas)
    assert (a.labels >= 0).sum() <= 64
    r1 = assign_roi(rng.uniform(0, 30, (10, 4)).cumsum(axis=1) / 2, gt[0], np.array([3]))
    r2 = assign_roi(np.random.default_rng(0).uniform(0, 30, (10, 4)).cumsum(axis=1) / 2, gt[0], np.array([3]))
    assert np.array_equal(r1.labels, r2.labels)


def test_roi_assignment_threshold():
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    props = np.array([[0, 0, 10, 10], [0, 0, 10, 20], [0, 0, 10, 21]], dtype=float)
    t = assign_roi(props, gt, np.array([4]))
    assert t.labels.tolist() == [4, 4, 0]   # IoU 1, 0.5, 0.476
    np.testing.assert_allclose(t.deltas[0], 0)


def _perfect_case(lam):
    labels = np.array([[1, 0, -1, 0]])
    rpn_deltas_t = np.array([[[0.1, -0.2, 0.3, 0.0]] * 4])
    rpn_logits = Tensor(np.where(labels == 1, 40.0, -40.0), requires_grad=True)
    rpn_deltas = Tensor(rpn_deltas_t.copy(), requires_grad=True)
    roi_labels = np.array([0, 2, 1])
    roi_logits = np.zeros((3, 4))
    roi_logits[np.arange(3), roi_labels] = 40.0
    roi_d_t = np.array([[0, 0, 0, 0], [0.5, 0.1, -0.1, 0.2], [0.3, 0.3, 0.3, 0.3]])
    return loss_total(rpn_logits, rpn_deltas, Tensor(roi_logits, requires_grad=True),
                      Tensor(roi_d_t.copy(), requires_grad=True),
                      RPNTargets(labels, rpn_deltas_t), ROITargets(roi_labels, roi_d_t), lam)


def test_perfect_predictions_hit_analytic_floor():
    lb = _perfect_case(1.0)
    assert lb.rpn_obj.item() <= 1e-6 and lb.rpn_box.item() == 0.0 and lb.roi_box.item() == 0.0
    # CE floor with a logit margin of 40 over 3 other classes
    assert lb.roi_cls.item() == pytest.approx(math.log1p(3 * math.exp(-40.0)), rel=1e-12)
    assert lb.rpn_obj.item() == pytest.approx(math.log1p(math.exp(-40.0)), rel=1e-12)


def test_loss_linear_in_lambda():
    l0 = _perfect_case(0.0)
    for a in (0.5, 2.0, 3.0):
        la = _perfect_case(a)
        assert la.total.item() - l0.total.item() == pytest.approx(a * la.roi.item(), rel=1e-12, abs=1e-300)


def test_no_positives_gives_zero_box_terms():
    logits = Tensor(np.zeros((1, 3)), requires_grad=True)
    deltas = Tensor(np.ones((1, 3, 4)), requires_grad=True)
    lb = loss_total(logits, deltas, Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 4))),
                    RPNTargets(np.zeros((1, 3), dtype=int), np.zeros((1, 3, 4))),
                    ROITargets(np.zeros(2, dtype=int), np.zeros((2, 4))), 1.0)
    assert lb.rpn_box.item() == 0.0 and lb.roi_box.item() == 0.0
    assert lb.rpn_obj.item() == pytest.approx(math.log(2))


def _shared_grads(det, batch, lam):
    rng = np.random.default_rng(0)
    fw = {}
    lb = detection_loss(det, batch, lam, 1.0, 1.0, rng, 0, forward=fw)
    fw["fused"].map.retain_grad()
    lb.total.backward()
    out = fw["fused"].map.grad.copy()
    roi_grads = {k: (None if t.grad is None else t.grad.copy()) for k, t in det.params.roi.items()}
    for t in det.params.named_tensors().values():
        t.grad = None
    return out, roi_grads


def test_lambda_zero_and_doubling(tiny_ds):
    det = tiny_detector(seed=1)
    batch = tiny_ds.base_train[:2]
    g0, r0 = _shared_grads(det, batch, 0.0)
    g1, _ = _shared_grads(det, batch, 1.0)
    g2, _ = _shared_grads(det, batch, 2.0)
    assert all(g is None or np.all(g == 0) for g in r0.values())
    roi1, roi2 = g1 - g0, g2 - g0
    assert np.abs(roi1).max() > 0
    np.testing.assert_allclose(roi2, 2 * roi1, rtol=1e-9, atol=1e-12 * np.abs(roi1).max())


def test_every_parameter_gets_gradient(tiny_ds):
    det = tiny_detector(seed=2)
    # nonzero offset weights so every sampling path is live
    for k, t in det.params.named_tensors().items():
        if "w_offset" in k:
            t.data = 0.05 * np.random.default_rng(0).standard_normal(t.shape)
    lb = detection_loss(det, tiny_ds.base_train[:3], 1.0, 1.0, 1.0, np.random.default_rng(0), 2)
    lb.total.backward()
    dead = [k for k, t in det.params.named_tensors().items() if t.grad is None or not np.any(t.grad)]
    assert not dead


# -- two-stage training ------------------------------------------------------

def test_zero_novel_steps_keeps_base():
    r = run_two_stage(tiny_train(novel_steps=0), TINY_SPEC, evaluate_stages=False)
    a, b = r.base.params.state(), r.fsod.params.state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert r.fsod is not r.base


def test_freeze_policy_holds():
    r = run_two_stage(tiny_train(), TINY_SPEC, evaluate_stages=False)
    a, b = r.base.params.state(), r.fsod.params.state()
    for k in a:
        if k.startswith("backbone"):
            assert a[k].tobytes() == b[k].tobytes(), k
    assert any(a[k].tobytes() != b[k].tobytes() for k in a if k.startswith("roi"))
    assert any(a[k].tobytes() != b[k].tobytes() for k in a if k.startswith("ecea"))
    # requires_grad restored after the stage
    assert all(t.requires_grad for t in r.fsod.params.named_tensors().values())


def test_same_seed_same_everything(tmp_path):
    r1 = run_two_stage(tiny_train(seed=3), TINY_SPEC, out_dir=tmp_path / "a")
    r2 = run_two_stage(tiny_train(seed=3), TINY_SPEC, out_dir=tmp_path / "b")
    assert r1.loss_rows == r2.loss_rows
    assert r1.metrics["novel"].to_dict() == r2.metrics["novel"].to_dict()
    assert (tmp_path / "a/ckpt/fsod.bin").read_bytes() == (tmp_path / "b/ckpt/fsod.bin").read_bytes()


def test_checkpoint_roundtrip_of_trained_model(tmp_path, tiny_ds):
    r = run_two_stage(tiny_train(), TINY_SPEC, dataset=tiny_ds, out_dir=tmp_path, evaluate_stages=False)
    fresh = tiny_detector(seed=123)
    load_detector_state(r.checkpoints["fsod"], fresh)
    a, b = r.fsod.params.state(), fresh.params.state()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    imgs = np.stack([s.image for s in tiny_ds.novel_test])
    for x, y in zip(r.fsod.detect(imgs), fresh.detect(imgs)):
        assert x.boxes.tobytes() == y.boxes.tobytes() and x.scores.tobytes() == y.scores.tobytes()


def test_fresh_model_roundtrip(tmp_path):
    det = tiny_detector(seed=5)
    path = save_detector(tmp_path / "m.bin", det)
    other = tiny_detector(seed=6)
    load_detector_state(path, other)
    assert all(det.params.state()[k].tobytes() == v.tobytes() for k, v in other.params.state().items())


def test_truncated_checkpoint_leaves_model_untouched(tmp_path):
    det = tiny_detector(seed=5)
    path = save_detector(tmp_path / "m.bin", det)
    path.write_bytes(path.read_bytes()[:-100])
    other = tiny_detector(seed=6)
    before = other.params.state()
    with pytest.raises(ValueError):
        load_detector_state(path, other)
    assert all(before[k].tobytes() == v.tobytes() for k, v in other.params.state().items())


@pytest.mark.filterwarnings("ignore:overflow encountered")
@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_divergence_aborts_with_last_good_checkpoint(tmp_path, tiny_ds):
    det = tiny_detector(seed=0)
    start = det.params.state()
    cfg = tiny_train(lr=1e30, grad_clip=1e300, base_steps=5)
    with pytest.raises(DivergenceError) as ei:
        train_stage(det, tiny_ds.base_train, cfg, "base", np.random.default_rng(0), tmp_path)
    assert ei.value.checkpoint is not None and ei.value.checkpoint.exists()
    # nothing good was recorded after the first step, so the start state is restored
    assert all(start[k].tobytes() == v.tobytes() for k, v in det.params.state().items())
    restored = tiny_detector(seed=9)
    load_detector_state(ei.value.checkpoint, restored)
    assert all(start[k].tobytes() == v.tobytes() for k, v in restored.params.state().items())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(base_eta=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(lam=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(freeze_novel=("spine",))


def test_clone_is_independent():
    det = tiny_detector()
    c = clone_detector(det)
    c.params.roi["cls.b"].data += 1
    assert not np.array_equal(c.params.roi["cls.b"].data, det.params.roi["cls.b"].data)
