import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from carf.eval import (EvalReport, LabelError, binarize, config_hash, evaluate, gt_mask, gt_mask_from_context, iou,
                       write_curve_csv)
from carf.presets import smoke_setup
from carf.rasterizer import render_context
from carf.scene import Gaussian, GaussianScene
from carf.training import TrainConfig, init_model

from oracles import brute_force_weights, iou_enum

masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


@pytest.fixture(scope="module")
def smoke():
    return smoke_setup(0)


def rect(r0, r1, c0, c1, shape=(6, 6)):
    m = np.zeros(shape, dtype=np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


def test_offset_rectangles():
    a, b = rect(0, 2, 0, 4), rect(1, 3, 0, 4)
    assert iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_enum(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_identical_disjoint_empty():
    a = rect(0, 2, 0, 2)
    assert iou(a, a) == 1.0
    assert iou(a, rect(3, 5, 3, 5)) == 0.0
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


@given(masks, masks)
def test_iou_matches_enumeration_and_is_symmetric(a, b):
    assert iou(a, b) == iou_enum(a, b)
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


def test_binarize_is_strict():
    assert binarize(np.array([0.49, 0.5, 0.51])).tolist() == [0, 0, 1]


@given(arrays(np.float64, 20, elements=st.floats(-30, 30)), st.floats(0.1, 10))
def test_threshold_invariance_under_rescaled_squash(logit, scale):
    # sigmoid(s * x) keeps the 0.5-crossing set of sigmoid(x) for any s > 0
    p1 = 1 / (1 + np.exp(-logit))
    p2 = 1 / (1 + np.exp(-scale * logit))
    gt = (logit > 1.0).astype(np.uint8)
    assert iou(binarize(p1), gt) == iou(binarize(p2), gt)


def test_gt_mask_single_on_axis(axis_camera):
    g = Gaussian(mu=(0.0, 0.0, 4.0), scale=(0.05, 0.05, 0.05), rot=(1.0, 0.0, 0.0, 0.0), opacity=0.95,
                 color=(1.0, 0.0, 0.0), label=3)
    scene = GaussianScene(gaussians=[g], bbox=((0.0, 0.0, 4.0), (0.0, 0.0, 4.0)))
    m = gt_mask(axis_camera, scene, 3)
    assert m[16, 16] == 1 and m[0, 0] == 0
    with pytest.raises(LabelError):
        gt_mask(axis_camera, scene, 7)


def test_gt_mask_matches_brute_force(tiny_scene, tiny_cams):
    for cam in tiny_cams:
        W, _ = brute_force_weights(cam, tiny_scene)
        for label in (0, 1, 2):
            cover = W @ (tiny_scene.labels == label).astype(float)
            expect = (cover >= 0.5).reshape(cam.height, cam.width).astype(np.uint8)
            assert np.array_equal(gt_mask(cam, tiny_scene, label), expect)


def oracle_scores_report(setup, target_score=10.0):
    """Evaluate with per-Gaussian scores forced to +-10 by label, squash (1, 0)."""
    from carf.rasterizer import composite_scalar
    table = np.zeros((len(setup.queries), len(setup.test_cams)))
    for qi, q in enumerate(setup.queries):
        m = np.where(setup.scene.labels == q.target_label, target_score, -target_score)
        for vi, ctx in enumerate(setup.test_contexts):
            prob = composite_scalar(ctx, m, (1.0, 0.0)).prob
            table[qi, vi] = iou(binarize(prob), gt_mask_from_context(ctx, setup.scene, q.target_label))
    return table


def test_oracle_scores_reach_high_miou(smoke):
    assert oracle_scores_report(smoke).mean() >= 0.95


def test_random_init_is_poor(smoke):
    cfg = TrainConfig()
    model = init_model(len(smoke.scene), cfg)
    rep = evaluate(model, smoke.scene, smoke.test_cams, smoke.queries, contexts=smoke.test_contexts)
    assert rep.miou < 0.2


def test_report_fields(smoke, tmp_path):
    model = init_model(len(smoke.scene), TrainConfig())
    rep = evaluate(model, smoke.scene, smoke.test_cams[:2], smoke.queries[:1], contexts=smoke.test_contexts[:2],
                   cfg_for_hash={"a": 1}, keep_probs=True)
    assert rep.iou_table.shape == (1, 2)
    assert rep.miou == pytest.approx(float(np.mean(rep.iou_table)))
    assert len(rep.iou_dispersion) == 1 and len(rep.render_ms) == 2
    assert rep.config_hash == config_hash({"a": 1}) and len(rep.config_hash) == 16
    assert set(rep.probs) == {(0, 0), (0, 1)}
    rep.write_json(tmp_path / "e.json")
    rep.write_csv(tmp_path / "e.csv")
    data = json.loads((tmp_path / "e.json").read_text())
    assert data["miou"] == rep.miou
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["query", "view", "iou"] and len(rows) == 3


def test_single_entry_miou_and_dispersion():
    rep = EvalReport(iou_table=np.array([[0.42]]), query_ids=["q"], view_ids=[0], render_ms=[1.0])
    assert rep.miou == 0.42 and rep.iou_dispersion == [0.0]


def test_identical_cameras_zero_dispersion(smoke):
    cams = [smoke.test_cams[0]] * 3
    ctx = [smoke.test_contexts[0]] * 3
    model = init_model(len(smoke.scene), TrainConfig())
    model.params["b_out"].value = np.array(0.0)
    rep = evaluate(model, smoke.scene, cams, smoke.queries, contexts=ctx)
    assert rep.iou_dispersion == [0.0, 0.0, 0.0]


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.permutations(range(4)))
def test_miou_permutation_invariant(vals, perm):
    a = EvalReport(np.array(vals).reshape(2, 2), ["a", "b"], [0, 1], [0.0, 0.0])
    b = EvalReport(np.array(vals)[list(perm)].reshape(2, 2), ["a", "b"], [0, 1], [0.0, 0.0])
    assert a.miou == pytest.approx(b.miou, abs=1e-15)


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [(100, 0.5), (200, 0.75)])
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["iteration", "miou"] and rows[1][0] == "100" and float(rows[2][1]) == 0.75
