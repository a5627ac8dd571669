import csv
import json

import numpy as np
import pytest

from carf.camera import NoAdmissiblePairError, ring_cameras
from carf.diffcore import CheckpointError, Tape
from carf.eval import gt_mask_from_context
from carf.presets import smoke_queries
from carf.rasterizer import render_context
from carf.referring import toy_embed
from carf.training import (PRESETS, TrainConfig, Trainer, build_loss, checkpoint_roundtrip, full_loss_gradcheck,
                           init_model, load_checkpoint, preset, train, view_rng)


@pytest.fixture
def setup(tiny_scene, tiny_cams):
    queries = smoke_queries(8)
    ctx = [render_context(c, tiny_scene) for c in tiny_cams]
    masks = {(qi, vi): gt_mask_from_context(c, tiny_scene, q.target_label)
             for qi, q in enumerate(queries) for vi, c in enumerate(ctx)}
    return tiny_scene, tiny_cams, queries, masks, ctx


def make_trainer(setup, **kw):
    scene, cams, queries, masks, ctx = setup
    cfg = TrainConfig(d=8, hidden=12, **kw)
    return Trainer(init_model(len(scene), cfg), scene, cams, queries, masks, cfg, ctx)


def params_bytes(trainer):
    return {k: p.value.tobytes() for k, p in trainer.model.params.items()}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.iterations, cfg.lr_field, cfg.lr_cam, cfg.d, cfg.tau, cfg.alpha_view) == (2000, 2.5e-3, 1e-4, 16, 10.0,
                                                                                          0.5)
    assert (cfg.lambda1, cfg.lambda2, cfg.num_views_per_iter, cfg.min_overlap) == (1.0, 1.0, 2, 0.30)
    assert cfg.gfce_enabled and cfg.itpvs_enabled and cfg.bce_reduction == "mean" and cfg.fg_source == "f"


def test_config_json_round_trip(tmp_path):
    cfg = TrainConfig(iterations=7, gfce_enabled=False, tau=25.0)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert TrainConfig.load(path) == cfg


def test_config_rejects_unknown_and_invalid():
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"iterations": 1, "bogus": 2})
    with pytest.raises(ValueError):
        TrainConfig(alpha_view=1.5)
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"gfce_enabled": "maybe"})
    assert TrainConfig.from_dict({"gfce_enabled": "false"}).gfce_enabled is False


def test_presets():
    assert preset("full").d == 128 and preset("full").iterations == 30000
    assert preset("desk") == TrainConfig()
    assert set(PRESETS) == {"desk", "full"}
    with pytest.raises(ValueError):
        preset("huge")


# ---------------------------------------------------------------------------
# gradient integrity
# ---------------------------------------------------------------------------

def test_full_loss_gradcheck_all_groups(setup, rng):
    tr = make_trainer(setup)
    # give the camera path a non-zero output so its gradients are exercised
    tr.model.params["cam_W2"].value = rng.normal(0, 0.3, size=tr.model.params["cam_W2"].shape)
    tr.model.params["cam_b2"].value = rng.normal(0, 0.3, size=8)
    rep = full_loss_gradcheck(tr, query_index=1)
    assert rep.passed, rep.summary()
    assert set(rep.max_rel_err) == set(tr.model.PARAM_ORDER)


@pytest.mark.parametrize("kw", [{"fg_source": "g"}, {"selection": "relevancy"}, {"bce_reduction": "sum"},
                                {"num_views_per_iter": 3}, {"cam_fusion": "post"}, {"cam_fusion": "language"}])
def test_gradcheck_variants(setup, rng, kw):
    tr = make_trainer(setup, **kw)
    tr.model.params["cam_W2"].value = rng.normal(0, 0.3, size=tr.model.params["cam_W2"].shape)
    rep = full_loss_gradcheck(tr, query_index=0)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------------------
# bitwise equivalences
# ---------------------------------------------------------------------------

def test_alpha_one_matches_single_view(setup):
    paired = make_trainer(setup, alpha_view=1.0)
    single = make_trainer(setup, itpvs_enabled=False)
    for _ in range(30):
        a, b = paired.step(), single.step()
        assert a.views[0] == b.views[0] and len(a.views) == 2 and len(b.views) == 1
        assert a.l_total == b.l_total
        assert params_bytes(paired) == params_bytes(single)


def test_frozen_camera_output_matches_disabled(setup):
    frozen = make_trainer(setup, freeze_cam_output=True)
    off = make_trainer(setup, gfce_enabled=False)
    for _ in range(30):
        a, b = frozen.step(), off.step()
        assert a.views == b.views
        assert np.float64(a.l_total).tobytes() == np.float64(b.l_total).tobytes()
        assert a.per_view == b.per_view
    assert np.all(frozen.model.params["cam_W2"].value == 0.0)


def test_view_independent_scores_when_disabled(setup, rng):
    tr = make_trainer(setup, gfce_enabled=False)
    tr.model.params["cam_W2"].value = rng.normal(size=tr.model.params["cam_W2"].shape)
    from carf.pipeline import view_scores
    tape = Tape()
    P = tr.model.leaves(tape)
    _, ms = view_scores(tape, P, tr.mu_n, tr.queries[0], [tr.descs[0], tr.descs[2]], False)
    assert ms[0].value.tobytes() == ms[1].value.tobytes()
    _, ms = view_scores(tape, P, tr.mu_n, tr.queries[0], [tr.descs[0], tr.descs[2]], True)
    assert not np.array_equal(ms[0].value, ms[1].value)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sampled_pairs_admissible(setup):
    tr = make_trainer(setup)
    admissible = {(p.a, p.b) for p in tr.pairs}
    for it in range(50):
        views = tr.sample_views(view_rng(0, it))
        assert views in admissible


def test_three_views_distinct(setup):
    tr = make_trainer(setup, num_views_per_iter=3)
    for it in range(30):
        v = tr.sample_views(view_rng(0, it))
        assert len(v) == 3 and len(set(v)) == 3


def test_itpvs_off_is_single_view(setup):
    tr = make_trainer(setup, itpvs_enabled=False, num_views_per_iter=4)
    assert len(tr.sample_views(view_rng(0, 0))) == 1


def test_no_admissible_pair_raises(setup):
    from carf.camera import look_at
    scene, cams, queries, masks, ctx = setup
    toward = look_at((0.0, -2.0, 0.5), (0.0, 0.0, 0.3), fx=20.0, fy=20.0, width=16, height=16)
    away = look_at((0.0, -2.0, 0.5), (0.0, -4.0, 0.3), fx=20.0, fy=20.0, width=16, height=16)
    m2 = {(qi, vi): masks[(qi, 0)] for qi in range(3) for vi in range(2)}
    cfg = TrainConfig(d=8, hidden=12)
    with pytest.raises(NoAdmissiblePairError, match="min_overlap"):
        Trainer(init_model(len(scene), cfg), scene, [toward, away], queries, m2, cfg)
    single = cfg.replace(itpvs_enabled=False)
    Trainer(init_model(len(scene), single), scene, [toward, away], queries, m2, single)


def test_missing_mask_rejected(setup):
    scene, cams, queries, masks, ctx = setup
    partial = dict(masks)
    partial.pop((1, 2))
    cfg = TrainConfig(d=8, hidden=12)
    with pytest.raises(ValueError, match="query 1, view 2"):
        Trainer(init_model(len(scene), cfg), scene, cams, queries, partial, cfg, ctx)


def test_query_width_mismatch(setup):
    scene, cams, queries, masks, ctx = setup
    cfg = TrainConfig(d=8, hidden=12)
    with pytest.raises(ValueError, match="width"):
        Trainer(init_model(len(scene), cfg), scene, cams, [toy_embed(["x"], 4)], masks, cfg, ctx)


# ---------------------------------------------------------------------------
# runs, checkpoints, determinism
# ---------------------------------------------------------------------------

def test_zero_iterations_keeps_init(setup, tmp_path):
    scene, cams, queries, masks, ctx = setup
    cfg = TrainConfig(d=8, hidden=12, iterations=0)
    rec = train(init_model(len(scene), cfg), scene, cams, queries, cfg, masks, out_dir=tmp_path, contexts=ctx)
    loaded, _, it = load_checkpoint(rec.checkpoint)
    fresh = init_model(len(scene), cfg)
    assert it == 0
    for k in fresh.PARAM_ORDER:
        assert loaded.params[k].value.tobytes() == fresh.params[k].value.tobytes()
    rows = list(csv.reader(open(rec.loss_csv)))
    assert rows == [["iter", "l_bce_a", "l_bce_b", "l_2view", "l_con", "l_total", "grad_norm"]]


def test_loss_decreases(setup):
    tr = make_trainer(setup, lr_field=1e-2)
    first = [tr.step().l_total for _ in range(3)]
    for _ in range(150):
        last = tr.step().l_total
    assert last < first[0]


def test_breakdown_invariant(setup):
    tr = make_trainer(setup, lambda1=2.0, lambda2=0.5)
    for _ in range(5):
        br = tr.step()
        assert br.l_total == pytest.approx(2.0 * br.l_2view + 0.5 * br.l_con, abs=1e-12)
        assert br.l_2view == pytest.approx(0.5 * br.l_bce_a + 0.5 * br.l_bce_b, abs=1e-12)
        assert br.l_bce_a >= 0 and br.l_con >= 0


def test_checkpoint_round_trip_fresh(setup, tmp_path):
    tr = make_trainer(setup)
    tr.step()
    model, state = checkpoint_roundtrip(tr.model, tmp_path / "a.carf", tr.optimizer)
    for k in model.PARAM_ORDER:
        assert model.params[k].value.tobytes() == tr.model.params[k].value.tobytes()
    assert state.step_count == 1
    for k in state.m:
        assert state.m[k].tobytes() == tr.optimizer.state.m[k].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.carf"
    path.write_bytes(b"NOPE" + b"\x01\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_split_run_matches_uninterrupted(setup, tmp_path):
    full = make_trainer(setup)
    losses_full = [full.step().l_total for _ in range(20)]

    first = make_trainer(setup)
    losses = [first.step().l_total for _ in range(8)]
    first.save(tmp_path / "mid.carf")
    resumed = make_trainer(setup)
    resumed.restore(tmp_path / "mid.carf")
    assert resumed.iteration == 8
    losses += [resumed.step().l_total for _ in range(12)]
    assert losses == losses_full
    assert params_bytes(resumed) == params_bytes(full)


def test_two_runs_bit_identical(setup, tmp_path):
    scene, cams, queries, masks, ctx = setup
    cfg = TrainConfig(d=8, hidden=12, iterations=12, checkpoint_every=6)
    recs = [train(init_model(len(scene), cfg), scene, cams, queries, cfg, masks, out_dir=tmp_path / n)
            for n in ("a", "b")]
    for name in ("loss.csv", "final.carf", "ckpt_000006.carf", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(recs[0].losses) == 12 and len(recs[0].epoch_seconds) == 4


@pytest.mark.parametrize("itpvs", [False, True])
@pytest.mark.parametrize("gfce", [False, True])
def test_flag_grid_runs(setup, itpvs, gfce, tiny_cams):
    scene, cams, queries, masks, ctx = setup
    cfg = TrainConfig(d=8, hidden=12, iterations=6, itpvs_enabled=itpvs, gfce_enabled=gfce, eval_every=3)
    rec = train(init_model(len(scene), cfg), scene, cams, queries, cfg, masks, contexts=ctx, test_cams=cams[:2])
    assert len(rec.losses) == 6 and 0.0 <= rec.eval_summary["miou"] <= 1.0
    assert [i for i, _ in rec.curve] == [3, 6]
    assert all(len(b.views) == (2 if itpvs else 1) for b in rec.losses)


def test_run_json_written(setup, tmp_path):
    scene, cams, queries, masks, ctx = setup
    cfg = TrainConfig(d=8, hidden=12, iterations=3)
    train(init_model(len(scene), cfg), scene, cams, queries, cfg, masks, out_dir=tmp_path, test_cams=cams[:1])
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["config"]["iterations"] == 3 and "miou" in run["eval_summary"]
    assert (tmp_path / "eval.json").exists() and (tmp_path / "eval.csv").exists()
