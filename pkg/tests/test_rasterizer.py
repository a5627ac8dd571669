import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carf.camera import Camera
from carf.diffcore import NumericalError, ParamTensor, gradcheck
from carf.rasterizer import (DEFAULT_RASTER, RenderedImage, composite_rgb, composite_scalar,
                             composite_scalar_backward, composite_weights, photometric_loss, project_splats,
                             render_context)
from carf.scene import ClusterSpec, Gaussian, GaussianScene, SceneSpec, generate_scene

from oracles import brute_force_weights


def cam32(**kw):
    base = dict(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32, R=np.eye(3), t=np.zeros(3))
    base.update(kw)
    return Camera(**base)


def make_scene(items):
    gs = [Gaussian(mu=tuple(mu), scale=tuple(s), rot=(1.0, 0.0, 0.0, 0.0), opacity=op, color=col, label=0)
          for mu, s, op, col in items]
    mu = np.array([x.mu for x in gs]) if gs else np.zeros((0, 3))
    lo = tuple(mu.min(axis=0)) if gs else (0.0, 0.0, 0.0)
    hi = tuple(mu.max(axis=0)) if gs else (0.0, 0.0, 0.0)
    return GaussianScene(gaussians=gs, bbox=(lo, hi))


def random_scene(seed, n=20):
    rng = np.random.default_rng(seed)
    spec = SceneSpec(clusters=[ClusterSpec((0.0, 0.0, 0.0), 0.25, n, (0.5, 0.5, 0.5), scale=0.12)])
    return generate_scene(spec, int(rng.integers(1 << 30)))


def looking_cam(width=16):
    from carf.camera import look_at
    return look_at((0.0, -2.0, 0.8), (0.0, 0.0, 0.0), fx=width * 1.2, fy=width * 1.2, width=width, height=width)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_isotropic_on_axis_cov2d():
    s, z = 0.05, 4.0
    scene = make_scene([((0.0, 0.0, z), (s, s, s), 0.5, (1, 1, 1))])
    sp_ = project_splats(cam32(), scene)[0]
    expect = np.diag([(100 * s / z) ** 2 + 0.3, (100 * s / z) ** 2 + 0.3])
    assert np.allclose(sp_.cov2d, expect, atol=1e-12)
    assert np.allclose(sp_.cov2d @ sp_.inv_cov2d, np.eye(2), atol=1e-12)


def test_depth_order_and_tie_break():
    scene = make_scene([((0, 0, 5.0), (0.1,) * 3, 0.5, (1, 1, 1)),
                        ((0, 0, 2.0), (0.1,) * 3, 0.5, (1, 1, 1)),
                        ((0.1, 0, 2.0), (0.1,) * 3, 0.5, (1, 1, 1))])
    splats = project_splats(cam32(), scene)
    assert [s.index for s in splats] == [1, 2, 0]
    assert [s.z for s in splats] == [2.0, 2.0, 5.0]


def test_behind_camera_absent():
    scene = make_scene([((0, 0, -3.0), (0.1,) * 3, 0.5, (1, 1, 1)), ((0, 0, 3.0), (0.1,) * 3, 0.5, (1, 1, 1))])
    assert [s.index for s in project_splats(cam32(), scene)] == [1]


def test_bbox_clipped_to_image():
    scene = make_scene([((0.1, 0.0, 3.0), (0.6,) * 3, 0.9, (1, 1, 1))])
    x0, x1, y0, y1 = project_splats(cam32(), scene)[0].bbox_px
    assert 0 <= x0 <= x1 <= 31 and 0 <= y0 <= y1 <= 31


# ---------------------------------------------------------------------------
# compositing values
# ---------------------------------------------------------------------------

def tiny_point(opacity, z=4.0):
    # very small footprint: only the center pixel passes the 1/255 floor
    return ((0.0, 0.0, z), (1e-4,) * 3, opacity, (1.0, 0.0, 0.0))


def test_single_splat_value():
    scene = make_scene([tiny_point(0.5)])
    ctx = render_context(cam32(), scene)
    r = composite_scalar(ctx, np.array([2.0]))
    assert r.logit[16, 16] == pytest.approx(1.0, abs=1e-15)
    assert r.prob[16, 16] == pytest.approx(1 / (1 + math.exp(-1.0)), abs=1e-15)
    dm, _, _ = composite_scalar_backward(r, grad_logit=np.where(np.arange(32 * 32).reshape(32, 32) == 16 * 32 + 16,
                                                                 1.0, 0.0))
    assert dm[0] == pytest.approx(0.5, abs=1e-15)


def test_two_colocated_splats():
    scene = make_scene([tiny_point(0.5), tiny_point(0.5, z=4.5)])
    r = composite_scalar(render_context(cam32(), scene), np.array([1.0, 0.0]))
    assert r.logit[16, 16] == pytest.approx(0.5, abs=1e-15)
    assert r.ctx.pixel_contribs(16, 16) == [(0, 0.5), (1, 0.25)]


def test_occluded_back_splat_gets_zero_gradient():
    front = ((0.0, 0.0, 2.0), (10.0,) * 3, 1.0, (1, 1, 1))
    back = ((0.0, 0.0, 6.0), (10.0,) * 3, 1.0, (1, 1, 1))
    scene = make_scene([front, front, back])
    r = composite_scalar(render_context(cam32(), scene), np.array([0.3, 0.1, 0.7]))
    dm, _, _ = composite_scalar_backward(r, grad_logit=np.ones((32, 32)))
    # two 0.99 layers leave T = 1e-4, so the back splat trips the early stop
    assert dm[2] == 0.0


def test_empty_scene_all_zero():
    ctx = render_context(cam32(), make_scene([]))
    img = composite_rgb(ctx, np.zeros((0, 3)))
    assert np.all(img.rgb == 0.0) and img.rgb.shape == (32, 32, 3)


def test_non_finite_score_names_index():
    ctx = render_context(cam32(), make_scene([tiny_point(0.5), tiny_point(0.4, 5.0)]))
    with pytest.raises(NumericalError, match="Gaussian 1"):
        composite_scalar(ctx, np.array([0.0, np.nan]))


def test_backward_requires_context():
    r = composite_scalar(render_context(cam32(), make_scene([tiny_point(0.5)])), np.array([1.0]))
    r.ctx = None
    with pytest.raises(ValueError):
        composite_scalar_backward(r, grad_logit=np.ones((32, 32)))


def test_red_center_pixel():
    scene = make_scene([tiny_point(0.9)])
    img = composite_rgb(render_context(cam32(), scene), scene.colors)
    assert img.rgb[16, 16].tolist() == pytest.approx([0.9, 0.0, 0.0], abs=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_weights_match_brute_force(seed):
    scene = random_scene(seed)
    cam = looking_cam(16)
    ctx = render_context(cam, scene)
    oracle, t_final = brute_force_weights(cam, scene)
    assert np.max(np.abs(ctx.weights.toarray() - oracle)) < 1e-12
    assert np.max(np.abs(ctx.t_final - t_final)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_transmittance_telescopes(seed):
    scene = random_scene(seed)
    ctx = render_context(looking_cam(24), scene)
    total = ctx.weight_sum + ctx.t_final
    assert np.all(total <= 1.0 + 1e-9)
    assert np.all(ctx.weight_sum >= 0.0)


def test_telescoping_exact_without_early_stop():
    from carf.rasterizer import RasterConfig
    cfg = RasterConfig(t_min=0.0)
    scene = random_scene(4)
    cam = looking_cam(16)
    ctx = render_context(cam, scene, cfg)
    assert np.max(np.abs(ctx.weight_sum + ctx.t_final - 1.0)) < 1e-9


@given(st.integers(0, 1000))
@settings(max_examples=15)
def test_weights_never_exceed_incoming_light(seed):
    scene = random_scene(seed % 11, n=40)
    ctx = render_context(looking_cam(12), scene)
    W, T = ctx.weights, ctx.t_final.ravel()
    for p in range(T.size):
        assert math.fsum(W.data[W.indptr[p]:W.indptr[p + 1]].tolist() + [T[p]]) <= 1.0


@given(st.integers(0, 1000))
@settings(max_examples=15)
def test_convex_bound(seed):
    scene = random_scene(seed % 7)
    ctx = render_context(looking_cam(12), scene)
    m = np.random.default_rng(seed).uniform(0, 1, size=len(scene))
    logit = composite_scalar(ctx, m).logit
    assert logit.min() >= 0.0 and logit.max() <= 1.0 + 1e-12


def test_rgb_channels_equal_scalar_runs():
    scene = random_scene(5)
    ctx = render_context(looking_cam(16), scene)
    img = composite_rgb(ctx, scene.colors)
    for c in range(3):
        assert np.array_equal(img.rgb[..., c], composite_scalar(ctx, scene.colors[:, c]).logit)
    assert img.rgb.max() <= 1.0 + 1e-9


def test_parallel_bitwise_equals_sequential():
    scene = random_scene(6, n=60)
    cam = looking_cam(32)
    splats = project_splats(cam, scene)
    seq = composite_weights(splats, scene.opacity, 32, 32, len(scene), threads=1)
    for threads in (2, 3, 7):
        par = composite_weights(splats, scene.opacity, 32, 32, len(scene), threads=threads)
        assert np.array_equal(seq.weights.indptr, par.weights.indptr)
        assert np.array_equal(seq.weights.indices, par.weights.indices)
        assert seq.weights.data.tobytes() == par.weights.data.tobytes()
        assert seq.t_final.tobytes() == par.t_final.tobytes()


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_composite_backward_gradcheck(seed):
    scene = random_scene(seed)
    ctx = render_context(looking_cam(16), scene)
    rng = np.random.default_rng(seed)
    m = ParamTensor("m", rng.normal(size=len(scene)))
    s = ParamTensor("s", np.array(1.3))
    b = ParamTensor("b", np.array(-0.5))
    target = (rng.random(256) < 0.3).astype(float)

    def loss(t):
        logit = t.composite(ctx, t.param(m))
        return t.bce(t.sigmoid(t.scalar_affine(logit, t.param(s), t.param(b))), target)

    rep = gradcheck(loss, [m, s, b], tol=1e-5)
    assert rep.passed, rep.summary()


def test_numpy_backward_matches_finite_differences():
    scene = random_scene(8)
    ctx = render_context(looking_cam(16), scene)
    rng = np.random.default_rng(0)
    m = rng.normal(size=len(scene))
    gp = rng.normal(size=(16, 16))
    gl = rng.normal(size=(16, 16))
    squash = (0.8, -0.2)

    def f(mv, s, bb):
        r = composite_scalar(ctx, mv, (s, bb))
        return float(np.sum(gp * r.prob) + np.sum(gl * r.logit))

    dm, ds, db = composite_scalar_backward(composite_scalar(ctx, m, squash), grad_logit=gl, grad_prob=gp)
    h = 1e-6
    for i in range(len(m)):
        e = np.zeros_like(m)
        e[i] = h
        num = (f(m + e, *squash) - f(m - e, *squash)) / (2 * h)
        assert abs(dm[i] - num) / max(1.0, abs(num)) < 1e-5
    assert abs(ds - (f(m, 0.8 + h, -0.2) - f(m, 0.8 - h, -0.2)) / (2 * h)) < 1e-5
    assert abs(db - (f(m, 0.8, -0.2 + h) - f(m, 0.8, -0.2 - h)) / (2 * h)) < 1e-5


# ---------------------------------------------------------------------------
# photometric loss
# ---------------------------------------------------------------------------

def img(a):
    a = np.asarray(a, dtype=np.float64)
    return RenderedImage(rgb=a, weight_sum=np.zeros(a.shape[:2]))


def test_photometric_identical_zero(rng):
    a = rng.random((4, 5, 3))
    assert photometric_loss(img(a), img(a)) == 0.0


def test_photometric_zero_vs_one():
    assert photometric_loss(img(np.zeros((2, 2, 3))), img(np.ones((2, 2, 3)))) == 12.0


def test_photometric_double_loop(rng):
    a, b = rng.random((3, 4, 3)), rng.random((3, 4, 3))
    total = 0.0
    for y in range(3):
        for x in range(4):
            total += sum((a[y, x, c] - b[y, x, c]) ** 2 for c in range(3))
    assert photometric_loss(img(a), img(b)) == pytest.approx(total, rel=1e-12)


def test_photometric_size_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(img(np.zeros((2, 2, 3))), img(np.zeros((2, 3, 3))))
