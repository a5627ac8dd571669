"""EWA splatting and front-to-back alpha compositing.

Geometry is frozen, so the blend weights ``w_i(p) = a_i(p) T_i(p)`` of a view
depend only on the scene and camera.  :func:`composite_weights` computes them
once per view into a sparse ``(H*W, N)`` matrix; compositing any per-Gaussian
scalar is then a matrix-vector product and its backward is the transpose.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .camera import Camera
from .diffcore import NumericalError, sigmoid
from .scene import GaussianScene


@dataclass(frozen=True)
class RasterConfig:
    dilation: float = 0.3  # px^2 added to the screen covariance diagonal
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4  # early stop once transmittance would drop below this
    bbox_sigma: float = 3.0


DEFAULT_RASTER = RasterConfig()


@dataclass
class Splat2D:
    index: int
    u: np.ndarray
    z: float
    cov2d: np.ndarray
    inv_cov2d: np.ndarray
    bbox_px: tuple  # (x0, x1, y0, y1), inclusive, clipped to the image


def _screen_covariances(cam: Camera, mu: np.ndarray, cov3d: np.ndarray, dilation: float):
    q = mu @ cam.R.T + cam.t
    z = q[:, 2]
    zs = np.where(z > cam.near, z, 1.0)
    n = len(mu)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * q[:, 0] / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * q[:, 1] / zs ** 2
    M = J @ cam.R  # (n, 2, 3)
    cov2d = M @ cov3d @ np.transpose(M, (0, 2, 1))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    u = np.stack([cam.fx * q[:, 0] / zs + cam.cx, cam.fy * q[:, 1] / zs + cam.cy], axis=1)
    return u, z, cov2d


def project_splats(cam: Camera, scene: GaussianScene, cfg: RasterConfig = DEFAULT_RASTER) -> list:
    """Screen-space footprints sorted by depth (ties by index).

    Gaussians at or behind the near plane are omitted, as are those whose
    clipped bbox is empty (they touch no pixel).
    """
    if len(scene) == 0:
        return []
    u, z, cov2d = _screen_covariances(cam, scene.mu, scene.covariances, cfg.dilation)
    splats = []
    for i in np.lexsort((np.arange(len(z)), z)):
        if not z[i] > cam.near:
            continue
        c = cov2d[i]
        rx = cfg.bbox_sigma * math.sqrt(c[0, 0])
        ry = cfg.bbox_sigma * math.sqrt(c[1, 1])
        x0 = max(0, math.ceil(u[i, 0] - rx))
        x1 = min(cam.width - 1, math.floor(u[i, 0] + rx))
        y0 = max(0, math.ceil(u[i, 1] - ry))
        y1 = min(cam.height - 1, math.floor(u[i, 1] + ry))
        if x0 > x1 or y0 > y1:
            continue
        det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
        inv = np.array([[c[1, 1], -c[0, 1]], [-c[1, 0], c[0, 0]]]) / det
        splats.append(Splat2D(int(i), u[i].copy(), float(z[i]), c, inv, (x0, x1, y0, y1)))
    return splats


@dataclass
class CompositeContext:
    """Blend weights of one view: ``weights[p, i] = w_i(p)``."""

    weights: sp.csr_matrix
    t_final: np.ndarray  # (H, W) transmittance left after the last composited splat
    width: int
    height: int
    num_gaussians: int
    _weights_t: sp.csr_matrix = field(default=None, repr=False)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.weights @ values

    def apply_transpose(self, grad: np.ndarray) -> np.ndarray:
        if self._weights_t is None:
            self._weights_t = self.weights.T.tocsr()
        return self._weights_t @ np.ravel(grad)

    @property
    def weight_sum(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).reshape(self.height, self.width)

    def pixel_contribs(self, x: int, y: int) -> list:
        """``(gaussian index, w)`` in compositing order for one pixel."""
        row = self.weights.getrow(y * self.width + x)
        return list(zip(row.indices.tolist(), row.data.tolist()))


def _composite_band(splats, opacity, width, y_lo, y_hi, cfg: RasterConfig):
    """Sequential front-to-back compositing restricted to rows [y_lo, y_hi)."""
    T = np.ones((y_hi - y_lo, width))
    done = np.zeros_like(T, dtype=bool)
    rows, cols, vals = [], [], []
    for s in splats:
        x0, x1, y0, y1 = s.bbox_px
        y0, y1 = max(y0, y_lo), min(y1, y_hi - 1)
        if y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1) - s.u[0]
        dy = (np.arange(y0, y1 + 1) - s.u[1])[:, None]
        a, b, c = s.inv_cov2d[0, 0], s.inv_cov2d[0, 1], s.inv_cov2d[1, 1]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(cfg.alpha_max, opacity[s.index] * np.exp(power))
        ys = slice(y0 - y_lo, y1 - y_lo + 1)
        xs = slice(x0, x1 + 1)
        t_sub = T[ys, xs]
        d_sub = done[ys, xs]
        active = (alpha >= cfg.alpha_min) & ~d_sub
        if not active.any():
            continue
        w = alpha * t_sub
        test_t = t_sub - w
        # t_sub >= w, so this error term is exact; stepping down on a round-up keeps w + T' <= T
        rounded_up = ((t_sub - test_t) - w) < 0.0
        test_t[rounded_up] = np.nextafter(test_t[rounded_up], 0.0)
        stop = active & (test_t < cfg.t_min)
        take = active & ~stop
        d_sub |= stop
        if take.any():
            ry, rx = np.nonzero(take)
            rows.append((ry + y0) * width + (rx + x0))
            cols.append(np.full(ry.size, s.index))
            vals.append(w[take])
            t_sub[take] = test_t[take]
    if rows:
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), T
    return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), T


def composite_weights(splats, opacity, width: int, height: int, num_gaussians: int,
                      cfg: RasterConfig = DEFAULT_RASTER, threads: int = 1) -> CompositeContext:
    """Blend weights for every pixel.

    ``threads > 1`` partitions the image into row bands (never splats); the
    per-pixel arithmetic is the same, so the result is bitwise identical to
    the sequential path.
    """
    opacity = np.asarray(opacity, dtype=np.float64)
    threads = max(1, min(int(threads), height))
    bounds = np.linspace(0, height, threads + 1).astype(int)
    bands = [(int(bounds[k]), int(bounds[k + 1])) for k in range(threads)]
    if threads == 1:
        parts = [_composite_band(splats, opacity, width, 0, height, cfg)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _composite_band(splats, opacity, width, b[0], b[1], cfg), bands))
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    t_final = np.concatenate([p[3] for p in parts], axis=0)
    # stable sort by pixel keeps each pixel's entries in compositing order
    order = np.argsort(rows, kind="stable")
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(width * height + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    W = sp.csr_matrix((vals, cols, indptr), shape=(width * height, num_gaussians))
    return CompositeContext(W, t_final, width, height, num_gaussians)


def render_context(cam: Camera, scene: GaussianScene, cfg: RasterConfig = DEFAULT_RASTER,
                   threads: int = 1) -> CompositeContext:
    splats = project_splats(cam, scene, cfg)
    return composite_weights(splats, scene.opacity, cam.width, cam.height, len(scene), cfg, threads)


@dataclass
class RenderedMask:
    logit: np.ndarray  # (H, W)
    prob: np.ndarray  # (H, W)
    weight_sum: np.ndarray  # (H, W)
    ctx: CompositeContext = field(repr=False, default=None)
    squash: tuple = (1.0, 0.0)


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3)
    weight_sum: np.ndarray


def _check_scores(values: np.ndarray, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n,):
        raise ValueError(f"expected {n} per-Gaussian values, got shape {values.shape}")
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalError(f"non-finite score at Gaussian {int(bad[0])}")
    return values


def composite_scalar(ctx: CompositeContext, m, squash=(1.0, 0.0)) -> RenderedMask:
    """``logit(p) = sum_i w_i(p) m_i`` and ``prob = sigmoid(s * logit + b)``."""
    m = _check_scores(m, ctx.num_gaussians)
    s_out, b_out = (float(x) for x in squash)
    logit = ctx.apply(m).reshape(ctx.height, ctx.width)
    prob = sigmoid(s_out * logit + b_out)
    return RenderedMask(logit=logit, prob=prob, weight_sum=ctx.weight_sum, ctx=ctx, squash=(s_out, b_out))


def composite_scalar_backward(rendered: RenderedMask, grad_logit=None, grad_prob=None):
    """Gradients ``(dL/dm, dL/ds_out, dL/db_out)``.

    ``grad_logit`` is a gradient arriving directly at the logit map and
    ``grad_prob`` one arriving at the probability map; either may be omitted.
    Geometry receives nothing (it is frozen).
    """
    ctx = rendered.ctx
    if ctx is None:
        raise ValueError("composite_scalar_backward: missing forward context")
    s_out, _ = rendered.squash
    g_logit = np.zeros_like(rendered.logit) if grad_logit is None else np.asarray(grad_logit, dtype=np.float64)
    ds = db = 0.0
    if grad_prob is not None:
        p = rendered.prob
        gz = np.asarray(grad_prob, dtype=np.float64) * p * (1.0 - p)
        g_logit = g_logit + s_out * gz
        ds = float(np.sum(gz * rendered.logit))
        db = float(np.sum(gz))
    return ctx.apply_transpose(g_logit), ds, db


def composite_rgb(ctx: CompositeContext, colors) -> RenderedImage:
    colors = np.asarray(colors, dtype=np.float64).reshape(ctx.num_gaussians, 3)
    for c in range(3):
        _check_scores(colors[:, c], ctx.num_gaussians)
    rgb = np.stack([ctx.apply(colors[:, c]) for c in range(3)], axis=-1).reshape(ctx.height, ctx.width, 3)
    return RenderedImage(rgb=rgb, weight_sum=ctx.weight_sum)


def render_rgb(cam: Camera, scene: GaussianScene, cfg: RasterConfig = DEFAULT_RASTER) -> RenderedImage:
    return composite_rgb(render_context(cam, scene, cfg), scene.colors)


def photometric_loss(rendered: RenderedImage, target: RenderedImage) -> float:
    a = rendered.rgb
    b = target.rgb
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))
