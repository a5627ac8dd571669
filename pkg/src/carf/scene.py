"""Explicit Gaussian scenes: representation, synthetic generation, JSON I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class SceneValidationError(ValueError):
    """Schema or invariant violation; ``path`` is a JSON pointer."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


QUAT_TOL = 1e-9


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = (float(c) for c in q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class Gaussian:
    mu: tuple
    scale: tuple
    rot: tuple  # (w, x, y, z)
    opacity: float
    color: tuple
    label: int = -1

    def validate(self, path: str = "") -> None:
        for key, n in (("mu", 3), ("scale", 3), ("rot", 4), ("color", 3)):
            val = getattr(self, key)
            if len(val) != n or not all(np.isfinite(val)):
                raise SceneValidationError(f"{path}/{key}", f"expected {n} finite numbers")
        if min(self.scale) <= 0:
            raise SceneValidationError(f"{path}/scale", "components must be > 0")
        if abs(float(np.linalg.norm(self.rot)) - 1.0) > QUAT_TOL:
            raise SceneValidationError(f"{path}/rot", "quaternion must have unit norm")
        if not (0.0 <= self.opacity <= 1.0):
            raise SceneValidationError(f"{path}/opacity", f"{self.opacity} outside [0, 1]")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise SceneValidationError(f"{path}/color", "components must lie in [0, 1]")


def covariance(g: Gaussian) -> np.ndarray:
    """World-space covariance ``R diag(scale^2) R^T``."""
    if abs(float(np.linalg.norm(g.rot)) - 1.0) > QUAT_TOL:
        raise SceneValidationError("/rot", "quaternion must have unit norm")
    R = quat_to_rotmat(g.rot)
    S2 = np.diag(np.square(np.asarray(g.scale, dtype=np.float64)))
    cov = R @ S2 @ R.T
    return 0.5 * (cov + cov.T)


@dataclass
class GaussianScene:
    gaussians: list
    bbox: tuple  # ((x0, y0, z0), (x1, y1, z1))
    rng_seed: int = 0

    # cached array views, rebuilt lazily
    _arrays: dict = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.gaussians)

    def _build(self) -> dict:
        if self._arrays is None:
            g = self.gaussians
            self._arrays = {
                "mu": np.array([x.mu for x in g], dtype=np.float64).reshape(-1, 3),
                "opacity": np.array([x.opacity for x in g], dtype=np.float64),
                "color": np.array([x.color for x in g], dtype=np.float64).reshape(-1, 3),
                "label": np.array([x.label for x in g], dtype=np.int64),
                "cov": np.array([covariance(x) for x in g]).reshape(-1, 3, 3),
            }
        return self._arrays

    @property
    def mu(self) -> np.ndarray:
        return self._build()["mu"]

    @property
    def opacity(self) -> np.ndarray:
        return self._build()["opacity"]

    @property
    def colors(self) -> np.ndarray:
        return self._build()["color"]

    @property
    def labels(self) -> np.ndarray:
        return self._build()["label"]

    @property
    def covariances(self) -> np.ndarray:
        return self._build()["cov"]

    def normalized_mu(self) -> np.ndarray:
        """Centers mapped to [-1, 1]^3 by the scene bbox."""
        lo = np.asarray(self.bbox[0], dtype=np.float64)
        hi = np.asarray(self.bbox[1], dtype=np.float64)
        span = np.where(hi > lo, hi - lo, 1.0)
        return 2.0 * (self.mu - lo) / span - 1.0

    def validate(self) -> None:
        for i, g in enumerate(self.gaussians):
            g.validate(f"/gaussians/{i}")
        lo = np.asarray(self.bbox[0])
        hi = np.asarray(self.bbox[1])
        if len(self.gaussians) and (np.any(self.mu < lo) or np.any(self.mu > hi)):
            raise SceneValidationError("/bbox", "does not contain all Gaussian centers")

    def __eq__(self, other):
        if not isinstance(other, GaussianScene):
            return NotImplemented
        return (self.gaussians == other.gaussians
                and _as_tuple(self.bbox) == _as_tuple(other.bbox)
                and self.rng_seed == other.rng_seed)


def _as_tuple(b):
    return tuple(tuple(float(c) for c in corner) for corner in b)


def bbox_of(mu: np.ndarray, pad: float = 0.0) -> tuple:
    if len(mu) == 0:
        return ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    lo = mu.min(axis=0) - pad
    hi = mu.max(axis=0) + pad
    return (tuple(float(x) for x in lo), tuple(float(x) for x in hi))


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class ClusterSpec:
    """A labeled blob of Gaussians.

    Centers are drawn from N(center, extent^2) per axis and clipped to
    ``center +- 3 * extent``.
    """
    center: Sequence[float]
    extent: float
    count: int
    color: Sequence[float]
    scale: float | None = None  # mean per-Gaussian std; defaults to extent / 2


@dataclass
class SceneSpec:
    clusters: list
    background_count: int = 0
    floor_radius: float = 1.5
    floor_z: float = 0.0
    floor_scale: float = 0.15
    background_color: Sequence[float] = (0.5, 0.5, 0.5)
    opacity_range: tuple = (0.6, 0.95)


def _random_quat(rng) -> tuple:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def _unit_quat(q) -> tuple:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    return tuple(float(c) for c in q)


def generate_scene(spec: SceneSpec, seed: int) -> GaussianScene:
    """Deterministic scene for ``(spec, seed)``.

    Each cluster's Gaussians carry the cluster index as label; background
    Gaussians lie on a flat disc (the floor) and carry label -1.
    """
    if not spec.clusters:
        raise SceneValidationError("/clusters", "at least one cluster required")
    for k, c in enumerate(spec.clusters):
        if c.count <= 0:
            raise SceneValidationError(f"/clusters/{k}/count", "must be > 0")
        if c.extent <= 0:
            raise SceneValidationError(f"/clusters/{k}/extent", "must be > 0")
    if spec.background_count < 0:
        raise SceneValidationError("/background_count", "must be >= 0")

    rng = np.random.default_rng(seed)
    lo_op, hi_op = spec.opacity_range
    gaussians = []
    for label, c in enumerate(spec.clusters):
        center = np.asarray(c.center, dtype=np.float64)
        base_scale = c.scale if c.scale is not None else c.extent / 2.0
        offsets = np.clip(rng.normal(0.0, c.extent, size=(c.count, 3)), -3 * c.extent, 3 * c.extent)
        scales = base_scale * rng.uniform(0.7, 1.3, size=(c.count, 3))
        opac = rng.uniform(lo_op, hi_op, size=c.count)
        col_noise = rng.normal(0.0, 0.05, size=(c.count, 3))
        for i in range(c.count):
            gaussians.append(Gaussian(
                mu=tuple(float(x) for x in center + offsets[i]),
                scale=tuple(float(x) for x in scales[i]),
                rot=_unit_quat(_random_quat(rng)),
                opacity=float(opac[i]),
                color=tuple(float(x) for x in np.clip(np.asarray(c.color) + col_noise[i], 0.0, 1.0)),
                label=label,
            ))
    n_bg = spec.background_count
    if n_bg:
        r = spec.floor_radius * np.sqrt(rng.uniform(0.0, 1.0, size=n_bg))
        theta = rng.uniform(0.0, 2 * np.pi, size=n_bg)
        yaw = rng.uniform(0.0, np.pi, size=n_bg)
        sxy = spec.floor_scale * rng.uniform(0.8, 1.2, size=(n_bg, 2))
        for i in range(n_bg):
            gaussians.append(Gaussian(
                mu=(float(r[i] * np.cos(theta[i])), float(r[i] * np.sin(theta[i])), float(spec.floor_z)),
                scale=(float(sxy[i, 0]), float(sxy[i, 1]), float(0.1 * spec.floor_scale)),
                # rotation about z by yaw
                rot=_unit_quat((np.cos(yaw[i] / 2), 0.0, 0.0, np.sin(yaw[i] / 2))),
                opacity=0.9,
                color=tuple(float(x) for x in spec.background_color),
                label=-1,
            ))
    mu = np.array([g.mu for g in gaussians])
    scene = GaussianScene(gaussians=gaussians, bbox=bbox_of(mu), rng_seed=int(seed))
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_list(xs) -> str:
    return "[" + ", ".join(_fmt(x) for x in xs) + "]"


def scene_to_json(scene: GaussianScene) -> str:
    """Canonical JSON text (17 significant digits, fixed key order)."""
    lines = [
        "{",
        f'  "seed": {int(scene.rng_seed)},',
        f'  "bbox": [{_fmt_list(scene.bbox[0])}, {_fmt_list(scene.bbox[1])}],',
        '  "gaussians": [',
    ]
    items = []
    for g in scene.gaussians:
        items.append(
            f'    {{"mu": {_fmt_list(g.mu)}, "scale": {_fmt_list(g.scale)}, "rot": {_fmt_list(g.rot)}, '
            f'"opacity": {_fmt(g.opacity)}, "color": {_fmt_list(g.color)}, "label": {int(g.label)}}}'
        )
    lines.append(",\n".join(items))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_scene(scene: GaussianScene, path) -> None:
    Path(path).write_text(scene_to_json(scene))


def _require_list(obj, path, n=None):
    if not isinstance(obj, list):
        raise SceneValidationError(path, "expected an array")
    if n is not None and len(obj) != n:
        raise SceneValidationError(path, f"expected {n} elements, got {len(obj)}")
    for k, x in enumerate(obj):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SceneValidationError(f"{path}/{k}", "expected a number")
    return obj


def scene_from_dict(data) -> GaussianScene:
    if not isinstance(data, dict):
        raise SceneValidationError("", "expected an object")
    for key in ("seed", "bbox", "gaussians"):
        if key not in data:
            raise SceneValidationError(f"/{key}", "missing required field")
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SceneValidationError("/seed", "expected a non-negative integer")
    bbox = data["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 2:
        raise SceneValidationError("/bbox", "expected [[x0,y0,z0],[x1,y1,z1]]")
    lo = _require_list(bbox[0], "/bbox/0", 3)
    hi = _require_list(bbox[1], "/bbox/1", 3)
    if not isinstance(data["gaussians"], list):
        raise SceneValidationError("/gaussians", "expected an array")
    gaussians = []
    for i, item in enumerate(data["gaussians"]):
        p = f"/gaussians/{i}"
        if not isinstance(item, dict):
            raise SceneValidationError(p, "expected an object")
        for key in ("mu", "scale", "rot", "opacity", "color", "label"):
            if key not in item:
                raise SceneValidationError(f"{p}/{key}", "missing required field")
        op = item["opacity"]
        if isinstance(op, bool) or not isinstance(op, (int, float)):
            raise SceneValidationError(f"{p}/opacity", "expected a number")
        label = item["label"]
        if isinstance(label, bool) or not isinstance(label, int):
            raise SceneValidationError(f"{p}/label", "expected an integer")
        g = Gaussian(
            mu=tuple(float(x) for x in _require_list(item["mu"], f"{p}/mu", 3)),
            scale=tuple(float(x) for x in _require_list(item["scale"], f"{p}/scale", 3)),
            rot=tuple(float(x) for x in _require_list(item["rot"], f"{p}/rot", 4)),
            opacity=float(op),
            color=tuple(float(x) for x in _require_list(item["color"], f"{p}/color", 3)),
            label=label,
        )
        g.validate(p)
        gaussians.append(g)
    scene = GaussianScene(gaussians=gaussians,
                          bbox=(tuple(float(x) for x in lo), tuple(float(x) for x in hi)),
                          rng_seed=seed)
    scene.validate()
    return scene


def load_scene(path) -> GaussianScene:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneValidationError("", f"invalid JSON: {exc}") from exc
    return scene_from_dict(data)
