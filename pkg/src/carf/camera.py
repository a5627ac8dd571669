"""Pinhole cameras, the 16-D camera descriptor, visibility and view pairing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import GaussianScene


class CameraValidationError(ValueError):
    pass


class NoAdmissiblePairError(RuntimeError):
    pass


@dataclass(frozen=True)
class Camera:
    """World-to-camera pinhole camera: ``q = R @ x + t``, looking down +z."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray
    near: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        self.validate()

    def validate(self) -> None:
        R = self.R
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CameraValidationError("R must be a proper rotation (R^T R = I, det = +1)")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraValidationError("focal lengths must be > 0")
        if self.width < 1 or self.height < 1:
            raise CameraValidationError("image size must be >= 1")
        if not self.near > 0:
            raise CameraValidationError("near must be > 0")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near) == \
            (other.fx, other.fy, other.cx, other.cy, other.width, other.height, other.near) \
            and np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    __hash__ = None


@dataclass(frozen=True)
class CameraDescriptor:
    c_ext: np.ndarray  # 12: row-major R then t
    c_full: np.ndarray  # 16: c_ext then (fx/w, fy/h, cx/w, cy/h)


@dataclass(frozen=True)
class ViewPair:
    a: int
    b: int
    overlap: float


def camera_descriptor(cam: Camera) -> CameraDescriptor:
    c_ext = np.concatenate([cam.R.reshape(9), cam.t])
    norm_k = np.array([cam.fx / cam.width, cam.fy / cam.height, cam.cx / cam.width, cam.cy / cam.height])
    return CameraDescriptor(c_ext=c_ext, c_full=np.concatenate([c_ext, norm_k]))


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, fx, fy, width, height, cx=None, cy=None, near=0.01) -> Camera:
    """Camera at ``eye`` looking at ``target``; image x right, y down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise CameraValidationError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fx=fx, fy=fy,
                  cx=width / 2.0 if cx is None else cx,
                  cy=height / 2.0 if cy is None else cy,
                  width=width, height=height, R=R, t=-R @ eye, near=near)


def ring_cameras(n: int, radius: float, height: float, target=(0.0, 0.0, 0.0), *,
                 fx: float, width: int, fy: float | None = None, image_height: int | None = None,
                 phase: float = 0.0, near: float = 0.01) -> list:
    """``n`` cameras evenly spaced on a horizontal circle, all facing ``target``."""
    cams = []
    for k in range(n):
        theta = phase + 2.0 * np.pi * k / n
        eye = (radius * np.cos(theta), radius * np.sin(theta), height)
        cams.append(look_at(eye, target, fx=fx, fy=fx if fy is None else fy, width=width,
                            height=width if image_height is None else image_height, near=near))
    return cams


@dataclass(frozen=True)
class Projection:
    u: np.ndarray  # (2,)
    z: float
    J: np.ndarray  # (2, 3) d u / d q
    culled: bool


def project(cam: Camera, mu) -> Projection:
    q = cam.R @ np.asarray(mu, dtype=np.float64) + cam.t
    qz = q[2]
    if qz <= cam.near:
        return Projection(u=np.full(2, np.nan), z=float(qz), J=np.full((2, 3), np.nan), culled=True)
    u = np.array([cam.fx * q[0] / qz + cam.cx, cam.fy * q[1] / qz + cam.cy])
    J = np.array([[cam.fx / qz, 0.0, -cam.fx * q[0] / qz ** 2],
                  [0.0, cam.fy / qz, -cam.fy * q[1] / qz ** 2]])
    return Projection(u=u, z=float(qz), J=J, culled=False)


def project_points(cam: Camera, mu: np.ndarray):
    """Vectorized projection. Returns ``(u (N,2), z (N,), in_front (N,))``."""
    q = mu @ cam.R.T + cam.t
    z = q[:, 2]
    in_front = z > cam.near
    safe = np.where(in_front, z, 1.0)
    u = np.stack([cam.fx * q[:, 0] / safe + cam.cx, cam.fy * q[:, 1] / safe + cam.cy], axis=1)
    return u, z, in_front


def visible_set(cam: Camera, scene: GaussianScene, eps_vis: float = 1.0 / 255.0) -> frozenset:
    if len(scene) == 0:
        return frozenset()
    u, _, in_front = project_points(cam, scene.mu)
    ok = (in_front
          & (u[:, 0] >= 0) & (u[:, 0] < cam.width)
          & (u[:, 1] >= 0) & (u[:, 1] < cam.height)
          & (scene.opacity >= eps_vis))
    return frozenset(int(i) for i in np.flatnonzero(ok))


def overlap_from_sets(va, vb) -> float:
    if not va or not vb:
        return 0.0
    return len(va & vb) / min(len(va), len(vb))


def overlap_ratio(a: Camera, b: Camera, scene: GaussianScene, eps_vis: float = 1.0 / 255.0) -> float:
    """Shared visible Gaussians over the smaller visible set."""
    return overlap_from_sets(visible_set(a, scene, eps_vis), visible_set(b, scene, eps_vis))


def admissible_pairs(cams: Sequence[Camera], scene: GaussianScene, min_overlap: float = 0.30,
                     eps_vis: float = 1.0 / 255.0) -> list:
    """All ordered pairs ``(a, b)``, ``a != b``, with overlap >= ``min_overlap``."""
    vis = [visible_set(c, scene, eps_vis) for c in cams]
    pairs = []
    for a in range(len(cams)):
        for b in range(len(cams)):
            if a == b:
                continue
            ov = overlap_from_sets(vis[a], vis[b])
            if ov >= min_overlap:
                pairs.append(ViewPair(a, b, ov))
    return pairs


def sample_pair(cams: Sequence[Camera], scene: GaussianScene, min_overlap: float = 0.30,
                rng: np.random.Generator | None = None, pairs: list | None = None) -> ViewPair:
    """Uniform draw over admissible ordered pairs (one ``rng.integers`` call).

    ``pairs`` may be precomputed with :func:`admissible_pairs`.
    """
    if rng is None:
        rng = np.random.default_rng()
    if pairs is None:
        pairs = admissible_pairs(cams, scene, min_overlap)
    if not pairs:
        raise NoAdmissiblePairError(
            f"no camera pair reaches {min_overlap:.0%} overlap; lower min_overlap")
    return pairs[int(rng.integers(len(pairs)))]


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def camera_to_dict(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "R": [float(x) for x in cam.R.reshape(9)], "t": [float(x) for x in cam.t],
            "near": cam.near}


def camera_from_dict(d: dict) -> Camera:
    for key in ("fx", "fy", "cx", "cy", "width", "height", "R", "t", "near"):
        if key not in d:
            raise CameraValidationError(f"missing field {key!r}")
    if len(d["R"]) != 9 or len(d["t"]) != 3:
        raise CameraValidationError("R needs 9 row-major entries and t needs 3")
    return Camera(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                  width=int(d["width"]), height=int(d["height"]),
                  R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                  t=np.array(d["t"], dtype=np.float64), near=float(d["near"]))


def save_cameras(cams: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cams], indent=1) + "\n")


def load_cameras(path) -> list:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise CameraValidationError("camera file must hold a JSON array")
    return [camera_from_dict(d) for d in data]
