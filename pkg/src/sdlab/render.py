"""Linear toy renderers: camera-indexed maps from parameters to observations.

Asset parameters are plain float vectors. Every render map is linear per
camera, so the Jacobian is the camera matrix itself and the vector-Jacobian
product is an exact transpose multiply.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RENDER_KINDS = ("identity", "linear-view")


@dataclass(frozen=True)
class Camera:
    """A fixed linear view transform of shape (d_view, d_theta)."""

    id: int
    transform: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.transform, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("camera transform must be a matrix")
        if not np.all(np.isfinite(a)):
            raise ValueError("camera transform must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "transform", a)

    @property
    def d_view(self) -> int:
        return self.transform.shape[0]

    @property
    def d_theta(self) -> int:
        return self.transform.shape[1]

    def is_orthogonal(self, tol: float = 1e-9) -> bool:
        a = self.transform
        if a.shape[0] != a.shape[1]:
            return False
        return bool(np.max(np.abs(a.T @ a - np.eye(a.shape[1]))) <= tol)


@dataclass(frozen=True)
class RenderMap:
    """A family of cameras sharing one parameter space."""

    kind: str
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if self.kind not in RENDER_KINDS:
            raise ValueError(f"unknown render kind {self.kind!r}; expected one of {RENDER_KINDS}")
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("render map needs at least one camera")
        d_theta = cams[0].d_theta
        if any(c.d_theta != d_theta for c in cams):
            raise ValueError("cameras disagree on parameter dimension")
        if self.kind == "identity":
            if len(cams) != 1:
                raise ValueError("identity render map has exactly one camera")
            c = cams[0]
            if c.d_view != c.d_theta or not np.array_equal(
                c.transform, np.eye(c.d_theta)
            ):
                raise ValueError("identity render map requires the identity transform")
        object.__setattr__(self, "cameras", cams)

    @property
    def d_theta(self) -> int:
        return self.cameras[0].d_theta

    @property
    def d_view(self) -> int:
        return self.cameras[0].d_view

    def _resolve(self, camera: Camera) -> Camera:
        for c in self.cameras:
            if c.id == camera.id:
                return c
        raise ValueError(f"camera {camera.id} does not belong to this render map")


def identity_map(d: int) -> RenderMap:
    return RenderMap(kind="identity", cameras=(Camera(0, np.eye(d)),))


def render(rmap: RenderMap, theta: np.ndarray, camera: Camera) -> np.ndarray:
    """Observation A_c @ theta for a camera belonging to the map."""
    c = rmap._resolve(camera)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (c.d_theta,):
        raise ValueError(f"theta must have shape ({c.d_theta},), got {theta.shape}")
    return c.transform @ theta


def vjp(rmap: RenderMap, camera: Camera, v: np.ndarray) -> np.ndarray:
    """Exact vector-Jacobian product A_c^T @ v."""
    c = rmap._resolve(camera)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (c.d_view,):
        raise ValueError(f"v must have shape ({c.d_view},), got {v.shape}")
    return c.transform.T @ v


def make_camera_ring(V: int, d: int, seed: int = 0) -> list[Camera]:
    """V orthogonal view transforms, deterministic per seed.

    d=2 gives rotations at equally spaced angles starting from the identity;
    d>2 gives the identity plus seeded orthogonal matrices. V=1 is always the
    identity.
    """
    if V < 1:
        raise ValueError(f"need V >= 1 cameras, got {V}")
    if d < 1:
        raise ValueError(f"need d >= 1, got {d}")
    if V == 1:
        return [Camera(0, np.eye(d))]
    if d == 2:
        cams = []
        for v in range(V):
            a = 2.0 * np.pi * v / V
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            cams.append(Camera(v, rot))
        return cams
    if d < 2:
        raise ValueError("a multi-camera ring needs d >= 2")
    rng = np.random.default_rng(seed)
    cams = [Camera(0, np.eye(d))]
    for v in range(1, V):
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        cams.append(Camera(v, q))
    return cams
