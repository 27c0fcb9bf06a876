"""Perspective projection of 3D cubics into rational 2D cubics.

Projected points use normalized image coordinates: the shorter image
axis spans [-1, 1] across the field of view, x to the right, y up.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera
from .scene import BezierCurve3D, bernstein_matrix, bernstein_weights

EPS_NEAR = 1e-4


class BehindCameraError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class ProjectedPoint:
    d_xy: np.ndarray
    d_z: float


@dataclass(frozen=True)
class RationalBezier2D:
    xy: np.ndarray  # (4, 2) projected control points
    w: np.ndarray  # (4,) perspective depths, all > 0

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64).reshape(4, 2)
        w = np.asarray(self.w, dtype=np.float64).reshape(4)
        if np.any(w <= 0):
            raise ValueError("rational weights must be positive")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "w", w)

    @property
    def control(self) -> list[ProjectedPoint]:
        return [ProjectedPoint(self.xy[i].copy(), float(self.w[i])) for i in range(4)]


def project_point(camera: Camera, p: np.ndarray) -> ProjectedPoint:
    c = camera.to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if c[2] <= EPS_NEAR:
        raise BehindCameraError(f"point at camera depth {c[2]:.3g} is behind the near plane")
    f = camera.focal
    return ProjectedPoint(np.array([f * c[0] / c[2], f * c[1] / c[2]]), float(c[2]))


def project_curve(camera: Camera, curve: BezierCurve3D) -> RationalBezier2D:
    pts = curve.points if isinstance(curve, BezierCurve3D) else np.asarray(curve, dtype=np.float64)
    xy, w = [], []
    for i, p in enumerate(pts):
        try:
            pp = project_point(camera, p)
        except BehindCameraError as exc:
            raise BehindCameraError(f"control point {i}: {exc}", index=i) from None
        xy.append(pp.d_xy)
        w.append(pp.d_z)
    return RationalBezier2D(np.stack(xy), np.array(w))


def rational_eval(rb: RationalBezier2D, t: float) -> np.ndarray:
    b = bernstein_weights(t) * rb.w
    return (b @ rb.xy) / b.sum()


def approx_cubic(rb: RationalBezier2D) -> np.ndarray:
    """Drop the depth weights and keep the projected control points as a plain cubic."""
    return rb.xy.copy()


def cubic2d_eval(ctrl: np.ndarray, t: float) -> np.ndarray:
    if t == 0.0:
        return np.asarray(ctrl[0], dtype=np.float64).copy()
    if t == 1.0:
        return np.asarray(ctrl[3], dtype=np.float64).copy()
    return bernstein_weights(t) @ np.asarray(ctrl, dtype=np.float64)


def projection_error(camera: Camera, curve: BezierCurve3D, n_samples: int = 256) -> float:
    """Largest gap between the rational projection and its plain-cubic stand-in."""
    if n_samples < 16:
        raise ValueError("n_samples must be at least 16")
    rb = project_curve(camera, curve)
    B = bernstein_matrix(np.linspace(0.0, 1.0, n_samples))
    Bw = B * rb.w
    exact = (Bw @ rb.xy) / Bw.sum(axis=1, keepdims=True)
    approx = B @ rb.xy
    return float(np.max(np.linalg.norm(exact - approx, axis=1)))


# --- differentiable path ------------------------------------------------

def camera_tensors(camera: Camera, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    return (torch.tensor(camera.rotation, dtype=dtype), torch.tensor(camera.position, dtype=dtype))


def project_points_torch(camera: Camera, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Project world points (..., 3) to normalized xy (..., 2) and camera depth (...)."""
    R, pos = camera_tensors(camera, pts.dtype)
    c = (pts - pos) @ R.T
    z = c[..., 2]
    if bool((z.detach() <= EPS_NEAR).any()):
        bad = int(torch.nonzero((z.detach() <= EPS_NEAR).reshape(-1))[0])
        raise BehindCameraError(f"point {bad} is behind the near plane", index=bad)
    xy = camera.focal * c[..., :2] / z[..., None]
    return xy, z


def normalized_to_pixels(camera_or_size, xy):
    """Map normalized coordinates to pixel coordinates (x right, y down; centers at +0.5)."""
    if isinstance(camera_or_size, Camera):
        W, H = camera_or_size.width, camera_or_size.height
    else:
        W, H = camera_or_size
    S = min(W, H) / 2.0
    if isinstance(xy, torch.Tensor):
        return torch.stack([W / 2.0 + xy[..., 0] * S, H / 2.0 - xy[..., 1] * S], dim=-1)
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([W / 2.0 + xy[..., 0] * S, H / 2.0 - xy[..., 1] * S], axis=-1)


def pixels_to_normalized(camera_or_size, px):
    if isinstance(camera_or_size, Camera):
        W, H = camera_or_size.width, camera_or_size.height
    else:
        W, H = camera_or_size
    S = min(W, H) / 2.0
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(px[..., 0] - W / 2.0) / S, (H / 2.0 - px[..., 1]) / S], axis=-1)
