"""Perspective cameras and randomized pose sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import SceneFormatError, unit

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: WORLD_UP.copy())
    fov_deg: float = 27.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        tgt = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        up = unit(np.asarray(self.up, dtype=np.float64).reshape(3))
        if not (0.0 < self.fov_deg < 180.0):
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        if np.allclose(pos, tgt):
            raise ValueError("camera position coincides with look_at")
        fwd = unit(tgt - pos)
        if np.linalg.norm(np.cross(fwd, up)) < 1e-9:
            raise ValueError("up vector is parallel to the view direction")
        for a in (pos, tgt, up):
            a.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", tgt)
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def forward(self) -> np.ndarray:
        return unit(self.look_at - self.position)

    @property
    def right(self) -> np.ndarray:
        return unit(np.cross(self.forward, self.up))

    @property
    def true_up(self) -> np.ndarray:
        return np.cross(self.right, self.forward)

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are right, up, forward."""
        return np.stack([self.right, self.true_up, self.forward])

    @property
    def focal(self) -> float:
        # normalized coordinates span [-1, 1] across the field of view
        return 1.0 / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def short_side(self) -> int:
        return min(self.width, self.height)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def with_resolution(self, width: int, height: int | None = None) -> Camera:
        return Camera(self.position, self.look_at, self.up, self.fov_deg, width, height or width)

    def antipodal(self) -> Camera:
        """Camera reflected through the look-at target, facing back at it."""
        pos = 2.0 * self.look_at - self.position
        return Camera(pos, self.look_at, self.up, self.fov_deg, self.width, self.height)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unnormalized ray directions through every pixel center, with unit forward z.

        Returns (origin, dirs) where dirs has shape (H, W, 3) in world space and
        the camera-space z component of each direction is 1.
        """
        H, W = self.height, self.width
        S = self.short_side
        f = self.focal
        u = (np.arange(W) + 0.5 - W / 2.0) / (S / 2.0)
        v = -(np.arange(H) + 0.5 - H / 2.0) / (S / 2.0)
        xs, ys = np.meshgrid(u / f, v / f)
        cam = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        return self.position.copy(), cam @ self.rotation

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov_deg": float(self.fov_deg),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Camera:
        try:
            return cls(np.asarray(data["position"], float), np.asarray(data["look_at"], float),
                       np.asarray(data["up"], float), float(data["fov_deg"]),
                       int(data["width"]), int(data["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"bad camera data: {exc}") from exc

    def same_as(self, other: Camera) -> bool:
        return (np.array_equal(self.position, other.position) and np.array_equal(self.look_at, other.look_at)
                and np.array_equal(self.up, other.up) and self.fov_deg == other.fov_deg
                and self.width == other.width and self.height == other.height)


def save_camera(cam: Camera, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=1) + "\n")


def load_camera(path: str | Path) -> Camera:
    try:
        return Camera.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class CameraSamplerConfig:
    radius_range: tuple[float, float] = (3.5, 5.0)
    azimuth_range_deg: tuple[float, float] = (-180.0, 180.0)
    # polar angle measured from +z; 90 is the horizon
    elevation_range_deg: tuple[float, float] = (45.0, 105.0)
    fov_range_deg: tuple[float, float] = (18.0, 36.0)
    width: int = 128
    height: int = 128

    def __post_init__(self):
        for name in ("radius_range", "azimuth_range_deg", "elevation_range_deg", "fov_range_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo {lo} > hi {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))


def spherical_position(radius: float, azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az, pol = math.radians(azimuth_deg), math.radians(elevation_deg)
    return radius * np.array([math.sin(pol) * math.cos(az), math.sin(pol) * math.sin(az), math.cos(pol)])


def sample_camera(rng: np.random.Generator, config: CameraSamplerConfig = CameraSamplerConfig()) -> Camera:
    radius = rng.uniform(*config.radius_range)
    azimuth = rng.uniform(*config.azimuth_range_deg)
    elevation = rng.uniform(*config.elevation_range_deg)
    fov = rng.uniform(*config.fov_range_deg)
    return Camera(spherical_position(radius, azimuth, elevation), np.zeros(3), WORLD_UP,
                  fov, config.width, config.height)


def camera_spherical(cam: Camera) -> tuple[float, float, float]:
    """(radius, azimuth_deg, elevation_deg) of the camera position about the origin."""
    p = cam.position
    r = float(np.linalg.norm(p))
    return r, math.degrees(math.atan2(p[1], p[0])), math.degrees(math.acos(p[2] / r))


def ring_cameras(k: int, radius: float = 4.25, elevation_deg: float = 75.0, fov_deg: float = 27.0,
                 width: int = 128, height: int = 128, azimuth0_deg: float = 0.0) -> list[Camera]:
    """k cameras at equal azimuth spacing, looking at the origin."""
    return [Camera(spherical_position(radius, azimuth0_deg + 360.0 * i / k, elevation_deg), np.zeros(3),
                   WORLD_UP, fov_deg, width, height) for i in range(k)]
