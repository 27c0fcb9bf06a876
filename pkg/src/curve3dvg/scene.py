"""Scene types for 3D vector graphics and cubic Bernstein evaluation.

A scene is an ordered list of paths. A sketch path is one open cubic
Bezier stroke; an iconography path is four cubics joined end to end
around a filled region. Control points live in world space (z up,
objects centered at the origin).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_STROKE_WIDTH = 1.5
REFERENCE_RESOLUTION = 512


class PathKind(str, enum.Enum):
    SKETCH = "sketch"
    ICONOGRAPHY = "iconography"

    @property
    def n_curves(self) -> int:
        return 1 if self is PathKind.SKETCH else 4


class OpacityKind(str, enum.Enum):
    TRAINED = "trained"
    FIXED_HIGH = "high"
    FIXED_LOW = "low"


@dataclass(frozen=True)
class OpacityState:
    kind: OpacityKind = OpacityKind.FIXED_HIGH
    value: float | None = None

    @classmethod
    def trained(cls, value: float) -> OpacityState:
        return cls(OpacityKind.TRAINED, float(value))

    @classmethod
    def high(cls) -> OpacityState:
        return cls(OpacityKind.FIXED_HIGH)

    @classmethod
    def low(cls) -> OpacityState:
        return cls(OpacityKind.FIXED_LOW)

    def multiplier(self, high: float = 1.0, low: float = 0.2) -> float:
        if self.kind is OpacityKind.TRAINED:
            return float(self.value)
        return high if self.kind is OpacityKind.FIXED_HIGH else low


class DomainError(ValueError):
    """Curve parameter outside [0, 1]."""


class SceneFormatError(ValueError):
    """Malformed scene or camera file."""


@dataclass(frozen=True)
class BezierCurve3D:
    points: np.ndarray  # (4, 3), p0..p3

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (4, 3):
            raise ValueError(f"a cubic needs 4 control points of 3 coordinates, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Path3D:
    kind: PathKind
    curves: np.ndarray  # (m, 4, 3)
    color: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    stroke_width: float = DEFAULT_STROKE_WIDTH
    opacity: OpacityState = field(default_factory=OpacityState)

    def __post_init__(self):
        curves = np.asarray(self.curves, dtype=np.float64)
        if curves.ndim == 2:
            curves = curves[None]
        if curves.ndim != 3 or curves.shape[1:] != (4, 3):
            raise ValueError(f"curves must have shape (m, 4, 3), got {curves.shape}")
        if not np.all(np.isfinite(curves)):
            raise ValueError("control points must be finite")
        if not self.stroke_width > 0:
            raise ValueError("stroke_width must be positive")
        color = np.asarray(self.color, dtype=np.float64).reshape(4)
        curves.setflags(write=False)
        color.setflags(write=False)
        object.__setattr__(self, "kind", PathKind(self.kind))
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "color", color)

    @classmethod
    def icon_from_joints(cls, control: np.ndarray, **kwargs) -> Path3D:
        """Build an iconography path from 12 shared-joint control points.

        Row layout is ``[j0, a0, b0, j1, a1, b1, j2, a2, b2, j3, a3, b3]``;
        curve ``k`` runs ``j_k, a_k, b_k, j_{k+1 mod 4}``.
        """
        control = np.asarray(control, dtype=np.float64).reshape(12, 3)
        return cls(PathKind.ICONOGRAPHY, control[ICON_CURVE_INDEX], **kwargs)

    @property
    def n_curves(self) -> int:
        return self.curves.shape[0]

    def curve(self, j: int) -> BezierCurve3D:
        return BezierCurve3D(self.curves[j])

    def joints(self) -> np.ndarray:
        """Free control points: (4, 3) for a sketch, (12, 3) for an icon."""
        if self.kind is PathKind.SKETCH:
            return self.curves[0].copy()
        return self.curves[:, :3, :].reshape(12, 3).copy()


# curve k of an icon path, as rows of the 12-point joint layout
ICON_CURVE_INDEX = np.array([[3 * k, 3 * k + 1, 3 * k + 2, (3 * k + 3) % 12] for k in range(4)])


@dataclass(frozen=True)
class Scene3DVG:
    paths: tuple[Path3D, ...]

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def kind(self) -> PathKind | None:
        return self.paths[0].kind if self.paths else None

    def curves(self) -> np.ndarray:
        """All curves of the scene stacked in path order, shape (n_curves, 4, 3)."""
        if not self.paths:
            return np.zeros((0, 4, 3))
        return np.concatenate([p.curves for p in self.paths], axis=0)

    def curve_owner(self) -> np.ndarray:
        return np.concatenate([np.full(p.n_curves, i) for i, p in enumerate(self.paths)]).astype(int)


def bernstein_weights(t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t={t} outside [0, 1]")
    s = 1.0 - t
    return np.array([s * s * s, 3.0 * t * s * s, 3.0 * t * t * s, t * t * t])


def bernstein_matrix(ts: np.ndarray) -> np.ndarray:
    """Rows of cubic Bernstein weights for each t; shape (len(ts), 4)."""
    ts = np.asarray(ts, dtype=np.float64)
    if np.any((ts < 0.0) | (ts > 1.0)):
        raise DomainError("t outside [0, 1]")
    s = 1.0 - ts
    return np.stack([s**3, 3.0 * ts * s**2, 3.0 * ts**2 * s, ts**3], axis=-1)


def eval_curve3d(curve: BezierCurve3D | np.ndarray, t: float) -> np.ndarray:
    pts = curve.points if isinstance(curve, BezierCurve3D) else np.asarray(curve, dtype=np.float64)
    # endpoints are returned exactly, not as a weighted sum
    if t == 0.0:
        return pts[0].copy()
    if t == 1.0:
        return pts[3].copy()
    return bernstein_weights(t) @ pts


def sample_points(curve: BezierCurve3D | np.ndarray, k: int) -> np.ndarray:
    if k < 2:
        raise ValueError(f"need at least 2 samples, got k={k}")
    pts = curve.points if isinstance(curve, BezierCurve3D) else np.asarray(curve, dtype=np.float64)
    return np.stack([eval_curve3d(pts, i / (k - 1)) for i in range(k)])


@dataclass(frozen=True)
class Violation:
    path: int
    code: str
    message: str
    joint: int | None = None


def validate_scene(scene: Scene3DVG) -> list[Violation]:
    """Collect every invariant violation; an empty list means the scene is valid."""
    out: list[Violation] = []
    if scene.n_paths < 1:
        out.append(Violation(-1, "empty", "scene has no paths"))
        return out
    kinds = {p.kind for p in scene.paths}
    if len(kinds) > 1:
        out.append(Violation(-1, "mixed-kind", f"scene mixes path kinds {sorted(k.value for k in kinds)}"))
    for i, path in enumerate(scene.paths):
        want = path.kind.n_curves
        if path.n_curves != want:
            out.append(Violation(i, "curve-count", f"path {i}: {path.kind.value} needs {want} curves, has {path.n_curves}"))
        if path.kind is PathKind.ICONOGRAPHY and path.n_curves == 4:
            for j in range(4):
                nxt = (j + 1) % 4
                if not np.array_equal(path.curves[j, 3], path.curves[nxt, 0]):
                    out.append(Violation(
                        i, "open-joint",
                        f"path {i}: curve {j} end does not meet curve {nxt} start", joint=j))
        bad = [c for c, v in zip("rgba", path.color) if not 0.0 <= v <= 1.0]
        if bad:
            out.append(Violation(i, "color-range", f"path {i}: color channels {','.join(bad)} outside [0, 1]"))
        op = path.opacity
        if op.kind is OpacityKind.TRAINED and not 0.0 <= (op.value or 0.0) <= 1.0:
            out.append(Violation(i, "opacity-range", f"path {i}: trained opacity {op.value} outside [0, 1]"))
    return out


def sketch_scene(curves: np.ndarray, color: Sequence[float] = (0, 0, 0, 1),
                 stroke_width: float = DEFAULT_STROKE_WIDTH) -> Scene3DVG:
    curves = np.asarray(curves, dtype=np.float64).reshape(-1, 4, 3)
    return Scene3DVG(tuple(Path3D(PathKind.SKETCH, c[None], np.array(color, dtype=float), stroke_width)
                           for c in curves))


# --- JSON ---------------------------------------------------------------

def scene_to_dict(scene: Scene3DVG) -> dict:
    kind = scene.kind.value if scene.kind else PathKind.SKETCH.value
    paths = []
    for p in scene.paths:
        entry = {
            "curves": p.curves.tolist(),
            "color": p.color.tolist(),
            "stroke_width": float(p.stroke_width),
        }
        paths.append(entry)
    return {"kind": kind, "paths": paths}


def scene_from_dict(data: dict) -> Scene3DVG:
    try:
        kind = PathKind(data["kind"])
        paths = []
        for entry in data["paths"]:
            paths.append(Path3D(
                kind,
                np.asarray(entry["curves"], dtype=np.float64),
                np.asarray(entry.get("color", [0, 0, 0, 1]), dtype=np.float64),
                float(entry.get("stroke_width", DEFAULT_STROKE_WIDTH)),
            ))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"bad scene data: {exc}") from exc
    return Scene3DVG(tuple(paths))


def save_scene(scene: Scene3DVG, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path: str | Path) -> Scene3DVG:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc
    return scene_from_dict(data)


def curve_points_dense(curves: Iterable[np.ndarray], n: int = 64) -> np.ndarray:
    """Dense samples of every curve, used for Chamfer comparisons."""
    B = bernstein_matrix(np.linspace(0.0, 1.0, n))
    return np.concatenate([B @ np.asarray(c) for c in curves], axis=0)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean nearest-neighbor distance, averaged over both directions."""
    from scipy.spatial import cKDTree

    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))


def unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("cannot normalize a zero vector")
    return np.asarray(v, dtype=np.float64) / n
