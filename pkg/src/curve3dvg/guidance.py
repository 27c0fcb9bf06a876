"""Guidance images for fitting.

Two producers feed the optimizer. The analytic oracle ray-casts spheres
and boxes, draws their silhouettes and sharp edges as dark lines on white,
and blurs the drawing by an amount tied to the guidance scale of the
sampled timestep. Scene guidance renders a known 3D vector scene instead,
which is what closed-loop recovery runs use. Either stream can be written
to disk and read back, so externally produced guidance can be ingested too.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .camera import Camera, CameraSamplerConfig, load_camera, sample_camera, save_camera
from .render import render_scene
from .scene import OpacityState, Scene3DVG, bernstein_matrix
from .schedule import ScheduleConfig, anneal_timestep, blur_sigma, cfg_scale
from .visibility import DepthMap, read_pfm, write_pfm

SIGMA_MAX = 4.0


class GuidanceError(ValueError):
    """Malformed or incomplete guidance on disk."""


class GuidanceExhausted(RuntimeError):
    """The stream has no samples for a requested step."""


# --- primitives --------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest positive ray parameter and outward normal; t = inf on a miss."""
        c = np.asarray(self.center, dtype=np.float64)
        oc = origin - c
        a = np.einsum("...k,...k->...", dirs, dirs)
        b = np.einsum("...k,k->...", dirs, oc)
        disc = b * b - a * (oc @ oc - self.radius**2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - root) / a
        t1 = (-b + root) / a
        t = np.where(t0 > 0, t0, t1)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        hit = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        return t, (hit - c) / self.radius

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        v = rng.normal(size=(n, 3))
        return np.asarray(self.center) + self.radius * v / np.linalg.norm(v, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half) <= 0:
            raise ValueError("box half-extents must be positive")

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (c - h - origin) * inv
            tb = (c + h - origin) * inv
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        lo = np.where(np.isnan(lo), -np.inf, lo)
        hi = np.where(np.isnan(hi), np.inf, hi)
        t_in = lo.max(axis=-1)
        t_out = hi.min(axis=-1)
        axis = lo.argmax(axis=-1)
        ok = (t_in <= t_out) & (t_in > 0)
        t = np.where(ok, t_in, np.inf)
        normal = np.zeros(dirs.shape)
        sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
        np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
        return t, normal

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        h = np.asarray(self.half)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        p = rng.uniform(-1, 1, size=(n, 3))
        ax = face % 3
        p[np.arange(n), ax] = np.where(face < 3, 1.0, -1.0)
        return np.asarray(self.center) + p * h

    def to_dict(self) -> dict:
        return {"type": "box", "center": list(self.center), "half": list(self.half)}


def primitive_from_dict(d: dict):
    kind = d.get("type")
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["half"]))
    raise ValueError(f"unknown primitive type {kind!r}")


@dataclass(frozen=True)
class EdgeStyle:
    line_width: float = 1.5  # pixels
    ink: float = 0.1  # gray level of a fully inked pixel
    crease_deg: float = 30.0
    depth_jump: float = 0.05  # relative depth step that counts as a silhouette


@dataclass(frozen=True)
class OracleScene:
    primitives: tuple = ()
    edge_style: EdgeStyle = EdgeStyle()
    max_radius: float = 3.5

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("oracle scene needs at least one primitive")
        for i, p in enumerate(self.primitives):
            if p.bound >= self.max_radius:
                raise ValueError(f"primitive {i} reaches {p.bound:.3f}, outside the camera radius {self.max_radius}")

    def to_dict(self) -> dict:
        s = self.edge_style
        return {"primitives": [p.to_dict() for p in self.primitives],
                "edge_style": {"line_width": s.line_width, "ink": s.ink,
                               "crease_deg": s.crease_deg, "depth_jump": s.depth_jump}}

    @classmethod
    def from_dict(cls, d: dict) -> OracleScene:
        return cls(tuple(primitive_from_dict(p) for p in d["primitives"]), EdgeStyle(**d.get("edge_style", {})))


def preset_oracle(name: str) -> OracleScene:
    if name == "sphere":
        return OracleScene((Sphere((0.0, 0.0, 0.0), 0.8),))
    if name == "sphere-box":
        return OracleScene((Sphere((-0.38, 0.0, 0.0), 0.42), Box((0.42, 0.0, 0.0), (0.3, 0.3, 0.3))))
    raise ValueError(f"unknown oracle preset {name!r}; choose sphere or sphere-box")


def load_oracle(spec: str) -> OracleScene:
    """Preset name or path to an oracle JSON file."""
    p = Path(spec)
    if p.suffix == ".json" or p.exists():
        return OracleScene.from_dict(json.loads(p.read_text()))
    return preset_oracle(spec)


# --- ray casting -------------------------------------------------------------

def ray_cast(scene: OracleScene, origin: np.ndarray, dirs: np.ndarray):
    """Front-most hit over all primitives: (t, primitive id or -1, normal)."""
    t_best = np.full(dirs.shape[:-1], np.inf)
    ids = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    normal = np.zeros(dirs.shape)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        ids = np.where(closer, i, ids)
        normal = np.where(closer[..., None], n, normal)
    return t_best, ids, normal


def render_depth(scene: OracleScene, camera: Camera) -> DepthMap:
    """Camera-space z of the front surface at every pixel center."""
    origin, dirs = camera.pixel_rays()
    t, _, _ = ray_cast(scene, origin, dirs)
    return DepthMap(t.astype(np.float32), camera)


def occluded(scene: OracleScene, camera: Camera, points: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Brute-force occlusion: does any surface cut the segment from the camera to each point?

    Points on a surface count as unoccluded by that surface; tol is the
    slack along the ray, in scene units.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = pts - camera.position
    t, _, _ = ray_cast(scene, camera.position, d)
    return t < 1.0 - tol / np.linalg.norm(d, axis=-1)


def line_drawing(scene: OracleScene, camera: Camera) -> np.ndarray:
    """Silhouette and crease lines, (H, W) gray in [0, 1]; white where empty."""
    origin, dirs = camera.pixel_rays()
    t, ids, normal = ray_cast(scene, origin, dirs)
    style = scene.edge_style
    H, W = ids.shape
    edge = np.zeros((H, W), dtype=bool)
    cos_crease = np.cos(np.radians(style.crease_deg))
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis], b[axis] = slice(0, -1), slice(1, None)
        ia, ib = ids[tuple(a)], ids[tuple(b)]
        ta, tb = t[tuple(a)], t[tuple(b)]
        na, nb = normal[tuple(a)], normal[tuple(b)]
        with np.errstate(invalid="ignore"):
            jump = np.abs(ta - tb) > style.depth_jump * np.minimum(ta, tb)
        crease = np.einsum("...k,...k->...", na, nb) < cos_crease
        boundary = (ia != ib) | ((ia >= 0) & (ib >= 0) & (jump | crease))
        # ink the nearer side so lines sit on the object
        near_a = boundary & (ta <= tb)
        near_b = boundary & (tb < ta)
        edge[tuple(a)] |= near_a & (ia >= 0)
        edge[tuple(b)] |= near_b & (ib >= 0)
    sigma = style.line_width / 2.355
    strength = gaussian_filter(edge.astype(np.float64), sigma, mode="nearest")
    strength = np.clip(strength / strength.max(), 0.0, 1.0) if strength.max() > 0 else strength
    return 1.0 - (1.0 - style.ink) * strength


def blur_image(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur over the two spatial axes; identity for sigma = 0."""
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64).copy()
    return gaussian_filter(np.asarray(img, dtype=np.float64), sigma=(sigma, sigma, 0), mode="nearest")


# --- samples -----------------------------------------------------------------

@dataclass
class GuidanceSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth_front: DepthMap
    depth_back: DepthMap
    camera: Camera
    step: int
    t: int
    cfg_scale: float = 1.0
    camera_id: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        cam = self.camera
        if self.image.shape != (cam.height, cam.width, 3):
            raise ValueError(f"image shape {self.image.shape} does not match camera {cam.height}x{cam.width}")
        for name, dm in (("front", self.depth_front), ("back", self.depth_back)):
            if dm.depth.shape != (cam.height, cam.width):
                raise ValueError(f"{name} depth resolution does not match camera")


def guidance_sigma(t: int, cfg: ScheduleConfig, mode: str = "c2f", sigma_max: float = SIGMA_MAX) -> float:
    """Blur for a timestep. Fixed-scale modes pin the guidance scale at one end."""
    if mode == "c2f":
        return blur_sigma(cfg_scale(t, cfg), cfg, sigma_max)
    if mode == "fine":
        return blur_sigma(cfg.lambda1, cfg, sigma_max)
    if mode == "coarse":
        return blur_sigma(cfg.lambda0, cfg, sigma_max)
    raise ValueError(f"unknown guidance mode {mode!r}")


def oracle_render(scene: OracleScene, camera: Camera, step: int, cfg: ScheduleConfig,
                  rng: np.random.Generator | None = None, t: int | None = None,
                  mode: str = "c2f", camera_id: int = 0) -> GuidanceSample:
    """Line drawing of the oracle from a camera, blurred for the step's timestep."""
    if t is None:
        t = anneal_timestep(step, cfg, rng if rng is not None else np.random.default_rng(step))
    gray = line_drawing(scene, camera)
    img = blur_image(np.repeat(gray[..., None], 3, axis=-1), guidance_sigma(t, cfg, mode))
    return GuidanceSample(img, render_depth(scene, camera), render_depth(scene, camera.antipodal()),
                          camera, step, t, cfg_scale(t, cfg), camera_id)


# --- streams -----------------------------------------------------------------

class OracleGuidance:
    """Fresh random cameras every step, targets drawn by the analytic oracle.

    Every stream exposes batch(step, t, rng); the fitting loop owns the
    timestep draw so its log replays exactly from the seed.
    """

    def __init__(self, oracle: OracleScene, schedule: ScheduleConfig, batch: int = 4,
                 sampler: CameraSamplerConfig = CameraSamplerConfig(), mode: str = "c2f"):
        self.oracle, self.schedule, self.batch_size = oracle, schedule, batch
        self.sampler, self.mode = sampler, mode

    def batch(self, step: int, t: int, rng: np.random.Generator) -> list[GuidanceSample]:
        cams = [sample_camera(rng, self.sampler) for _ in range(self.batch_size)]
        return [oracle_render(self.oracle, c, step, self.schedule, t=t, mode=self.mode, camera_id=i)
                for i, c in enumerate(cams)]


@dataclass
class _View:
    camera: Camera
    clean: np.ndarray
    front: DepthMap
    back: DepthMap


class SceneGuidance:
    """Targets rendered from a known scene over a fixed set of training views.

    Depth maps come from the oracle surfaces the scene is drawn on. Paths
    hidden from a view (by the brute-force occlusion test) are drawn at
    the low opacity, the look visibility-aware rendering aims for.
    """

    def __init__(self, target: Scene3DVG, oracle: OracleScene, cameras: Sequence[Camera],
                 schedule: ScheduleConfig, batch: int = 4, mode: str = "c2f", k_points: int = 8):
        if batch > len(cameras):
            raise ValueError("batch larger than the number of training views")
        self.schedule, self.batch_size, self.mode = schedule, batch, mode
        self.views = [_View(c, target_image(target, oracle, c, k_points), render_depth(oracle, c),
                            render_depth(oracle, c.antipodal())) for c in cameras]

    def batch(self, step: int, t: int, rng: np.random.Generator) -> list[GuidanceSample]:
        pick = rng.choice(len(self.views), size=self.batch_size, replace=False)
        sigma = guidance_sigma(t, self.schedule, self.mode)
        scale = cfg_scale(t, self.schedule)
        return [GuidanceSample(blur_image(self.views[i].clean, sigma), self.views[i].front, self.views[i].back,
                               self.views[i].camera, step, t, scale, int(i)) for i in pick]


def path_hidden(target: Scene3DVG, oracle: OracleScene, camera: Camera, k_points: int = 8) -> np.ndarray:
    """A path is hidden when most of its samples are occluded from the camera."""
    B = bernstein_matrix(np.linspace(0.0, 1.0, k_points))
    pts = np.einsum("sk,ckd->csd", B, target.curves()).reshape(-1, 3)
    occ = occluded(oracle, camera, pts, tol=2e-2)
    owner = np.repeat(target.curve_owner(), k_points)
    frac = np.bincount(owner, weights=occ.astype(np.float64), minlength=target.n_paths)
    return frac > 0.5 * np.bincount(owner, minlength=target.n_paths)


def target_image(target: Scene3DVG, oracle: OracleScene, camera: Camera, k_points: int = 8) -> np.ndarray:
    hidden = path_hidden(target, oracle, camera, k_points)
    states = [OpacityState.low() if h else OpacityState.high() for h in hidden]
    return render_scene(target, camera, states)[..., :3]


class StreamGuidance:
    """Replays ingested samples grouped by step."""

    def __init__(self, samples: Sequence[GuidanceSample]):
        self.by_step: dict[int, list[GuidanceSample]] = {}
        for s in samples:
            self.by_step.setdefault(s.step, []).append(s)

    def batch(self, step: int, t: int, rng: np.random.Generator) -> list[GuidanceSample]:
        """Ingested samples carry their own timestep; t is ignored."""
        if step not in self.by_step:
            raise GuidanceExhausted(f"no guidance for step {step}")
        return self.by_step[step]


# --- disk layout -------------------------------------------------------------

def _png_write(path: Path, img: np.ndarray) -> None:
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG", compress_level=6)


def _png_read(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def export_guidance(samples: Sequence[GuidanceSample], directory) -> None:
    """Write step_{s:05}/cam_{c:02}.{png,front.pfm,back.pfm,json} plus meta.json per step."""
    root = Path(directory)
    meta: dict[int, dict] = {}
    for s in samples:
        d = root / f"step_{s.step:05d}"
        d.mkdir(parents=True, exist_ok=True)
        stem = f"cam_{s.camera_id:02d}"
        _png_write(d / f"{stem}.png", s.image)
        write_pfm(d / f"{stem}.front.pfm", s.depth_front.depth)
        write_pfm(d / f"{stem}.back.pfm", s.depth_back.depth)
        save_camera(s.camera, d / f"{stem}.json")
        prev = meta.setdefault(s.step, {"t": int(s.t), "cfg_scale": float(s.cfg_scale)})
        if prev["t"] != s.t:
            raise ValueError(f"step {s.step} mixes timesteps {prev['t']} and {s.t}")
    for step, m in meta.items():
        (root / f"step_{step:05d}" / "meta.json").write_text(json.dumps({"step": step, **m}, indent=2))


def load_guidance(directory) -> list[GuidanceSample]:
    """Read a guidance directory, validated and sorted by (step, camera id)."""
    root = Path(directory)
    if not root.is_dir():
        raise GuidanceError(f"{root} is not a directory")
    out = []
    for d in sorted(root.glob("step_*")):
        try:
            step = int(d.name.split("_", 1)[1])
        except ValueError:
            raise GuidanceError(f"{d}: step directory name must be step_NNNNN") from None
        meta_path = d / "meta.json"
        if not meta_path.exists():
            raise GuidanceError(f"missing {meta_path}")
        meta = json.loads(meta_path.read_text())
        for png in sorted(d.glob("cam_*.png")):
            stem = png.name[: -len(".png")]
            cam_path = d / f"{stem}.json"
            front_path = d / f"{stem}.front.pfm"
            back_path = d / f"{stem}.back.pfm"
            for p in (cam_path, front_path, back_path):
                if not p.exists():
                    raise GuidanceError(f"missing {p}")
            cam = load_camera(cam_path)
            img = _png_read(png)
            front, back = read_pfm(front_path), read_pfm(back_path)
            for p, a in ((png, img[..., 0]), (front_path, front), (back_path, back)):
                if a.shape != (cam.height, cam.width):
                    raise GuidanceError(f"{p}: resolution {a.shape[1]}x{a.shape[0]} does not match camera "
                                        f"{cam.width}x{cam.height}")
            out.append(GuidanceSample(img, DepthMap(front, cam), DepthMap(back, cam.antipodal()), cam, step,
                                      int(meta["t"]), float(meta["cfg_scale"]), int(stem.split("_")[1])))
    out.sort(key=lambda s: (s.step, s.camera_id))
    return out
