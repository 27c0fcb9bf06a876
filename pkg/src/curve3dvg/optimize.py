"""Multi-view fitting: image distances, Adam, the training loop, and metrics."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .camera import Camera
from .guidance import GuidanceSample, OracleScene, render_depth
from .render import SceneParams, render_tensor
from .scene import PathKind, Path3D, Scene3DVG, save_scene, load_scene
from .schedule import ScheduleConfig, anneal_timestep
from .visibility import (ImportanceNet, VisibilityConfig, curve_importance_torch, path_importance,
                         path_votes, resolve_opacities)


class RunError(RuntimeError):
    pass


# --- image distances -------------------------------------------------------

_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=torch.float64) / 16.0


def _blur_down(img: torch.Tensor) -> torch.Tensor:
    """5-tap binomial blur with edge replication, then keep every other pixel."""
    x = img.permute(2, 0, 1)[:, None]  # (C, 1, H, W)
    k = _BINOMIAL.to(img.dtype)
    x = F.conv2d(F.pad(x, (2, 2, 0, 0), mode="replicate"), k.view(1, 1, 1, 5))
    x = F.conv2d(F.pad(x, (0, 0, 2, 2), mode="replicate"), k.view(1, 1, 5, 1))
    return x[:, 0, ::2, ::2].permute(1, 2, 0)


def gaussian_pyramid(img: torch.Tensor, levels: int = 4) -> list[torch.Tensor]:
    out = [img]
    for _ in range(levels - 1):
        out.append(_blur_down(out[-1]))
    return out


def pixel_l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared difference summed over channels, averaged over pixels."""
    return ((a - b) ** 2).sum(-1).mean()


def pyramid_l2(a: torch.Tensor, b: torch.Tensor, levels: int = 4) -> torch.Tensor:
    # blurring is linear, so a constant offset survives every level unchanged
    terms = [pixel_l2(x, y) for x, y in zip(gaussian_pyramid(a, levels), gaussian_pyramid(b, levels))]
    return torch.stack(terms).mean()


DISTANCES: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "pyramid-l2": pyramid_l2,
    "l2": pixel_l2,
}


def register_distance(name: str, fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]) -> None:
    """Plug in an image distance, e.g. a perceptual or embedding-space metric."""
    if name == "off":
        raise ValueError("'off' is reserved")
    DISTANCES[name] = fn


@dataclass(frozen=True)
class LossConfig:
    structural_distance: str = "pyramid-l2"
    semantic_distance: str = "off"
    weights: dict = field(default_factory=lambda: {"structural": 1.0, "semantic": 1.0})

    def __post_init__(self):
        terms = self.enabled()
        if not terms:
            raise ValueError("at least one distance must be enabled")
        for _, name in terms:
            if name not in DISTANCES:
                raise ValueError(f"unknown distance plugin {name!r}")

    def enabled(self) -> list[tuple[str, str]]:
        return [(term, name) for term, name in (("structural", self.structural_distance),
                                                ("semantic", self.semantic_distance)) if name != "off"]

    def to_dict(self) -> dict:
        return {"structural_distance": self.structural_distance, "semantic_distance": self.semantic_distance,
                "weights": dict(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> LossConfig:
        return cls(**{k: d[k] for k in ("structural_distance", "semantic_distance", "weights") if k in d})


def loss_terms(rendered: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> dict[str, torch.Tensor]:
    if rendered.shape != target.shape:
        raise ValueError(f"resolution mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return {term: cfg.weights.get(term, 1.0) * DISTANCES[name](rendered, target) for term, name in cfg.enabled()}


def image_loss(rendered: np.ndarray, target: np.ndarray, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Weighted distance and its gradient with respect to the rendered image."""
    r = torch.tensor(np.asarray(rendered, dtype=np.float64), requires_grad=True)
    t = torch.as_tensor(np.asarray(target, dtype=np.float64))
    total = sum(loss_terms(r, t, cfg).values())
    (g,) = torch.autograd.grad(total, r)
    return float(total.detach()), g.numpy()


# --- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, list[torch.Tensor]] = field(default_factory=dict)
    v: dict[str, list[torch.Tensor]] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, list[torch.Tensor]],
              grads: dict[str, list[torch.Tensor | None]]) -> None:
    """Bias-corrected Adam update, in place, one learning rate per group."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for group, tensors in params.items():
            ms = state.m.setdefault(group, [torch.zeros_like(p) for p in tensors])
            vs = state.v.setdefault(group, [torch.zeros_like(p) for p in tensors])
            lr = state.lr[group]
            for p, g, m, v in zip(tensors, grads[group], ms, vs):
                if g is None:
                    g = torch.zeros_like(p)
                if g.shape != p.shape:
                    raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
                m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
                v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
                p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# --- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    total_steps: int = 2000
    batch_cameras: int = 4
    seed: int = 0
    n_paths: int = 64
    init: str = "farthest"  # farthest | random | given
    lr_points: float = 0.001
    lr_color: float = 0.001
    lr_width: float = 0.001
    lr_net: float = 0.001
    train_width: bool = False
    visibility: bool = True
    vote_every: int = 50
    log_every: int = 1
    checkpoint_every: int = 0
    stroke_width: float = 6.0  # reference units; 1.5 px at 128, matching the oracle's lines
    resolution: int = 128

    def __post_init__(self):
        if self.batch_cameras < 1:
            raise ValueError("batch_cameras must be at least 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.init not in ("farthest", "random", "given"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --- initialization ------------------------------------------------------------

def surface_points(oracle: OracleScene, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted samples over the oracle's primitive surfaces."""
    areas = []
    for p in oracle.primitives:
        if hasattr(p, "radius"):
            areas.append(4.0 * np.pi * p.radius**2)
        else:
            hx, hy, hz = p.half
            areas.append(8.0 * (hx * hy + hy * hz + hx * hz))
    counts = rng.multinomial(n, np.asarray(areas) / np.sum(areas))
    return np.concatenate([p.sample_surface(rng, int(c)) for p, c in zip(oracle.primitives, counts)])


def farthest_point_sample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Indices of n points picked greedily to maximize the minimum spacing."""
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    for _ in range(n - 1):
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, np.linalg.norm(points - points[i], axis=1))
    return np.asarray(chosen)


def farthest_point_init(oracle: OracleScene, n_paths: int, rng: np.random.Generator, length: float = 0.3,
                        color=(0.0, 0.0, 0.0, 1.0), stroke_width: float = 1.5) -> Scene3DVG:
    """Short straight strokes centred on well-spread surface points."""
    pts = surface_points(oracle, max(4096, 8 * n_paths), rng)
    centers = pts[farthest_point_sample(pts, n_paths, int(rng.integers(len(pts))))]
    paths = []
    for c in centers:
        radial = c / (np.linalg.norm(c) + 1e-12)
        d = np.cross(radial, rng.normal(size=3))
        d /= np.linalg.norm(d)
        ctrl = c + np.outer([-0.5, -1 / 6, 1 / 6, 0.5], d * length)
        paths.append(Path3D(PathKind.SKETCH, ctrl[None], np.asarray(color, dtype=np.float64), stroke_width))
    return Scene3DVG(tuple(paths))


def random_init(n_paths: int, rng: np.random.Generator, radius: float = 1.0,
                color=(0.0, 0.0, 0.0, 1.0), stroke_width: float = 1.5) -> Scene3DVG:
    """Control points drawn uniformly inside a ball."""
    v = rng.normal(size=(n_paths, 4, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = radius * rng.uniform(size=(n_paths, 4, 1)) ** (1.0 / 3.0)
    return Scene3DVG(tuple(Path3D(PathKind.SKETCH, c[None], np.asarray(color, dtype=np.float64), stroke_width)
                           for c in v * r))


def perturb_scene(scene: Scene3DVG, sigma: float, rng: np.random.Generator) -> Scene3DVG:
    """Gaussian noise on every control point; icon joints move together so loops stay closed."""
    params = SceneParams.from_scene(scene, requires_grad=False)
    noise = torch.as_tensor(rng.normal(scale=sigma, size=tuple(params.control.shape)))
    params.control = params.control + noise
    return params.to_scene()


# --- checkpoints ---------------------------------------------------------------

def save_net(net: ImportanceNet, path) -> None:
    """uint32 tensor count, then per tensor uint32 ndim, uint32 dims, float32 data; all little-endian."""
    tensors = [t.detach().cpu().numpy() for t in net.state_dict().values()]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for a in tensors:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.astype("<f4").tobytes())


def load_net(path) -> ImportanceNet:
    raw = Path(path).read_bytes()
    (count,), off = struct.unpack_from("<I", raw, 0), 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape))
        off += 4 * n
    if off != len(raw) or count < 2:
        raise ValueError(f"{path}: malformed network blob")
    hidden, in_dim = arrays[0].shape
    net = ImportanceNet(n_freqs=(in_dim - 3) // 6, hidden=hidden)
    keys = list(net.state_dict())
    if len(keys) != count:
        raise ValueError(f"{path}: expected {len(keys)} tensors, found {count}")
    net.load_state_dict({k: torch.tensor(a, dtype=torch.float64) for k, a in zip(keys, arrays)})
    return net


def save_checkpoint(directory, scene: Scene3DVG, net: ImportanceNet) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_scene(scene, d / "scene.json")
    save_net(net, d / "net.bin")


def load_checkpoint(directory) -> tuple[Scene3DVG, ImportanceNet]:
    d = Path(directory)
    return load_scene(d / "scene.json"), load_net(d / "net.bin")


# --- fitting ---------------------------------------------------------------------

@dataclass
class FitResult:
    scene: Scene3DVG
    net: ImportanceNet
    log: list[dict]


def path_importance_torch(net: ImportanceNet, params: SceneParams, cam: Camera, k: int) -> torch.Tensor:
    per_curve = curve_importance_torch(net, params.curves(), cam, k)
    return per_curve.reshape(params.n_paths, params.kind.n_curves).mean(dim=1)


def train_opacity(net: ImportanceNet, params: SceneParams, cam: Camera,
                  cfg: VisibilityConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Opacity (trained importance below tau_alpha, fixed high above it) and the raw importance."""
    imp = path_importance_torch(net, params, cam, cfg.k_points)
    return torch.where(imp < cfg.tau_alpha, imp, torch.full_like(imp, cfg.opacity_high)), imp


def view_loss(params: SceneParams, net: ImportanceNet, sample: GuidanceSample, loss_cfg: LossConfig,
              vis_cfg: VisibilityConfig, visibility: bool) -> tuple[torch.Tensor, dict[str, torch.Tensor], torch.Tensor]:
    """Loss of one view plus the per-path importance used for it."""
    cam = sample.camera
    if visibility:
        opacity, imp = train_opacity(net, params, cam, vis_cfg)
    else:
        opacity = torch.ones(params.n_paths, dtype=params.control.dtype)
        with torch.no_grad():
            imp = path_importance_torch(net, params, cam, vis_cfg.k_points)
    img = render_tensor(params, cam, opacity)[..., :3]
    terms = loss_terms(img, torch.as_tensor(sample.image), loss_cfg)
    return sum(terms.values()), terms, imp


def fit(init: Scene3DVG, source, schedule: ScheduleConfig = ScheduleConfig(), fit_cfg: FitConfig = FitConfig(),
        loss_cfg: LossConfig = LossConfig(), vis_cfg: VisibilityConfig = VisibilityConfig(),
        net: ImportanceNet | None = None, log_path=None, checkpoint_dir=None,
        callback: Callable[[int, SceneParams], None] | None = None) -> FitResult:
    """Adam on control points, colors (and optionally widths) plus the importance net.

    Timesteps come from their own generator seeded with fit_cfg.seed, so
    the logged t column equals schedule_table(schedule, seed). View
    selection uses a second generator derived from the same seed.
    """
    if init.n_paths == 0:
        raise ValueError("cannot fit an empty scene")
    if schedule.total_steps != fit_cfg.total_steps:
        schedule = ScheduleConfig(schedule.lambda0, schedule.lambda1, schedule.t_range, schedule.N,
                                  fit_cfg.total_steps, schedule.window, schedule.alpha_bar)
    torch.manual_seed(fit_cfg.seed)
    t_rng = np.random.default_rng(fit_cfg.seed)
    view_rng = np.random.default_rng([fit_cfg.seed, 1])
    params = SceneParams.from_scene(init)
    if net is None:
        net = ImportanceNet(vis_cfg.n_freqs, vis_cfg.hidden, seed=fit_cfg.seed)
    groups = {"points": [params.control], "color": [params.color], "net": list(net.parameters())}
    lrs = {"points": fit_cfg.lr_points, "color": fit_cfg.lr_color, "net": fit_cfg.lr_net}
    if fit_cfg.train_width:
        groups["width"] = [params.width]
        lrs["width"] = fit_cfg.lr_width
    adam = AdamState(lr=lrs)
    votes_cache: dict[int, np.ndarray] = {}
    log: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(fit_cfg.total_steps):
            t = anneal_timestep(step, schedule, t_rng)
            batch = source.batch(step, t, view_rng)
            if not batch:
                raise RunError(f"guidance stream returned no samples at step {step}")
            total = 0.0
            per_term: dict[str, float] = {}
            imps = []
            for sample in batch:
                loss, terms, imp = view_loss(params, net, sample, loss_cfg, vis_cfg, fit_cfg.visibility)
                total = total + loss / len(batch)
                for k, v in terms.items():
                    per_term[k] = per_term.get(k, 0.0) + float(v.detach()) / len(batch)
                imps.append(float(imp.detach().mean()))
            flat = [p for ps in groups.values() for p in ps]
            grads = torch.autograd.grad(total, flat, allow_unused=True)
            it = iter(grads)
            adam_step(adam, groups, {g: [next(it) for _ in ps] for g, ps in groups.items()})
            with torch.no_grad():
                params.color.clamp_(0.0, 1.0)
                params.width.clamp_(min=0.1)
            if fit_cfg.visibility and fit_cfg.vote_every > 0 and step % fit_cfg.vote_every == 0:
                scene_now = params.to_scene()
                for sample in batch:
                    votes_cache[sample.camera_id] = path_votes(scene_now, sample.camera, sample.depth_front,
                                                               sample.depth_back, vis_cfg)
            rec = {"step": step, "loss_total": float(total.detach()), "loss_per_term": per_term, "t": int(batch[0].t),
                   "cfg_scale": float(batch[0].cfg_scale), "mean_importance": float(np.mean(imps))}
            if votes_cache:
                rec["visible_fraction"] = float(np.mean([v.mean() for v in votes_cache.values()]))
            log.append(rec)
            if log_fh is not None and step % fit_cfg.log_every == 0:
                log_fh.write(json.dumps(rec) + "\n")
            if checkpoint_dir is not None and fit_cfg.checkpoint_every and (step + 1) % fit_cfg.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1:05d}", params.to_scene(), net)
            if callback is not None:
                callback(step, params)
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(params.to_scene(), net, log)


# --- evaluation ------------------------------------------------------------------

def inference_opacities(scene: Scene3DVG, net: ImportanceNet, cam: Camera, oracle: OracleScene | None,
                        vis_cfg: VisibilityConfig = VisibilityConfig()) -> np.ndarray:
    """Inference-mode opacity per path. Without an oracle only importance decides."""
    imp = path_importance(net, scene, cam, vis_cfg)
    votes = None
    if oracle is not None:
        votes = path_votes(scene, cam, render_depth(oracle, cam), render_depth(oracle, cam.antipodal()), vis_cfg)
    states = resolve_opacities(scene, imp, set(), votes, "inference", vis_cfg)
    return np.array([s.multiplier(vis_cfg.opacity_high, vis_cfg.opacity_low) for s in states])


def render_views(scene: Scene3DVG, net: ImportanceNet | None, cameras: Sequence[Camera],
                 oracle: OracleScene | None = None, visibility: bool = True,
                 vis_cfg: VisibilityConfig = VisibilityConfig()) -> list[np.ndarray]:
    params = SceneParams.from_scene(scene, requires_grad=False)
    out = []
    for cam in cameras:
        if visibility and net is not None:
            op = inference_opacities(scene, net, cam, oracle, vis_cfg)
        else:
            op = np.ones(scene.n_paths)
        with torch.no_grad():
            out.append(render_tensor(params, cam, torch.as_tensor(op)).numpy())
    return out


def adjacent_view_consistency(scene: Scene3DVG, net: ImportanceNet | None, cameras: Sequence[Camera],
                              distance: str = "pyramid-l2", oracle: OracleScene | None = None,
                              visibility: bool = True, vis_cfg: VisibilityConfig = VisibilityConfig()) -> float:
    """Mean distance between consecutive renders along an ordered camera ring."""
    if len(cameras) < 3:
        raise ValueError("need at least 3 cameras")
    if scene.n_paths == 0:
        return 0.0
    fn = DISTANCES[distance]
    imgs = [torch.as_tensor(im[..., :3]) for im in render_views(scene, net, cameras, oracle, visibility, vis_cfg)]
    with torch.no_grad():
        return float(np.mean([float(fn(a, b)) for a, b in zip(imgs[:-1], imgs[1:])]))


def multiview_loss(scene: Scene3DVG, net: ImportanceNet | None, cameras: Sequence[Camera],
                   targets: Sequence[np.ndarray], oracle: OracleScene | None = None,
                   loss_cfg: LossConfig = LossConfig(), vis_cfg: VisibilityConfig = VisibilityConfig()) -> float:
    """Mean loss of inference-mode renders against fixed targets."""
    renders = render_views(scene, net, cameras, oracle, net is not None, vis_cfg)
    with torch.no_grad():
        vals = [float(sum(loss_terms(torch.as_tensor(r[..., :3]), torch.as_tensor(np.asarray(t)), loss_cfg).values()))
                for r, t in zip(renders, targets)]
    return float(np.mean(vals))
