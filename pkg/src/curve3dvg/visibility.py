"""View-dependent curve visibility.

Two signals decide whether a curve is drawn at full strength from a view:
a learned per-point importance (an MLP over positionally encoded points
and the view direction), and a depth vote that compares each curve
sample against the front surface seen from the camera and the back
surface seen from the opposite (antipodal) camera.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .camera import Camera, load_camera, save_camera
from .project import BehindCameraError, project_points_torch
from .scene import OpacityState, Scene3DVG, bernstein_matrix, sample_points


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class VisibilityConfig:
    tau_alpha: float = 0.75
    alpha_depth: float = 0.25
    k_points: int = 8
    vote_fraction: float = 0.5
    opacity_high: float = 1.0
    opacity_low: float = 0.2
    n_freqs: int = 6
    hidden: int = 64

    def __post_init__(self):
        if not 0.0 < self.tau_alpha < 1.0:
            raise ValueError("tau_alpha must lie in (0, 1)")
        if not self.alpha_depth > 0.0:
            raise ValueError("alpha_depth must be positive")
        if self.k_points < 2:
            raise ValueError("k_points must be at least 2")
        if not 0.0 < self.vote_fraction <= 1.0:
            raise ValueError("vote_fraction must lie in (0, 1]")


def positional_encoding(p, L: int):
    """[sin(2^j pi p), cos(2^j pi p)] for j = 0..L-1, three coordinates each; length 6L."""
    if L < 1:
        raise ValueError("L must be at least 1")
    if isinstance(p, torch.Tensor):
        parts = []
        for j in range(L):
            parts += [torch.sin(2.0**j * torch.pi * p), torch.cos(2.0**j * torch.pi * p)]
        return torch.cat(parts, dim=-1)
    p = np.asarray(p, dtype=np.float64)
    parts = []
    for j in range(L):
        parts += [np.sin(2.0**j * np.pi * p), np.cos(2.0**j * np.pi * p)]
    return np.concatenate(parts, axis=-1)


class ImportanceNet(nn.Module):
    """Sigmoid MLP scoring a 3D point's importance from a view direction."""

    def __init__(self, n_freqs: int = 6, hidden: int = 64, seed: int = 0, zero_last: bool = True):
        super().__init__()
        self.n_freqs = n_freqs
        gen = torch.Generator().manual_seed(seed)
        dims = [6 * n_freqs + 3, hidden, hidden, 1]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=torch.float64) for a, b in zip(dims[:-1], dims[1:]))
        with torch.no_grad():
            for lin in self.layers:
                bound = 1.0 / np.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            if zero_last:
                self.layers[-1].weight.zero_()
                self.layers[-1].bias.zero_()

    def logits(self, points: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
        enc = positional_encoding(points, self.n_freqs)
        v = view_dir.to(points.dtype).expand(*points.shape[:-1], 3)
        h = torch.cat([enc, v], dim=-1)
        for lin in self.layers[:-1]:
            h = torch.relu(lin(h))
        return self.layers[-1](h)[..., 0]

    def forward(self, points: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(points, view_dir))


def view_direction(cam: Camera) -> torch.Tensor:
    return torch.as_tensor(cam.forward, dtype=torch.float64)


def importance(net: ImportanceNet, p, cam: Camera) -> float:
    with torch.no_grad():
        return float(net(torch.as_tensor(np.asarray(p, dtype=np.float64)), view_direction(cam)))


def curve_samples_torch(curves: torch.Tensor, k: int) -> torch.Tensor:
    """k uniform samples on each cubic; curves (C, 4, 3) -> (C, k, 3)."""
    B = torch.as_tensor(bernstein_matrix(np.linspace(0.0, 1.0, k)), dtype=curves.dtype)
    return torch.einsum("sk,ckd->csd", B, curves)


def curve_importance_torch(net: ImportanceNet, curves: torch.Tensor, cam: Camera, k: int) -> torch.Tensor:
    """Mean importance over k samples per curve, differentiable in the curves and the net."""
    return net(curve_samples_torch(curves, k), view_direction(cam)).mean(dim=-1)


def path_importance(net: ImportanceNet, scene: Scene3DVG, cam: Camera, cfg: VisibilityConfig) -> np.ndarray:
    """Per-path importance; an icon path averages its four curves."""
    with torch.no_grad():
        per_curve = curve_importance_torch(net, torch.as_tensor(scene.curves()), cam, cfg.k_points).numpy()
    owner = scene.curve_owner()
    return np.bincount(owner, weights=per_curve, minlength=scene.n_paths) / np.bincount(owner, minlength=scene.n_paths)


def curve_importance_filter(net: ImportanceNet, scene: Scene3DVG, cam: Camera,
                            cfg: VisibilityConfig = VisibilityConfig()) -> tuple[np.ndarray, set[int]]:
    """Per-path importance and the set of paths whose importance falls below tau_alpha."""
    imp = path_importance(net, scene, cam, cfg)
    return imp, {i for i, v in enumerate(imp) if v < cfg.tau_alpha}


# --- depth maps and voting ---------------------------------------------

@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray  # (H, W) float32 camera-space z; +inf where no surface
    camera: Camera

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        if d.shape != (self.camera.height, self.camera.width):
            raise ValueError(f"depth shape {d.shape} does not match camera {self.camera.height}x{self.camera.width}")
        finite = np.isfinite(d)
        if np.any(d[finite] <= 0):
            raise ValueError("finite depths must be positive")
        object.__setattr__(self, "depth", d)

    @property
    def width(self) -> int:
        return self.camera.width

    @property
    def height(self) -> int:
        return self.camera.height

    def lookup(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear depth at normalized coordinates (..., 2).

        Missing neighbors (outside the image or +inf) are dropped and the
        remaining weights renormalized. Returns +inf when no finite
        neighbor exists and nan when the point falls outside the image.
        """
        xy = np.asarray(xy, dtype=np.float64)
        H, W = self.depth.shape
        S = min(W, H) / 2.0
        px = W / 2.0 + xy[..., 0] * S
        py = H / 2.0 - xy[..., 1] * S
        outside = (px < 0) | (px > W) | (py < 0) | (py > H)
        fx, fy = px - 0.5, py - 0.5
        x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
        wx, wy = fx - x0, fy - y0
        acc = np.zeros(px.shape)
        wsum = np.zeros(px.shape)
        depth = self.depth.astype(np.float64)
        for dx, dy, w in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)), (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
            xi, yi = x0 + dx, y0 + dy
            inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            val = np.where(inb, depth[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], np.inf)
            ok = np.isfinite(val) & (w > 0)
            acc += np.where(ok, w * np.where(ok, val, 0.0), 0.0)
            wsum += np.where(ok, w, 0.0)
        out = np.where(wsum > 0, acc / np.where(wsum > 0, wsum, 1.0), np.inf)
        return np.where(outside, np.nan, out)


@dataclass
class VoteResult:
    visible: bool
    votes: np.ndarray  # (k,) bool per sample
    front_residual: np.ndarray
    back_residual: np.ndarray
    tau_d: np.ndarray


def _project_np(cam: Camera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xy, z = project_points_torch(cam, torch.as_tensor(pts))
    return xy.numpy(), z.numpy()


def vote_points(points: np.ndarray, cam: Camera, depth_front: DepthMap, depth_back: DepthMap,
                cfg: VisibilityConfig = VisibilityConfig()) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-point antipodal depth votes for arbitrary 3D points (P, 3)."""
    if not depth_front.camera.same_as(cam):
        raise ConfigurationError("front depth map was not rendered from the voting camera")
    back_cam = cam.antipodal()
    if not depth_back.camera.same_as(back_cam):
        raise ConfigurationError("back depth map was not rendered from the antipodal camera")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    try:
        xy_f, z_f = _project_np(cam, pts)
        xy_b, z_b = _project_np(back_cam, pts)
    except BehindCameraError as exc:
        raise ConfigurationError(f"curve sample behind a voting camera: {exc}") from None
    D = depth_front.lookup(xy_f)
    Db = depth_back.lookup(xy_b)
    missing = ~np.isfinite(D) | ~np.isfinite(Db)
    with np.errstate(invalid="ignore"):
        r_f = np.abs(z_f - D)
        r_b = np.abs(z_b - Db)
        tau = cfg.alpha_depth * np.abs(D - Db)
        votes = np.where(missing, True, r_f - tau < r_b)
    return votes.astype(bool), r_f, r_b, tau


def antipodal_vote(curve, cam: Camera, depth_front: DepthMap, depth_back: DepthMap,
                   cfg: VisibilityConfig = VisibilityConfig()) -> VoteResult:
    pts = sample_points(curve, cfg.k_points)
    votes, r_f, r_b, tau = vote_points(pts, cam, depth_front, depth_back, cfg)
    return VoteResult(bool(votes.sum() > cfg.vote_fraction * len(votes)), votes, r_f, r_b, tau)


def path_votes(scene: Scene3DVG, cam: Camera, depth_front: DepthMap, depth_back: DepthMap,
               cfg: VisibilityConfig = VisibilityConfig()) -> np.ndarray:
    """Visibility verdict per path; an icon path pools the samples of its four curves."""
    if scene.n_paths == 0:
        return np.zeros(0, dtype=bool)
    B = bernstein_matrix(np.linspace(0.0, 1.0, cfg.k_points))
    pts = np.einsum("sk,ckd->csd", B, scene.curves()).reshape(-1, 3)
    votes, *_ = vote_points(pts, cam, depth_front, depth_back, cfg)
    owner = np.repeat(scene.curve_owner(), cfg.k_points)
    yes = np.bincount(owner, weights=votes.astype(np.float64), minlength=scene.n_paths)
    total = np.bincount(owner, minlength=scene.n_paths)
    return yes > cfg.vote_fraction * total


def resolve_opacities(scene: Scene3DVG, importance: np.ndarray, non_important: set[int],
                      votes: np.ndarray | None, mode: str,
                      cfg: VisibilityConfig = VisibilityConfig()) -> list[OpacityState]:
    """Opacity state per path.

    Train: paths in the non-important set carry their importance as a
    trained opacity, the rest are fixed high. Inference: fixed high when
    the importance clears tau_alpha or the depth vote says visible, else
    fixed low.
    """
    out = []
    for i in range(scene.n_paths):
        if mode == "train":
            out.append(OpacityState.trained(importance[i]) if i in non_important else OpacityState.high())
        elif mode == "inference":
            visible = votes is not None and bool(votes[i])
            out.append(OpacityState.high() if importance[i] >= cfg.tau_alpha or visible else OpacityState.low())
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return out


# --- depth map files -------------------------------------------------------

PFM_INF = 1e30


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows stored bottom to top, +inf as 1e30."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    a = np.where(np.isinf(a) & (a > 0), np.float32(PFM_INF), a)
    H, W = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise ValueError(f"{path}: not a single-channel PFM file")
    W, H = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    if len(body) != 4 * W * H:
        raise ValueError(f"{path}: expected {W * H} floats, found {len(body) // 4}")
    a = np.frombuffer(body, dtype=dtype).reshape(H, W)[::-1].astype(np.float32)
    return np.where(a >= np.float32(PFM_INF), np.float32(np.inf), a)


def save_depth_map(dm: DepthMap, path) -> None:
    """PFM plus a sidecar camera JSON next to it (same stem, .json)."""
    path = Path(path)
    write_pfm(path, dm.depth)
    save_camera(dm.camera, path.with_suffix(".json"))


def load_depth_map(path, camera: Camera | None = None) -> DepthMap:
    path = Path(path)
    if camera is None:
        side = path.with_suffix(".json")
        if not side.exists():
            raise FileNotFoundError(f"missing camera sidecar {side}")
        camera = load_camera(side)
    return DepthMap(read_pfm(path), camera)
