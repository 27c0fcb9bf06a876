"""Differentiable soft rasterizer for projected strokes and filled loops.

Coordinates here are pixels: x to the right, y down, pixel (row i, col j)
has its center at (j + 0.5, i + 0.5). Coverage is a smoothstep over a
one-pixel band centered on the shape boundary, so gradients exist for
every pixel inside the band.

Each element is only evaluated on pixels near it: segment bounding boxes
for strokes, the control hull box for fills. That keeps the cost
proportional to inked area rather than to elements x pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .scene import ICON_CURVE_INDEX, bernstein_matrix

BAND = 1.0
SUBDIV_TOL = 0.25
MAX_SEGMENTS = 64


@dataclass(frozen=True)
class Canvas:
    width: int = 128
    height: int = 128
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError(f"canvas must be at least 16x16, got {self.width}x{self.height}")


@dataclass(frozen=True)
class Stroke:
    ctrl: np.ndarray  # (4, 2) pixels
    width: float
    color: np.ndarray  # RGBA
    depth_key: float = 0.0
    opacity: float = 1.0
    source: int = -1


@dataclass(frozen=True)
class Fill:
    ctrl: np.ndarray  # (4, 4, 2) closed loop of cubics, pixels
    color: np.ndarray
    depth_key: float = 0.0
    opacity: float = 1.0
    source: int = -1


@dataclass(frozen=True)
class Scene2D:
    elements: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        for i, e in enumerate(self.elements):
            if not math.isfinite(e.depth_key):
                raise ValueError(f"element {i}: depth_key must be finite")
            if isinstance(e, Fill):
                c = np.asarray(e.ctrl)
                for j in range(4):
                    if not np.allclose(c[j, 3], c[(j + 1) % 4, 0]):
                        raise ValueError(f"element {i}: fill loop is open at joint {j}")


@dataclass
class ParamGradients:
    ctrl: list[np.ndarray] = field(default_factory=list)
    width: list[float | None] = field(default_factory=list)
    color: list[np.ndarray] = field(default_factory=list)
    opacity: list[float] = field(default_factory=list)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 4)
    param_gradients: ParamGradients | None = None


class RasterInput(NamedTuple):
    """Tensor form of a Scene2D; fill or stroke tensors may have zero rows."""
    stroke_ctrl: torch.Tensor  # (Es, 4, 2)
    stroke_width: torch.Tensor  # (Es,)
    stroke_rgba: torch.Tensor  # (Es, 4)
    stroke_opacity: torch.Tensor  # (Es,)
    stroke_depth: np.ndarray  # (Es,)
    fill_ctrl: torch.Tensor  # (Ef, 12, 2) shared-joint layout, see ICON_CURVE_INDEX
    fill_rgba: torch.Tensor
    fill_opacity: torch.Tensor
    fill_depth: np.ndarray


def smoothstep(x):
    """Quintic smoothstep on [0, 1]; C2 at both ends of the band."""
    x = torch.clamp(x, 0.0, 1.0) if isinstance(x, torch.Tensor) else np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def stroke_coverage_from_distance(dist, width):
    """Coverage of a stroke of the given width at a centerline distance."""
    return smoothstep((width / 2.0 - dist) / BAND + 0.5)


def segment_count(ctrl: np.ndarray, tol: float = SUBDIV_TOL) -> np.ndarray:
    """Uniform subdivision count keeping a cubic within tol of its polyline.

    ctrl has shape (..., 4, 2); the bound is the standard second-difference
    flatness estimate for degree-3 curves.
    """
    ctrl = np.asarray(ctrl, dtype=np.float64)
    d1 = np.linalg.norm(ctrl[..., 0, :] - 2 * ctrl[..., 1, :] + ctrl[..., 2, :], axis=-1)
    d2 = np.linalg.norm(ctrl[..., 1, :] - 2 * ctrl[..., 2, :] + ctrl[..., 3, :], axis=-1)
    m = np.maximum(d1, d2)
    n = np.ceil(np.sqrt(0.75 * m / tol))
    return np.clip(n, 1, MAX_SEGMENTS).astype(np.int64)


def _subdivision_ts(counts: np.ndarray) -> np.ndarray:
    """Parameter values of each curve's polyline vertices, padded by repeating t=1."""
    S = int(counts.max()) if len(counts) else 1
    k = np.arange(S + 1)[None, :]
    return np.minimum(k / counts[:, None], 1.0)


def _window_pairs(x0, x1, y0, y1):
    """Enumerate (owner, row, col) for integer pixel boxes [x0, x1] x [y0, y1]."""
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    owner = np.repeat(np.arange(len(counts)), counts)
    if owner.size == 0:
        return owner, owner.copy(), owner.copy()
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(owner.size) - start[owner]
    col = x0[owner] + local % nx[owner]
    row = y0[owner] + local // nx[owner]
    return owner, row, col


def _pixel_box(lo: np.ndarray, hi: np.ndarray, margin: np.ndarray, W: int, H: int):
    """Pixels whose centers lie in the box [lo - margin, hi + margin]."""
    x0 = np.ceil(lo[:, 0] - margin - 0.5).astype(np.int64)
    x1 = np.floor(hi[:, 0] + margin - 0.5).astype(np.int64)
    y0 = np.ceil(lo[:, 1] - margin - 0.5).astype(np.int64)
    y1 = np.floor(hi[:, 1] + margin - 0.5).astype(np.int64)
    return np.clip(x0, 0, W - 1), np.clip(x1, -1, W - 1), np.clip(y0, 0, H - 1), np.clip(y1, -1, H - 1)


def _segment_foot(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamped foot parameter and squared distance from points c to segments ab."""
    ab = b - a
    den = (ab * ab).sum(-1)
    u = np.where(den > 0, ((c - a) * ab).sum(-1) / np.where(den > 0, den, 1.0), 0.0)
    u = np.clip(u, 0.0, 1.0)
    diff = c - a - u[..., None] * ab
    return u, (diff * diff).sum(-1)


def _cubic_np(ctrl: np.ndarray, t: np.ndarray):
    """Point, first and second derivative of cubics ctrl (..., 4, 2) at t (...)."""
    p0, p1, p2, p3 = (ctrl[..., i, :] for i in range(4))
    t = t[..., None]
    s = 1.0 - t
    pt = s**3 * p0 + 3 * t * s**2 * p1 + 3 * t**2 * s * p2 + t**3 * p3
    d1 = 3 * (s**2 * (p1 - p0) + 2 * t * s * (p2 - p1) + t**2 * (p3 - p2))
    d2 = 6 * (s * (p2 - 2 * p1 + p0) + t * (p3 - 2 * p2 + p1))
    return pt, d1, d2


def closest_parameter(ctrl: np.ndarray, c: np.ndarray, t0: np.ndarray, iters: int = 12,
                      halvings: int = 4) -> np.ndarray:
    """Refine t0 toward the nearest point of each cubic to c by safeguarded Newton steps.

    ctrl (P, 4, 2), c (P, 2), t0 (P,). Where the curvature term makes the
    Newton denominator non-positive the Gauss-Newton one (|B'|^2) is used
    instead, and a step that increases the distance is halved before it is
    dropped, so the result is never worse than the seed. Gradients through
    the distance treat t as fixed, which is only exact at a stationary t.
    """
    t = t0.astype(np.float64).copy()
    pt, d1, d2 = _cubic_np(ctrl, t)
    best = ((pt - c) ** 2).sum(-1)
    active = np.arange(t.shape[0])
    for _ in range(iters):
        r = pt[active] - c[active]
        g = (r * d1[active]).sum(-1)
        gn = (d1[active] ** 2).sum(-1)
        h = gn + (r * d2[active]).sum(-1)
        h = np.where(h > 1e-9 * np.maximum(gn, 1e-12), h, gn)
        step = np.where(h > 1e-12, g / np.where(h > 1e-12, h, 1.0), 0.0)
        # clamped steps that cannot move t are done
        t_try = np.clip(t[active] - step, 0.0, 1.0)
        live = np.abs(t_try - t[active]) > 1e-13
        active, step = active[live], step[live]
        if active.size == 0:
            break
        idx, s = active, step
        for _ in range(halvings + 1):
            t_new = np.clip(t[idx] - s, 0.0, 1.0)
            pt_n, d1_n, d2_n = _cubic_np(ctrl[idx], t_new)
            dist_n = ((pt_n - c[idx]) ** 2).sum(-1)
            take = dist_n <= best[idx]
            ti = idx[take]
            t[ti], best[ti] = t_new[take], dist_n[take]
            pt[ti], d1[ti], d2[ti] = pt_n[take], d1_n[take], d2_n[take]
            idx, s = idx[~take], s[~take] * 0.5
            if idx.size == 0:
                break
    return t


def _distance_at(ctrl: torch.Tensor, t: np.ndarray, centers: torch.Tensor) -> torch.Tensor:
    """|c - B(t)| with t held fixed; at the nearest t this is the curve distance and its gradient."""
    w = torch.as_tensor(bernstein_matrix(t), dtype=ctrl.dtype)
    pts = (w[..., None] * ctrl).sum(-2)
    diff = centers - pts
    return torch.sqrt(torch.clamp((diff * diff).sum(-1), min=1e-24))


def _stroke_seed(ctrl_np: np.ndarray):
    counts = segment_count(ctrl_np)
    ts = _subdivision_ts(counts)  # (Es, S+1)
    poly = bernstein_matrix(ts) @ ctrl_np  # (Es, S+1, 2)
    return counts, ts, poly


def stroke_alpha(ctrl: torch.Tensor, width: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Coverage of every stroke on the flat pixel grid, shape (Es, H*W).

    Pixels are paired with the polyline segments whose padded boxes hold
    them; each pair is refined to the nearest point on the true cubic, and
    a pixel keeps its best pair.
    """
    Es = ctrl.shape[0]
    if Es == 0:
        return ctrl.new_zeros((0, H * W))
    c_np = ctrl.detach().cpu().numpy()
    counts, ts, poly = _stroke_seed(c_np)
    S = poly.shape[1] - 1
    a_np = poly[:, :-1].reshape(-1, 2)
    b_np = poly[:, 1:].reshape(-1, 2)
    seg_valid = (np.arange(S)[None, :] < counts[:, None]).reshape(-1)
    # the polyline sits within SUBDIV_TOL of the curve, so pad by that too
    margin = np.repeat(width.detach().cpu().numpy() / 2.0 + BAND / 2.0 + SUBDIV_TOL, S)
    x0, x1, y0, y1 = _pixel_box(np.minimum(a_np, b_np), np.maximum(a_np, b_np), margin, W, H)
    x1 = np.where(seg_valid, x1, -1)
    seg, row, col = _window_pairs(x0, x1, y0, y1)
    if seg.size == 0:
        return ctrl.new_zeros((Es, H * W))
    stroke = seg // S
    k = seg % S
    centers_np = np.stack([col + 0.5, row + 0.5], axis=-1)
    u, _ = _segment_foot(centers_np, a_np[seg], b_np[seg])
    t0 = ts[stroke, k] + u * (ts[stroke, k + 1] - ts[stroke, k])
    t = closest_parameter(c_np[stroke], centers_np, t0)
    st = torch.as_tensor(stroke)
    dist = _distance_at(ctrl[st], t, torch.as_tensor(centers_np, dtype=ctrl.dtype))
    cov = stroke_coverage_from_distance(dist, width[st])
    flat = torch.as_tensor(stroke * (H * W) + row * W + col)
    dense = ctrl.new_zeros(Es * H * W).scatter_reduce(0, flat, cov, reduce="amax", include_self=True)
    return dense.reshape(Es, H * W)


def _winding(centers: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Nonzero winding number of each center against its loop edges; shapes (P, 2), (P, K, 2)."""
    cy = centers[:, None, 1]
    cx = centers[:, None, 0]
    cross = (b[..., 0] - a[..., 0]) * (cy - a[..., 1]) - (cx - a[..., 0]) * (b[..., 1] - a[..., 1])
    up = (a[..., 1] <= cy) & (b[..., 1] > cy) & (cross > 0)
    down = (a[..., 1] > cy) & (b[..., 1] <= cy) & (cross < 0)
    return up.sum(-1) - down.sum(-1)


def _left_unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    v = v / np.where(n > 0, n, 1.0)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _end_tangent(ctrl: np.ndarray, at_end: bool) -> np.ndarray:
    """Tangent direction at a cubic end, falling back past coincident control points."""
    if at_end:
        cands = [ctrl[..., 3, :] - ctrl[..., 2, :], ctrl[..., 3, :] - ctrl[..., 1, :], ctrl[..., 3, :] - ctrl[..., 0, :]]
    else:
        cands = [ctrl[..., 1, :] - ctrl[..., 0, :], ctrl[..., 2, :] - ctrl[..., 0, :], ctrl[..., 3, :] - ctrl[..., 0, :]]
    out = cands[-1]
    for c in reversed(cands[:-1]):
        ok = np.linalg.norm(c, axis=-1, keepdims=True) > 1e-9
        out = np.where(ok, c, out)
    return out


def _loop_inside(ctrl_np, poly_a, poly_b, centers, jbest, tbest, dist, orient):
    """Inside test for fill pixels.

    Pixels well away from the boundary use the polyline winding number;
    pixels in the coverage band use the side of the local normal (a
    pseudo-normal at joints), which agrees with the exact curve distance.
    """
    inside = _winding(centers, poly_a, poly_b) != 0
    near = dist < BAND / 2.0 + 2 * SUBDIV_TOL
    if not near.any():
        return inside
    idx = np.nonzero(near)[0]
    P = np.arange(len(idx))
    cj = ctrl_np[idx]  # (n, 4, 4, 2)
    j = jbest[idx]
    t = tbest[idx]
    cur = cj[P, j]
    prev = cj[P, (j - 1) % 4]
    nxt = cj[P, (j + 1) % 4]
    pt, d1, _ = _cubic_np(cur, t)
    normal = _left_unit(d1)
    start = t <= 1e-9
    end = t >= 1.0 - 1e-9
    n_start = _left_unit(_end_tangent(prev, True)) + _left_unit(_end_tangent(cur, False))
    n_end = _left_unit(_end_tangent(cur, True)) + _left_unit(_end_tangent(nxt, False))
    degenerate = np.linalg.norm(d1, axis=-1) < 1e-9
    normal = np.where((start | (degenerate & (t < 0.5)))[:, None], n_start, normal)
    normal = np.where((end | (degenerate & (t >= 0.5)))[:, None], n_end, normal)
    side = ((centers[idx] - pt) * normal).sum(-1) * orient[idx]
    inside = inside.copy()
    inside[idx] = side > 0
    return inside


def _fill_signed_distance(ctrl, c_np, poly, ts, counts, orient, owner, centers):
    """Signed distance (positive inside) from each center to the loop of its owner."""
    Pn = owner.size
    S = ts.shape[1] - 1
    a = poly[owner, :, :-1]  # (P, 4, S, 2)
    b = poly[owner, :, 1:]
    u, d2 = _segment_foot(centers[:, None, None, :], a, b)
    kbest = d2.argmin(axis=-1)  # (P, 4)
    tk = ts[owner][:, None, :]
    step = np.diff(ts, axis=1)[owner][:, None, :]
    t0 = (np.take_along_axis(np.broadcast_to(tk, (Pn, 4, S + 1)), kbest[..., None], -1)[..., 0]
          + np.take_along_axis(u, kbest[..., None], -1)[..., 0]
          * np.take_along_axis(np.broadcast_to(step, (Pn, 4, S)), kbest[..., None], -1)[..., 0])
    t = closest_parameter(c_np[owner].reshape(-1, 4, 2), np.repeat(centers, 4, axis=0),
                          t0.reshape(-1)).reshape(Pn, 4)
    own = torch.as_tensor(owner)
    dist_all = _distance_at(ctrl[own], t, torch.as_tensor(centers, dtype=ctrl.dtype)[:, None, :])  # (P, 4)
    dist, jbest = dist_all.min(dim=1)
    jb = jbest.numpy()
    inside = _loop_inside(c_np[owner], a.reshape(Pn, -1, 2), b.reshape(Pn, -1, 2), centers, jb,
                          t[np.arange(Pn), jb], dist.detach().numpy(), orient[owner])
    return torch.where(torch.as_tensor(inside), dist, -dist)


def _loop_geometry(c_np: np.ndarray):
    counts = segment_count(c_np).max(axis=1)
    ts = _subdivision_ts(counts)  # (Ef, S+1)
    poly = np.einsum("fsk,fjkd->fjsd", bernstein_matrix(ts), c_np)  # (Ef, 4, S+1, 2)
    loop = poly[:, :, :-1].reshape(len(c_np), -1, 2)
    orient = np.sign((loop[..., 0] * np.roll(loop[..., 1], -1, axis=1)
                      - np.roll(loop[..., 0], -1, axis=1) * loop[..., 1]).sum(-1))
    return counts, ts, poly, orient


def fill_alpha(joints: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Coverage of every filled loop, shape (Ef, H*W).

    joints is (Ef, 12, 2); the loop is assembled so that it is closed by construction.
    """
    Ef = joints.shape[0]
    ctrl = joints[:, torch.as_tensor(ICON_CURVE_INDEX)]  # (Ef, 4, 4, 2)
    if Ef == 0:
        return ctrl.new_zeros((0, H * W))
    c_np = ctrl.detach().cpu().numpy()
    counts, ts, poly, orient = _loop_geometry(c_np)
    flat_ctrl = c_np.reshape(Ef, -1, 2)
    x0, x1, y0, y1 = _pixel_box(flat_ctrl.min(axis=1), flat_ctrl.max(axis=1),
                                np.full(Ef, BAND + SUBDIV_TOL), W, H)
    owner, row, col = _window_pairs(x0, x1, y0, y1)
    dense = ctrl.new_zeros(Ef * H * W)
    if owner.size == 0:
        return dense.reshape(Ef, H * W)
    centers = np.stack([col + 0.5, row + 0.5], axis=-1)
    signed = _fill_signed_distance(ctrl, c_np, poly, ts, counts, orient, owner, centers)
    cov = smoothstep(signed / BAND + 0.5)
    flat = torch.as_tensor(owner * (H * W) + row * W + col)
    dense = dense.index_put((flat,), cov)
    return dense.reshape(Ef, H * W)


def composite(alpha: torch.Tensor, rgb: torch.Tensor, depth: np.ndarray, H: int, W: int,
              background: Sequence[float]) -> torch.Tensor:
    """Painter's over-compositing, far elements first.

    alpha is (E, H*W) effective alpha, rgb is (E, 3). Returns (H, W, 4).
    """
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=alpha.dtype)
    E = alpha.shape[0]
    if E == 0:
        img = bg.expand(H * W, 3)
        return torch.cat([img, alpha.new_zeros(H * W, 1)], dim=1).reshape(H, W, 4)
    order = torch.as_tensor(np.argsort(-np.asarray(depth, dtype=np.float64), kind="stable"))
    A = alpha[order]
    C = rgb[order]
    keep = 1.0 - A
    # transmittance in front of each element: product over the nearer ones
    after = torch.cumprod(torch.flip(keep, [0]), dim=0)
    after = torch.flip(torch.cat([torch.ones_like(after[:1]), after[:-1]], dim=0), [0])
    weight = A * after  # (E, P)
    total_keep = after[0] * keep[0]
    color = weight.T @ C + total_keep[:, None] * bg[None, :]
    out = torch.cat([color, (1.0 - total_keep)[:, None]], dim=1)
    # inputs in [0, 1] keep every channel in [0, 1]; no clamp so gradients stay exact
    return out.reshape(H, W, 4)


def rasterize(inp: RasterInput, H: int, W: int, background: Sequence[float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
    a_s = stroke_alpha(inp.stroke_ctrl, inp.stroke_width, H, W)
    a_f = fill_alpha(inp.fill_ctrl, H, W)
    a_s = a_s * (inp.stroke_rgba[:, 3] * inp.stroke_opacity)[:, None]
    a_f = a_f * (inp.fill_rgba[:, 3] * inp.fill_opacity)[:, None]
    alpha = torch.cat([a_s, a_f], dim=0)
    rgb = torch.cat([inp.stroke_rgba[:, :3], inp.fill_rgba[:, :3]], dim=0)
    depth = np.concatenate([np.asarray(inp.stroke_depth, dtype=np.float64),
                            np.asarray(inp.fill_depth, dtype=np.float64)])
    return composite(alpha, rgb, depth, H, W, background)


# --- Scene2D bridge ------------------------------------------------------

def _split(scene: Scene2D):
    strokes = [(i, e) for i, e in enumerate(scene.elements) if isinstance(e, Stroke)]
    fills = [(i, e) for i, e in enumerate(scene.elements) if isinstance(e, Fill)]
    return strokes, fills


def to_raster_input(scene: Scene2D, requires_grad: bool = False, dtype=torch.float64) -> RasterInput:
    strokes, fills = _split(scene)

    def t(x, shape):
        arr = np.asarray(x, dtype=np.float64).reshape(shape)
        return torch.tensor(arr, dtype=dtype, requires_grad=requires_grad)

    return RasterInput(
        t([e.ctrl for _, e in strokes], (-1, 4, 2)),
        t([e.width for _, e in strokes], (-1,)),
        t([e.color for _, e in strokes], (-1, 4)),
        t([e.opacity for _, e in strokes], (-1,)),
        np.array([e.depth_key for _, e in strokes], dtype=np.float64),
        t([np.asarray(e.ctrl, dtype=np.float64)[:, :3].reshape(12, 2) for _, e in fills], (-1, 12, 2)),
        t([e.color for _, e in fills], (-1, 4)),
        t([e.opacity for _, e in fills], (-1,)),
        np.array([e.depth_key for _, e in fills], dtype=np.float64),
    )


def curve_coverage(element: Stroke | Fill, pixel_center) -> float:
    """Coverage of one element at one pixel-space point."""
    pc = np.asarray(pixel_center, dtype=np.float64).reshape(1, 2)
    if isinstance(element, Stroke):
        ctrl = np.asarray(element.ctrl, dtype=np.float64).reshape(1, 4, 2)
        _, ts, poly = _stroke_seed(ctrl)
        u, d2 = _segment_foot(pc, poly[0, :-1], poly[0, 1:])
        k = int(d2.argmin())
        t0 = np.array([ts[0, k] + u[k] * (ts[0, k + 1] - ts[0, k])])
        t = closest_parameter(ctrl, pc, t0)
        d = _distance_at(torch.as_tensor(ctrl), t, torch.as_tensor(pc))
        return float(stroke_coverage_from_distance(d, element.width)[0])
    ctrl = np.asarray(element.ctrl, dtype=np.float64).reshape(1, 4, 4, 2)
    counts, ts, poly, orient = _loop_geometry(ctrl)
    signed = _fill_signed_distance(torch.as_tensor(ctrl), ctrl, poly, ts, counts, orient, np.zeros(1, dtype=np.int64), pc)
    return float(smoothstep(signed / BAND + 0.5)[0])


def render_view(scene: Scene2D, canvas: Canvas) -> RenderOutput:
    with torch.no_grad():
        img = rasterize(to_raster_input(scene), canvas.height, canvas.width, canvas.background)
    return RenderOutput(img.clamp(0.0, 1.0).numpy())


def backward(scene: Scene2D, canvas: Canvas, image_gradient: np.ndarray) -> ParamGradients:
    """Gradients of sum(image * image_gradient) with respect to every element parameter.

    Parameters are pixel-space control points, stroke widths, RGBA colors and
    opacity multipliers. Stroke control gradients are (4, 2); fill control
    gradients are (12, 2) in the shared-joint layout, since a joint is one
    parameter owned by two curves. The depth sort is treated as constant.
    """
    g = np.asarray(image_gradient, dtype=np.float64)
    if g.shape != (canvas.height, canvas.width, 4):
        raise ValueError(f"image_gradient must have shape {(canvas.height, canvas.width, 4)}, got {g.shape}")
    inp = to_raster_input(scene, requires_grad=True)
    img = rasterize(inp, canvas.height, canvas.width, canvas.background)
    leaves = [inp.stroke_ctrl, inp.stroke_width, inp.stroke_rgba, inp.stroke_opacity,
              inp.fill_ctrl, inp.fill_rgba, inp.fill_opacity]
    grads = torch.autograd.grad((img * torch.as_tensor(g)).sum(), leaves, allow_unused=True)
    grads = [np.zeros(tuple(l.shape)) if gr is None else gr.numpy() for gr, l in zip(grads, leaves)]
    s_ctrl, s_w, s_rgba, s_op, f_ctrl, f_rgba, f_op = grads
    out = ParamGradients()
    si = fi = 0
    for e in scene.elements:
        if isinstance(e, Stroke):
            out.ctrl.append(s_ctrl[si]); out.width.append(float(s_w[si]))
            out.color.append(s_rgba[si]); out.opacity.append(float(s_op[si]))
            si += 1
        else:
            out.ctrl.append(f_ctrl[fi]); out.width.append(None)
            out.color.append(f_rgba[fi]); out.opacity.append(float(f_op[fi]))
            fi += 1
    return out


def reference_width(stroke_width: float, canvas_short_side: int, reference: int = 512) -> float:
    """Stroke width in canvas pixels for a width given at the reference resolution."""
    return stroke_width * canvas_short_side / reference


# --- export ----------------------------------------------------------------

def _num(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".") if abs(v) >= 5e-4 else "0"


def _rgb(c) -> str:
    r, g, b = (int(round(255 * min(max(float(x), 0.0), 1.0))) for x in c[:3])
    return f"rgb({r},{g},{b})"


def _cubic_d(ctrl: np.ndarray, start: bool = True) -> str:
    p = np.asarray(ctrl, dtype=np.float64)
    head = f"M {_num(p[0, 0])} {_num(p[0, 1])} " if start else ""
    return head + "C " + ", ".join(f"{_num(x)} {_num(y)}" for x, y in p[1:])


def export_svg(scene: Scene2D, canvas: Canvas, visibility: Sequence[bool] | None = None,
               low_opacity: float = 0.2) -> str:
    """SVG 1.1 text with one path per element, far elements first.

    An element annotated invisible is drawn at the low opacity; otherwise
    its opacity is color alpha times its opacity multiplier.
    """
    if visibility is not None and len(visibility) != len(scene.elements):
        raise ValueError("one visibility flag per element required")
    depth = np.array([e.depth_key for e in scene.elements], dtype=np.float64)
    order = np.argsort(-depth, kind="stable")
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{canvas.width}" '
             f'height="{canvas.height}" viewBox="0 0 {canvas.width} {canvas.height}">']
    for i in order:
        e = scene.elements[i]
        alpha = float(e.color[3]) * float(e.opacity)
        if visibility is not None and not visibility[i]:
            alpha = low_opacity
        if isinstance(e, Stroke):
            lines.append(f'  <path d="{_cubic_d(e.ctrl)}" fill="none" stroke="{_rgb(e.color)}" '
                         f'stroke-width="{_num(e.width)}" stroke-opacity="{alpha:g}" stroke-linecap="round"/>')
        else:
            loop = np.asarray(e.ctrl, dtype=np.float64)
            d = " ".join(_cubic_d(loop[j], start=(j == 0)) for j in range(4)) + " Z"
            lines.append(f'  <path d="{d}" fill="{_rgb(e.color)}" fill-opacity="{alpha:g}" stroke="none"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_png(path, image: np.ndarray) -> None:
    """8-bit RGBA PNG with fixed encoder settings so identical images give identical bytes."""
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG", compress_level=6)
