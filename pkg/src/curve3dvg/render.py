"""Projection-to-raster glue shared by guidance, fitting and the CLI."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .camera import Camera
from .project import normalized_to_pixels, project_points_torch
from .raster import Canvas, Fill, RasterInput, Scene2D, Stroke, rasterize
from .scene import ICON_CURVE_INDEX, REFERENCE_RESOLUTION, OpacityState, Path3D, PathKind, Scene3DVG


@dataclass
class SceneParams:
    """Differentiable scene state.

    Sketch paths hold (n, 4, 3) control points; icon paths hold (n, 12, 3)
    shared-joint control points so loops stay closed under any update.
    Widths are in pixels at the reference resolution.
    """
    kind: PathKind
    control: torch.Tensor
    color: torch.Tensor  # (n, 4)
    width: torch.Tensor  # (n,)

    @classmethod
    def from_scene(cls, scene: Scene3DVG, requires_grad: bool = True) -> SceneParams:
        kind = scene.kind or PathKind.SKETCH
        ctrl = np.stack([p.joints() for p in scene.paths]) if scene.paths else np.zeros((0, 4, 3))
        col = np.stack([p.color for p in scene.paths]) if scene.paths else np.zeros((0, 4))
        wid = np.array([p.stroke_width for p in scene.paths], dtype=np.float64)
        mk = lambda a: torch.tensor(a, dtype=torch.float64, requires_grad=requires_grad)
        return cls(kind, mk(ctrl), mk(col), mk(wid))

    @property
    def n_paths(self) -> int:
        return self.control.shape[0]

    def curves(self) -> torch.Tensor:
        """All curves in path order, (n * m, 4, 3)."""
        if self.kind is PathKind.SKETCH:
            return self.control
        return self.control[:, torch.as_tensor(ICON_CURVE_INDEX)].reshape(-1, 4, 3)

    def curve_owner(self) -> np.ndarray:
        m = self.kind.n_curves
        return np.repeat(np.arange(self.n_paths), m)

    def to_scene(self) -> Scene3DVG:
        ctrl = self.control.detach().numpy()
        col = self.color.detach().numpy()
        wid = self.width.detach().numpy()
        paths = []
        for i in range(self.n_paths):
            if self.kind is PathKind.SKETCH:
                paths.append(Path3D(PathKind.SKETCH, ctrl[i][None], col[i].copy(), float(wid[i])))
            else:
                paths.append(Path3D.icon_from_joints(ctrl[i], color=col[i].copy(), stroke_width=float(wid[i])))
        return Scene3DVG(tuple(paths))

    def tensors(self) -> list[torch.Tensor]:
        return [self.control, self.color, self.width]


def raster_input(params: SceneParams, camera: Camera, opacity: torch.Tensor | None = None) -> RasterInput:
    """Project the scene into the camera and package it for the rasterizer."""
    n = params.n_paths
    dt = params.control.dtype
    if opacity is None:
        opacity = torch.ones(n, dtype=dt)
    xy, z = project_points_torch(camera, params.control)
    px = normalized_to_pixels(camera, xy)
    depth = z.detach().mean(dim=-1).numpy()
    empty = np.zeros(0)
    if params.kind is PathKind.SKETCH:
        width = params.width * (camera.short_side / REFERENCE_RESOLUTION)
        return RasterInput(px, width, params.color, opacity, depth,
                           torch.zeros((0, 12, 2), dtype=dt), torch.zeros((0, 4), dtype=dt),
                           torch.zeros(0, dtype=dt), empty)
    return RasterInput(torch.zeros((0, 4, 2), dtype=dt), torch.zeros(0, dtype=dt), torch.zeros((0, 4), dtype=dt),
                       torch.zeros(0, dtype=dt), empty, px, params.color, opacity, depth)


def opacity_vector(states: Sequence[OpacityState] | None, n: int, high: float = 1.0, low: float = 0.2) -> np.ndarray:
    if states is None:
        return np.ones(n)
    return np.array([s.multiplier(high, low) for s in states], dtype=np.float64)


def render_tensor(params: SceneParams, camera: Camera, opacity: torch.Tensor | None = None,
                  background=(1.0, 1.0, 1.0)) -> torch.Tensor:
    return rasterize(raster_input(params, camera, opacity), camera.height, camera.width, background)


def render_scene(scene: Scene3DVG, camera: Camera, opacities: Sequence[OpacityState] | None = None,
                 background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Forward render of a scene to an (H, W, 4) image."""
    params = SceneParams.from_scene(scene, requires_grad=False)
    op = torch.as_tensor(opacity_vector(opacities, scene.n_paths))
    with torch.no_grad():
        return render_tensor(params, camera, op, background).clamp(0.0, 1.0).numpy()


def build_scene2d(scene: Scene3DVG, camera: Camera, opacities: Sequence[OpacityState] | None = None) -> Scene2D:
    """Projected 2D scene in pixel coordinates, one element per path."""
    params = SceneParams.from_scene(scene, requires_grad=False)
    op = opacity_vector(opacities, scene.n_paths)
    with torch.no_grad():
        inp = raster_input(params, camera)
    elements = []
    for i, path in enumerate(scene.paths):
        if path.kind is PathKind.SKETCH:
            elements.append(Stroke(inp.stroke_ctrl[i].numpy(), float(inp.stroke_width[i]), path.color,
                                   float(inp.stroke_depth[i]), float(op[i]), i))
        else:
            loop = inp.fill_ctrl[i].numpy()[ICON_CURVE_INDEX]
            elements.append(Fill(loop, path.color, float(inp.fill_depth[i]), float(op[i]), i))
    return Scene2D(tuple(elements))


def canvas_for(camera: Camera, background=(1.0, 1.0, 1.0)) -> Canvas:
    return Canvas(camera.width, camera.height, tuple(background))
