import re

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from curve3dvg.raster import (BAND, Canvas, Fill, Scene2D, Stroke, backward, curve_coverage, export_svg,
                              reference_width, render_view, smoothstep, write_png)
from scenes2d import jacobian_fd_errors, random_blob, random_scene, random_stroke

BLACK = np.array([0.0, 0.0, 0.0, 1.0])


def hline(y=32.0, x0=8.0, x1=56.0, width=3.0, color=BLACK, depth=1.0):
    xs = np.linspace(x0, x1, 4)
    return Stroke(np.c_[xs, np.full(4, y)], width, color, depth)


def square(cx, cy, r, color, depth):
    c = np.array([[cx + r, cy + r], [cx - r, cy + r], [cx - r, cy - r], [cx + r, cy - r]])
    loop = np.stack([np.linspace(c[k], c[(k + 1) % 4], 4) for k in range(4)])
    return Fill(loop, color, depth)


def test_canvas_minimum():
    with pytest.raises(ValueError):
        Canvas(15, 64)


def test_open_fill_rejected():
    f = square(32, 32, 8, BLACK, 1.0)
    bad = f.ctrl.copy()
    bad[2, 3] += 1.0
    with pytest.raises(ValueError):
        Scene2D((Fill(bad, BLACK, 1.0),))
    with pytest.raises(ValueError):
        Scene2D((hline(depth=float("nan")),))


def test_smoothstep_band_values():
    # quintic smoothstep evaluated by hand: s(0.5) = 0.5, s(0) = 0, s(1) = 1
    assert smoothstep(np.array([0.0, 0.5, 1.0])).tolist() == [0.0, 0.5, 1.0]
    assert BAND == 1.0


def test_coverage_examples():
    s = hline(width=4.0)
    assert curve_coverage(s, (32.0, 32.0 + 4.0 + 1.0)) == 0.0
    assert curve_coverage(s, (32.0, 32.0)) == pytest.approx(1.0)
    assert curve_coverage(s, (32.0, 32.0 + 2.0)) == pytest.approx(0.5, abs=0.05)
    assert curve_coverage(hline(width=2.0), (20.0, 32.0)) == pytest.approx(1.0)


@settings(max_examples=30)
@given(st.floats(0.5, 8.0), st.floats(0.0, 8.0), st.floats(0.0, 6.0))
def test_coverage_monotone_in_width(w, extra, dist):
    s1, s2 = hline(width=w), hline(width=w + extra)
    p = (30.0, 32.0 + dist)
    assert curve_coverage(s2, p) >= curve_coverage(s1, p) - 1e-12


def test_fill_coverage_inside_outside():
    f = square(32, 32, 10, BLACK, 1.0)
    assert curve_coverage(f, (32, 32)) == pytest.approx(1.0)
    assert curve_coverage(f, (5, 5)) == 0.0
    assert curve_coverage(f, (42, 32)) == pytest.approx(0.5, abs=1e-9)


def test_empty_scene_is_background():
    img = render_view(Scene2D(()), Canvas(20, 16, (0.2, 0.4, 0.6))).image
    assert img.shape == (16, 20, 4)
    assert np.allclose(img[..., :3], [0.2, 0.4, 0.6]) and np.allclose(img[..., 3], 0.0)


def test_horizontal_stroke_row():
    # centerline at y = 32 covers the pixel rows centered at 31.5 and 32.5
    img = render_view(Scene2D((hline(width=3.0),)), Canvas(64, 64)).image
    assert np.allclose(img[31:33, 16:48, :3], 0.0, atol=0.02)
    assert np.allclose(img[:28, :, :3], 1.0)
    assert np.allclose(img[36:, :, :3], 1.0)


def test_nearer_fill_wins_overlap():
    red, blue = np.array([1.0, 0, 0, 1]), np.array([0, 0, 1.0, 1])
    near, far = square(28, 28, 10, red, 1.0), square(36, 36, 10, blue, 5.0)
    for order in [(near, far), (far, near)]:
        img = render_view(Scene2D(order), Canvas(64, 64)).image
        assert np.allclose(img[32, 32, :3], [1, 0, 0], atol=1e-9)
        assert np.allclose(img[42, 42, :3], [0, 0, 1], atol=1e-9)


def test_storage_order_invariance(rng):
    for _ in range(5):
        sc = random_scene(rng)
        perm = rng.permutation(len(sc.elements))
        a = render_view(sc, Canvas(64, 64)).image
        b = render_view(Scene2D([sc.elements[i] for i in perm]), Canvas(64, 64)).image
        assert np.array_equal(a, b)


def test_translation_equivariance(rng):
    for _ in range(5):
        sc = random_scene(rng)
        moved = []
        for e in sc.elements:
            ctrl = e.ctrl + np.array([1.0, 0.0])
            moved.append(Stroke(ctrl, e.width, e.color, e.depth_key, e.opacity) if isinstance(e, Stroke)
                         else Fill(ctrl, e.color, e.depth_key, e.opacity))
        a = render_view(sc, Canvas(64, 64)).image
        b = render_view(Scene2D(moved), Canvas(64, 64)).image
        assert np.max(np.abs(b[2:-2, 3:-2] - a[2:-2, 2:-3])) < 0.02


def test_image_in_unit_range(rng):
    for _ in range(5):
        img = render_view(random_scene(rng), Canvas(64, 64)).image
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_backward_zero_gradient(rng):
    sc = random_scene(rng)
    g = backward(sc, Canvas(64, 64), np.zeros((64, 64, 4)))
    for arr in g.ctrl + g.color:
        assert not np.any(arr)
    assert not any(g.opacity) and not any(w for w in g.width if w is not None)


def test_backward_shape_check():
    with pytest.raises(ValueError):
        backward(Scene2D((hline(),)), Canvas(64, 64), np.zeros((64, 64, 3)))


def test_color_gradient_is_sum_of_image_gradient(rng):
    # isolated opaque stroke: d(image)/d(rgb) = coverage, so the sum is over covered pixels
    s = hline(width=3.0)
    G = rng.normal(size=(64, 64, 4))
    grads = backward(Scene2D((s,)), Canvas(64, 64), G)
    cov = np.array([[curve_coverage(s, (x + 0.5, y + 0.5)) for x in range(64)] for y in range(64)])
    want = (G[..., :3] * cov[..., None]).sum(axis=(0, 1))
    assert np.allclose(grads.color[0][:3], want, atol=1e-9)


def test_finite_difference_small_batch():
    errs = np.concatenate([jacobian_fd_errors(random_scene(np.random.default_rng(s))) for s in range(3)])
    assert errs.max() < 1e-3


def test_fd_single_blob_and_stroke():
    rng = np.random.default_rng(7)
    errs = jacobian_fd_errors(Scene2D((random_blob(rng), random_stroke(rng))))
    assert errs.max() < 1e-3


def test_reference_width():
    assert reference_width(12.0, 64) == pytest.approx(1.5)
    assert reference_width(1.5, 512) == 1.5


def test_svg_single_stroke():
    svg = export_svg(Scene2D((hline(),)), Canvas(64, 64))
    paths = re.findall(r"<path [^>]*>", svg)
    assert len(paths) == 1
    d = re.search(r'd="([^"]*)"', paths[0]).group(1)
    assert d.count("C") == 1 and d.startswith("M")
    assert 'fill="none"' in paths[0]


def test_svg_fill_closed():
    svg = export_svg(Scene2D((square(32, 32, 8, np.array([1.0, 0.0, 0.0, 1.0]), 1.0),)), Canvas(64, 64))
    d = re.search(r'd="([^"]*)"', svg).group(1)
    assert d.endswith("Z") and d.count("C") == 4
    assert 'fill="rgb(255,0,0)"' in svg


def test_svg_invisible_stroke_low_opacity():
    svg = export_svg(Scene2D((hline(), hline(y=20.0))), Canvas(64, 64), visibility=[False, True])
    ops = re.findall(r'stroke-opacity="([^"]*)"', svg)
    assert sorted(ops) == ["0.2", "1"]
    with pytest.raises(ValueError):
        export_svg(Scene2D((hline(),)), Canvas(64, 64), visibility=[True, False])


def test_svg_far_first():
    svg = export_svg(Scene2D((hline(y=10.0, depth=1.0), hline(y=50.0, depth=9.0))), Canvas(64, 64))
    ds = re.findall(r'd="M [\d.]+ ([\d.]+)', svg)
    assert ds == ["50", "10"]


def test_png_bytes_deterministic(tmp_path, rng):
    img = render_view(random_scene(rng), Canvas(64, 64)).image
    write_png(tmp_path / "a.png", img)
    write_png(tmp_path / "b.png", img)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
