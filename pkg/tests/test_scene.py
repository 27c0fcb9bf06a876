import json
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curve3dvg.scene import (BezierCurve3D, DomainError, ICON_CURVE_INDEX, OpacityState, Path3D, PathKind,
                             Scene3DVG, SceneFormatError, bernstein_weights, chamfer_distance, eval_curve3d,
                             load_scene, sample_points, save_scene, scene_from_dict, scene_to_dict, sketch_scene,
                             validate_scene)

unit_t = st.floats(0.0, 1.0, allow_nan=False)


def de_casteljau(pts, t):
    # independent evaluator: repeated linear interpolation
    p = [np.asarray(q, dtype=float) for q in pts]
    while len(p) > 1:
        p = [(1 - t) * a + t * b for a, b in zip(p[:-1], p[1:])]
    return p[0]


def square_icon(z=0.0):
    joints = np.array([[1, 1, z], [-1, 1, z], [-1, -1, z], [1, -1, z]], dtype=float)
    ctrl = []
    for k in range(4):
        a, b = joints[k], joints[(k + 1) % 4]
        ctrl += [a, a + (b - a) / 3, a + 2 * (b - a) / 3]
    return Path3D.icon_from_joints(np.array(ctrl))


def test_bernstein_endpoints_and_midpoint():
    assert np.array_equal(bernstein_weights(0.0), [1, 0, 0, 0])
    assert np.array_equal(bernstein_weights(1.0), [0, 0, 0, 1])
    assert np.allclose(bernstein_weights(0.5), [0.125, 0.375, 0.375, 0.125], atol=0, rtol=0)


@pytest.mark.parametrize("t", [-1e-9, 1.0000001, 2.0, float("nan")])
def test_bernstein_domain(t):
    with pytest.raises(DomainError):
        bernstein_weights(t)


@given(unit_t)
def test_bernstein_matches_binomial_formula(t):
    want = [comb(3, i) * t**i * (1 - t) ** (3 - i) for i in range(4)]
    assert np.allclose(bernstein_weights(t), want, atol=1e-15)


def test_partition_of_unity_10k(rng):
    ts = rng.uniform(size=10_000)
    sums = np.array([bernstein_weights(t).sum() for t in ts])
    assert np.max(np.abs(sums - 1.0)) <= 1e-12
    assert all((bernstein_weights(t) >= 0).all() for t in ts[:200])


def test_eval_endpoints_exact(rng):
    pts = rng.normal(size=(4, 3)) * 1e3
    assert np.array_equal(eval_curve3d(pts, 0.0), pts[0])
    assert np.array_equal(eval_curve3d(pts, 1.0), pts[3])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), unit_t)
def test_eval_constant_curve(q, t):
    pts = np.tile(q, (4, 1))
    assert np.allclose(eval_curve3d(pts, t), q, atol=1e-12)


@given(unit_t, st.integers(0, 2**31 - 1))
def test_eval_matches_de_casteljau(t, seed):
    pts = np.random.default_rng(seed).normal(size=(4, 3))
    assert np.allclose(eval_curve3d(pts, t), de_casteljau(pts, t), atol=1e-12)


@settings(max_examples=50)
@given(unit_t, st.integers(0, 2**31 - 1))
def test_affine_invariance(t, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(4, 3))
    A, b = r.normal(size=(3, 3)), r.normal(size=3)
    assert np.allclose(eval_curve3d(pts @ A.T + b, t), A @ eval_curve3d(pts, t) + b, atol=1e-9)


def test_sample_points_examples(rng):
    pts = rng.normal(size=(4, 3))
    assert np.array_equal(sample_points(pts, 2), pts[[0, 3]])
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    assert np.allclose(sample_points(line, 3)[1], [1.5, 0, 0])
    s = sample_points(BezierCurve3D(pts), 8)
    for i in range(8):
        assert np.allclose(s[i], eval_curve3d(pts, i / 7))
    with pytest.raises(ValueError):
        sample_points(pts, 1)


def test_curve_validation():
    with pytest.raises(ValueError):
        BezierCurve3D(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        BezierCurve3D(np.full((4, 3), np.inf))


def test_validate_sketch_ok():
    scene = sketch_scene(np.zeros((2, 4, 3)))
    assert validate_scene(scene) == []


def test_validate_open_icon_joint():
    icon = square_icon()
    curves = icon.curves.copy()
    curves[1, 0] += [0.0, 0.5, 0.0]  # curve 0 no longer meets curve 1
    bad = Path3D(PathKind.ICONOGRAPHY, curves)
    v = validate_scene(Scene3DVG((bad,)))
    assert [(x.code, x.path, x.joint) for x in v] == [("open-joint", 0, 0)]


def test_validate_color_range_and_counts():
    p = Path3D(PathKind.SKETCH, np.zeros((1, 4, 3)), np.array([0, 1.5, 0, 1]))
    codes = [x.code for x in validate_scene(Scene3DVG((p,)))]
    assert codes == ["color-range"]
    two = Path3D(PathKind.SKETCH, np.zeros((2, 4, 3)))
    assert [x.code for x in validate_scene(Scene3DVG((two,)))] == ["curve-count"]
    assert [x.code for x in validate_scene(Scene3DVG(()))] == ["empty"]
    mixed = Scene3DVG((Path3D(PathKind.SKETCH, np.zeros((1, 4, 3))), square_icon()))
    assert "mixed-kind" in [x.code for x in validate_scene(mixed)]


def test_icon_joints_are_shared():
    icon = square_icon()
    for j in range(4):
        assert np.array_equal(icon.curves[j, 3], icon.curves[(j + 1) % 4, 0])
    assert np.array_equal(icon.joints()[ICON_CURVE_INDEX], icon.curves)
    moved = icon.joints()
    moved[3] += 0.25  # move a joint: both adjacent curves follow
    icon2 = Path3D.icon_from_joints(moved)
    assert validate_scene(Scene3DVG((icon2,))) == []


def test_opacity_multiplier():
    assert OpacityState.high().multiplier() == 1.0
    assert OpacityState.low().multiplier() == 0.2
    assert OpacityState.trained(0.37).multiplier() == 0.37


def test_scene_json_roundtrip(tmp_path, rng):
    scene = sketch_scene(rng.normal(size=(3, 4, 3)), color=(0.1, 0.2, 0.3, 0.9), stroke_width=2.5)
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert scene_to_dict(back) == scene_to_dict(scene)
    data = json.loads((tmp_path / "s.json").read_text())
    assert set(data) == {"kind", "paths"}
    assert set(data["paths"][0]) == {"curves", "color", "stroke_width"}
    icons = Scene3DVG((square_icon(),))
    assert scene_to_dict(scene_from_dict(scene_to_dict(icons))) == scene_to_dict(icons)


def test_scene_json_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(SceneFormatError):
        load_scene(tmp_path / "bad.json")
    with pytest.raises(SceneFormatError):
        scene_from_dict({"kind": "sketch"})
    with pytest.raises(SceneFormatError):
        scene_from_dict({"kind": "spline", "paths": []})


def test_chamfer_known_offset():
    a = np.zeros((5, 3))
    b = np.zeros((5, 3)) + [0.0, 0.0, 0.3]
    assert chamfer_distance(a, b) == pytest.approx(0.3)
    assert chamfer_distance(a, a) == 0.0
