import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from volnav.scene import (
    Camera,
    GridSpec,
    Instruction,
    SceneError,
    SceneGraph,
    SemanticPointCloud,
    load_scene,
    project_to_camera,
    save_scene,
    world_to_cell,
)

SPEC = GridSpec((-6.0, 6.0), (-6.0, 6.0), (-1.5, 2.0), 0.1)


def identity_camera(f=100.0, c=50.0, size=(100, 100)):
    K = [[f, 0, c], [0, f, c], [0, 0, 1]]
    return Camera(K, np.eye(3), np.zeros(3), size)


def test_grid_dims_default():
    assert SPEC.dims == (120, 120, 35)


@pytest.mark.parametrize("p, cell", [
    ((-6.0, -6.0, -1.5), (0, 0, 0)),
    ((0.0, 0.0, 0.0), (60, 60, 15)),
    ((6.0, 6.0, 2.0), (119, 119, 34)),
    ((7.0, 0.0, 0.0), None),
])
def test_world_to_cell_examples(p, cell):
    assert world_to_cell(p, SPEC) == cell


@given(st.tuples(*(st.floats(lo, hi) for lo, hi in SPEC.ranges)))
def test_quantization_error_bounded(p):
    cell = world_to_cell(p, SPEC)
    assert cell is not None
    center = SPEC.cell_center(cell)
    assert np.all(np.abs(center - np.array(p)) <= SPEC.resolution / 2 + 1e-9)


@pytest.mark.parametrize("bad", [
    dict(x_range=(1, 1)),
    dict(resolution=0.0),
    dict(resolution=-0.1),
])
def test_grid_rejects_degenerate(bad):
    with pytest.raises(ValueError):
        GridSpec(**bad)


def test_projection_examples():
    cam = identity_camera()
    assert project_to_camera((0, 0, 1), cam) == (50.0, 50.0, True)
    assert project_to_camera((0, 0, -1), cam)[2] is False
    u, v, vis = project_to_camera((0.5, 0, 2), cam)
    assert u == 75.0 and vis


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.5, 10), st.floats(0.1, 3))
def test_projection_scales_linearly_at_fixed_depth(x, y, depth, k):
    cam = identity_camera(size=(10000, 10000), c=5000.0)
    u1, v1, _ = project_to_camera((x, y, depth), cam)
    u2, v2, _ = project_to_camera((k * x, k * y, depth), cam)
    assert math.isclose(u2 - 5000, k * (u1 - 5000), abs_tol=1e-7)
    assert math.isclose(v2 - 5000, k * (v1 - 5000), abs_tol=1e-7)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.diag([1, 1, -1.0]), np.zeros(3), (10, 10))
    with pytest.raises(ValueError):
        Camera([[0, 0, 5], [0, 1, 5], [0, 0, 1]], np.eye(3), np.zeros(3), (10, 10))
    with pytest.raises(ValueError):
        Camera([[1, 0, 50], [0, 1, 5], [0, 0, 1]], np.eye(3), np.zeros(3), (10, 10))


def test_looking_camera_sees_forward():
    cam = Camera.looking((1.0, 2.0, 1.5), heading=0.0, elevation=0.0)
    u, v, vis = project_to_camera((5.0, 2.0, 1.5), cam)
    assert vis and u == pytest.approx(112.0) and v == pytest.approx(112.0)


def test_point_cloud_invariants():
    with pytest.raises(SceneError):
        SemanticPointCloud(np.zeros((2, 3)), [0], [-1])
    with pytest.raises(SceneError):
        SemanticPointCloud(np.zeros((1, 3)), [7], [-1])  # foreground needs an instance


def test_graph_must_be_connected():
    with pytest.raises(SceneError):
        SceneGraph({"a": (0, 0, 0), "b": (1, 0, 0)}, ())
    with pytest.raises(SceneError):
        SceneGraph({"a": (0, 0, 0)}, (("a", "z"),))


def test_instruction_requires_tokens():
    with pytest.raises(ValueError):
        Instruction(np.zeros((0, 4)))
    assert Instruction.random(3, 5, 8).tokens.shape == (5, 8)


def test_scene_round_trip_is_identity(scene, tmp_path):
    save_scene(scene, tmp_path / "a")
    loaded = load_scene(tmp_path / "a")
    assert loaded == scene
    save_scene(loaded, tmp_path / "b")
    for name in ("header.json", "points.bin", "graph.txt", "cameras.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generator_is_deterministic(scene):
    from volnav.scene import generate_synthetic_scene

    assert generate_synthetic_scene(1) == scene
    assert generate_synthetic_scene(2) != scene
