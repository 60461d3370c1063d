import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from volnav.annotate import (
    FREE,
    UNKNOWN,
    AnnotationError,
    VoxelGrid,
    amodal_fill,
    carve_free,
    densify_nearest_neighbor,
    downsample_labels,
    fit_oriented_box,
    fit_room_layout,
    generate_annotations,
    read_annotations,
    rle_decode,
    rle_encode,
    voxelize_majority,
    write_annotation,
)
from volnav.geometry import OrientedBox, RoomLayout, angle_diff_mod
from volnav.metrics import layout_iou
from volnav.oracles import densify_oracle, downsample_oracle, voxelize_oracle
from volnav.scene import NUM_CLASSES, WALL, GridSpec, SemanticPointCloud, room_surface_points

SMALL = GridSpec((0.0, 1.0), (0.0, 1.0), (0.0, 0.6), 0.2)  # 5 x 5 x 3


def cloud(points, labels):
    labels = np.asarray(labels)
    return SemanticPointCloud(points, labels, np.where(labels >= 5, 0, -1))


def test_single_point_labels_one_voxel():
    g = voxelize_majority(cloud([[0.1, 0.1, 0.1]], [7]), SMALL)
    assert np.count_nonzero(g.labels != UNKNOWN) == 1
    assert g.labels[0, 0, 0] == 7


def test_strict_majority_wins():
    pts = [[0.05, 0.05, 0.05]] * 3
    assert voxelize_majority(cloud(pts, [3, 3, 2]), SMALL).labels[0, 0, 0] == 3


def test_tie_goes_to_lowest_class():
    pts = [[0.05, 0.05, 0.05]] * 2
    assert voxelize_majority(cloud(pts, [4, 2]), SMALL).labels[0, 0, 0] == 2


def test_empty_cloud_rejected():
    with pytest.raises(AnnotationError):
        voxelize_majority(cloud(np.zeros((0, 3)), []), SMALL)


points_strategy = hnp.arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)),
                             elements=st.floats(-0.2, 1.2))


@given(points_strategy, st.data())
def test_voxelize_matches_histogram_oracle(points, data):
    labels = data.draw(hnp.arrays(np.uint16, len(points), elements=st.integers(0, 4)))
    fast = voxelize_majority(cloud(points, labels), SMALL)
    assert np.array_equal(fast.labels, voxelize_oracle(points, labels, SMALL))


label_grids = hnp.arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)),
                         elements=st.sampled_from([0, 3, 5, 9, FREE, UNKNOWN, UNKNOWN, UNKNOWN]))


def grid_of(labels):
    X, Y, Z = labels.shape
    return VoxelGrid(GridSpec((0, X), (0, Y), (0, Z), 1.0), labels)


@given(label_grids)
def test_densify_matches_exhaustive_nearest(labels):
    if not np.any(labels < NUM_CLASSES):
        with pytest.raises(AnnotationError):
            densify_nearest_neighbor(grid_of(labels))
        return
    assert np.array_equal(densify_nearest_neighbor(grid_of(labels)).labels, densify_oracle(labels))


@given(label_grids, st.integers(2, 3))
def test_downsample_matches_block_oracle(labels, factor):
    coarse = downsample_labels(grid_of(labels), factor)
    assert np.array_equal(coarse.labels, downsample_oracle(labels, factor))
    assert coarse.spec.resolution == factor


def test_downsample_prefers_occupied_over_free():
    labels = np.full((2, 2, 2), FREE, dtype=np.uint8)
    labels[0, 0, 0] = 6
    assert downsample_labels(grid_of(labels), 2).labels[0, 0, 0] == 6


def test_carve_free_marks_ray_cells_only():
    labels = np.full((6, 1, 1), UNKNOWN, dtype=np.uint8)
    labels[5, 0, 0] = 3
    free = carve_free(grid_of(labels), (0.5, 0.5, 0.5))
    assert free[:, 0, 0].tolist() == [True, True, True, True, True, False]


@given(st.floats(0.1, 1.0), st.floats(1.2, 2.0), st.floats(0.1, 1.0), st.floats(-math.pi / 2, math.pi / 2 - 1e-9),
       st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)))
def test_obb_recovers_box(ex, ratio, ez, yaw, center):
    from volnav.scene import box_surface_points

    truth = OrientedBox(center, (ex, ex * ratio, ez), yaw)
    pts = box_surface_points(truth, min(ex, ez) / 4, bottom=True)
    fit = fit_oriented_box(pts)
    assert np.all(fit.contains(pts, tol=1e-9))
    assert angle_diff_mod(fit.yaw, yaw, math.pi / 2) < 1e-6
    assert -math.pi / 2 <= fit.yaw < math.pi / 2
    assert sorted(fit.half_extents[:2]) == pytest.approx(sorted(truth.half_extents[:2]), abs=1e-6)
    assert fit.volume == pytest.approx(truth.volume, rel=1e-6)


def test_obb_rejects_degenerate():
    with pytest.raises(AnnotationError):
        fit_oriented_box(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 1.0]]))


def test_amodal_fill_labels_box_interior():
    grid = VoxelGrid.unknown(GridSpec((0, 4), (0, 4), (0, 4), 1.0))
    filled = amodal_fill(grid, [OrientedBox((2, 2, 2), (1.0, 1.0, 1.0), 0.0, 8)])
    assert np.count_nonzero(filled.labels == 8) == 8


def test_room_layout_from_walls():
    room = RoomLayout((1.0, -0.5, 1.4), 4.6, 5.2, 2.8, 0.0)
    pts, labels = room_surface_points(room, 0.1)
    fit = fit_room_layout(pts[labels == WALL], np.array([1.2, -0.3, 1.5]))
    assert fit is not None and layout_iou(fit, room) > 0.99


def test_room_layout_none_without_enclosure():
    room = RoomLayout((0.0, 0.0, 1.4), 4.0, 4.0, 2.8, 0.0)
    pts, labels = room_surface_points(room, 0.1)
    walls = pts[(labels == WALL) & (pts[:, 0] > 1.9)]  # one wall only
    assert fit_room_layout(walls, np.zeros(3)) is None


@given(hnp.arrays(np.uint8, st.integers(0, 200), elements=st.sampled_from([0, 1, 7, FREE, UNKNOWN])))
def test_rle_round_trip(labels):
    vals, lens = rle_encode(labels)
    assert np.array_equal(rle_decode(vals, lens), labels)
    assert np.all(vals[1:] != vals[:-1])


def test_annotations_round_trip_file(scene, tmp_path):
    ann = generate_annotations(scene, "r0c")
    assert sorted(ann.occupancy) == [0.1, 0.2, 0.4]
    assert ann.occupancy[0.1].spec.dims == (120, 120, 35)
    path = tmp_path / "a.vna"
    with open(path, "wb") as fh:
        write_annotation(ann, fh)
        write_annotation(ann, fh)
    back = read_annotations(path)
    assert len(back) == 2 and back[0] == ann
    for res, factor in ((0.2, 2), (0.4, 4)):
        assert ann.occupancy[res] == downsample_labels(ann.fine, factor)
    with pytest.raises(AnnotationError):
        truncated = tmp_path / "t.vna"
        truncated.write_bytes(path.read_bytes()[:-5])
        read_annotations(truncated)


def test_doorway_viewpoint_has_no_layout(scene):
    ann = generate_annotations(scene, "d0")
    assert ann.layout is None
    assert len(ann.boxes) > 0
