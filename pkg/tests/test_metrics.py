import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from volnav.annotate import FREE, UNKNOWN, VoxelGrid
from volnav.geometry import OrientedBox, RoomLayout, box_iou_3d
from volnav.metrics import (
    average_precision,
    box_recall,
    cls_score,
    detection_metrics,
    dtw,
    fidelity_metrics,
    grounding_metrics,
    layout_iou,
    nav_metrics,
    ndtw,
    occupancy_metrics,
)
from volnav.oracles import ap_enumerate, dtw_enumerate
from volnav.scene import GridSpec

paths = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=st.floats(-10, 10))


def line_graph():
    pos = {"S": np.zeros(3), "G": np.array([1.0, 0, 0]), "X": np.array([-0.5, 0, 0]), "F": np.array([9.0, 0, 0])}
    g = nx.Graph()
    for a, b in (("S", "G"), ("S", "X"), ("G", "F")):
        g.add_edge(a, b, weight=float(np.linalg.norm(pos[a] - pos[b])))
    return g, pos


def test_spl_detour_is_half():
    g, pos = line_graph()
    m = nav_metrics(["S", "X", "S", "G"], ["G"], g, pos, radius=0.5)
    assert m["SPL"] == 0.5 and m["TL"] == 2.0 and m["SR"] == 1.0 and m["NE"] == 0.0


def test_failure_and_oracle_success():
    g, pos = line_graph()
    m = nav_metrics(["S", "G", "F"], ["G"], g, pos, radius=3.0)
    assert m["SR"] == 0.0 and m["OSR"] == 1.0 and m["SPL"] == 0.0 and m["NE"] == 8.0


def test_zero_length_episode():
    g, pos = line_graph()
    m = nav_metrics(["G"], ["G"], g, pos)
    assert m["SR"] == 1.0 and m["SPL"] == 1.0


@given(paths)
def test_ndtw_identical_is_one(p):
    assert ndtw(p, p) == 1.0
    assert cls_score(p, p) == pytest.approx(1.0)


@given(paths, paths)
def test_dtw_matches_exhaustive_alignment(a, b):
    ref = dtw_enumerate(a, b)
    assert abs(dtw(a, b) - ref) <= 1e-9 * max(1.0, ref)
    assert dtw(a, b) == pytest.approx(dtw(b, a))


def test_fidelity_and_grounding():
    pos = {"a": np.zeros(3), "b": np.array([1.0, 0, 0])}
    m = fidelity_metrics(["a", "b"], ["a", "b"], pos, success=1.0)
    assert m["nDTW"] == 1.0 and m["SDTW"] == 1.0
    assert grounding_metrics(3, 3, 1.0, 2.0, 4.0) == {"RGS": 1.0, "RGSPL": 0.5}
    assert grounding_metrics(2, 3, 1.0, 2.0, 4.0)["RGS"] == 0.0


def test_layout_iou_offset_unit_cubes():
    a = RoomLayout((0, 0, 0), 1, 1, 1)
    b = RoomLayout((0.5, 0, 0), 1, 1, 1)
    assert abs(layout_iou(a, b) - 1 / 3) <= 1e-12


@given(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(-1, 1), st.floats(-1, 1))
def test_box_iou_properties(ex, ey, ez, yaw, dx, dy):
    a = OrientedBox((0, 0, 0), (ex, ey, ez), yaw)
    b = OrientedBox((dx, dy, 0.1), (ey, ex, ez), -yaw)
    assert box_iou_3d(a, a) == pytest.approx(1.0)
    iab = box_iou_3d(a, b)
    assert 0.0 <= iab <= 1.0 + 1e-12
    assert iab == pytest.approx(box_iou_3d(b, a), abs=1e-9)


def test_rotated_box_iou_hand_case():
    a = OrientedBox((0, 0, 0), (1, 1, 1), 0.0)
    b = OrientedBox((0, 0, 0), (1, 1, 1), math.pi / 4)
    inter = 8 * (math.sqrt(2) - 1) * 2  # regular octagon area x height 2
    assert box_iou_3d(a, b) == pytest.approx(inter / (16 - inter))


@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(1, 12))
def test_average_precision_matches_enumeration(flags, n_gt):
    tp = np.cumsum(flags)
    if tp[-1] > n_gt:
        return
    recall = tp / n_gt
    precision = tp / np.arange(1, len(flags) + 1)
    assert average_precision(recall, precision) == pytest.approx(ap_enumerate([int(f) for f in flags], n_gt))


def test_detection_hand_case():
    gts = [OrientedBox((3.0 * i, 0, 0), (0.5, 0.5, 0.5), 0.0, 7) for i in range(3)]
    miss = OrientedBox((50.0, 0, 0), (0.5, 0.5, 0.5), 0.0, 7)
    det = detection_metrics([gts[0], miss, gts[1], gts[2], miss], [0.9, 0.8, 0.7, 0.6, 0.5], gts)
    assert det["mAP"] == pytest.approx(5 / 6) and det["mAR"] == 1.0
    assert box_recall([gts[0]], gts) == pytest.approx(1 / 3)


def test_occupancy_metrics_ignores_unknown():
    spec = GridSpec((0, 2), (0, 1), (0, 1), 1.0)
    gt = VoxelGrid(spec, np.array([3, UNKNOWN]).reshape(2, 1, 1))
    pred = VoxelGrid(spec, np.array([3, 5]).reshape(2, 1, 1))
    m = occupancy_metrics(pred, gt)
    assert m["IoU"] == 1.0 and m["mIoU"] == 1.0
    pred = VoxelGrid(spec, np.array([FREE, 5]).reshape(2, 1, 1))
    assert occupancy_metrics(pred, gt)["IoU"] == 0.0
