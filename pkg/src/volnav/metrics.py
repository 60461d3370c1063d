"""Navigation, path-fidelity, grounding and 3D perception metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import networkx as nx
import numpy as np

from .annotate import UNKNOWN
from .geometry import OrientedBox, RoomLayout, box_iou_3d
from .scene import NUM_CLASSES

SUCCESS_RADIUS = 3.0


@dataclass
class NavReport:
    TL: float
    NE: float
    SR: float
    OSR: float
    SPL: float
    CLS: float | None = None
    nDTW: float | None = None
    SDTW: float | None = None
    RGS: float | None = None
    RGSPL: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class PerceptionReport:
    IoU: float | None = None
    mIoU: float | None = None
    mAP: float | None = None
    mAR: float | None = None
    layout_IoU: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def path_length(path, positions) -> float:
    return float(sum(np.linalg.norm(np.asarray(positions[b]) - np.asarray(positions[a])) for a, b in zip(path, path[1:])))


def _graph_distance(graph: nx.Graph, a, b) -> float:
    return float(nx.dijkstra_path_length(graph, a, b, weight="weight"))


def nav_metrics(path, goals, graph: nx.Graph, positions, radius: float = SUCCESS_RADIUS) -> dict:
    """TL, NE, SR, OSR and SPL of one trajectory.

    ``path`` is the walked viewpoint sequence; distances to goals are
    shortest-path distances on the navigation graph.
    """
    if not path:
        raise ValueError("trajectory is empty")
    goals = [goals] if isinstance(goals, str) else list(goals)
    start, final = path[0], path[-1]

    def to_goal(node):
        return min(_graph_distance(graph, node, g) for g in goals)

    tl = path_length(path, positions)
    ne = to_goal(final)
    sr = 1.0 if ne <= radius else 0.0
    osr = 1.0 if min(to_goal(n) for n in dict.fromkeys(path)) <= radius else 0.0
    d_gt = to_goal(start)
    spl = sr * d_gt / max(d_gt, tl) if max(d_gt, tl) > 0 else sr
    return {"TL": tl, "NE": ne, "SR": sr, "OSR": osr, "SPL": spl}


def dtw(query: np.ndarray, reference: np.ndarray) -> float:
    """Dynamic time warping cost between two point sequences (Euclidean ground distance)."""
    q = np.asarray(query, dtype=float)
    r = np.asarray(reference, dtype=float)
    n, m = len(q), len(r)
    cost = np.linalg.norm(q[:, None, :] - r[None, :, :], axis=2)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(query, reference, radius: float = SUCCESS_RADIUS) -> float:
    return float(math.exp(-dtw(query, reference) / (len(reference) * radius)))


def cls_score(query, reference, radius: float = SUCCESS_RADIUS) -> float:
    """Coverage weighted by length score."""
    q = np.asarray(query, dtype=float)
    r = np.asarray(reference, dtype=float)
    d = np.linalg.norm(r[:, None, :] - q[None, :, :], axis=2).min(axis=1)
    coverage = float(np.mean(np.exp(-d / radius)))
    pl_r = float(np.sum(np.linalg.norm(np.diff(r, axis=0), axis=1)))
    pl_q = float(np.sum(np.linalg.norm(np.diff(q, axis=0), axis=1)))
    expected = coverage * pl_r
    denom = pl_r + abs(expected - pl_q)
    ls = pl_r / denom if denom > 0 else 1.0
    return coverage * ls


def fidelity_metrics(path, gt_path, positions, success: float, radius: float = SUCCESS_RADIUS) -> dict:
    if not path or not gt_path:
        raise ValueError("paths must be non-empty")
    q = np.array([positions[n] for n in path], dtype=float)
    r = np.array([positions[n] for n in gt_path], dtype=float)
    nd = ndtw(q, r, radius)
    return {"CLS": cls_score(q, r, radius), "nDTW": nd, "SDTW": float(success) * nd}


def grounding_metrics(chosen_object, gt_object, success: float, d_gt: float, tl: float) -> dict:
    rgs = 1.0 if success and chosen_object is not None and chosen_object == gt_object else 0.0
    denom = max(d_gt, tl)
    return {"RGS": rgs, "RGSPL": rgs * d_gt / denom if denom > 0 else rgs}


def occupancy_metrics(pred, gt, classes=range(1, 16), inclusive: bool = False) -> dict:
    """Geometry IoU and semantic mIoU between two voxel grids on the same spec.

    Voxels that are unknown in ``gt`` are ignored. By default classes absent
    from both grids are left out of the mean; ``inclusive`` scores them 0.
    """
    if pred.spec != gt.spec:
        raise ValueError(f"grid spec mismatch: {pred.spec} vs {gt.spec}")
    valid = gt.labels != UNKNOWN
    p = pred.labels[valid]
    g = gt.labels[valid]
    p_occ, g_occ = p < NUM_CLASSES, g < NUM_CLASSES
    union = np.count_nonzero(p_occ | g_occ)
    iou = np.count_nonzero(p_occ & g_occ) / union if union else 1.0
    per_class = {}
    for c in classes:
        pc, gc = p == c, g == c
        u = np.count_nonzero(pc | gc)
        if u == 0:
            if inclusive:
                per_class[c] = 0.0
            continue
        per_class[c] = np.count_nonzero(pc & gc) / u
    miou = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return {"IoU": float(iou), "mIoU": miou, "per_class": per_class}


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def detection_metrics(preds, scores, gts, iou_threshold: float = 0.5) -> dict:
    """mAP and mAR over classes that have ground truth boxes.

    Predictions are matched greedily in descending score order to the
    unmatched ground truth box of the same class with the highest IoU.
    """
    preds = list(preds)
    scores = np.asarray(scores, dtype=float)
    classes = sorted({g.class_id for g in gts})
    aps, ars = {}, {}
    for c in classes:
        gt_c = [g for g in gts if g.class_id == c]
        idx = [i for i, p in enumerate(preds) if p.class_id == c]
        idx.sort(key=lambda i: (-scores[i], i))
        matched = [False] * len(gt_c)
        tp = np.zeros(len(idx))
        for k, i in enumerate(idx):
            ious = [box_iou_3d(preds[i], g) if not matched[j] else -1.0 for j, g in enumerate(gt_c)]
            if ious and max(ious) >= iou_threshold:
                matched[int(np.argmax(ious))] = True
                tp[k] = 1
        if len(idx) == 0:
            aps[c], ars[c] = 0.0, 0.0
            continue
        ctp = np.cumsum(tp)
        recall = ctp / len(gt_c)
        precision = ctp / np.arange(1, len(idx) + 1)
        aps[c] = average_precision(recall, precision)
        ars[c] = float(recall[-1])
    if not classes:
        return {"mAP": 0.0, "mAR": 0.0, "AP": {}, "AR": {}}
    return {"mAP": float(np.mean(list(aps.values()))), "mAR": float(np.mean(list(ars.values()))),
            "AP": aps, "AR": ars}


def box_recall(preds, gts, iou_threshold: float = 0.5) -> float:
    """Fraction of ground truth boxes matched by some same-class prediction."""
    if not gts:
        return 1.0
    hit = 0
    for g in gts:
        if any(p.class_id == g.class_id and box_iou_3d(p, g) >= iou_threshold for p in preds):
            hit += 1
    return hit / len(gts)


def layout_iou(pred: RoomLayout, gt: RoomLayout) -> float:
    return box_iou_3d(pred.as_box(), gt.as_box())
