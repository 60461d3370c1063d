"""Slow, obviously-correct reference computations.

Each function here recomputes something the fast path does, by exhaustive
enumeration or scalar loops, without sharing code with it. Tests and
``selfcheck`` compare the two.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np

from .annotate import FREE, UNKNOWN
from .scene import CEILING, FLOOR, NUM_CLASSES, WALL, GridSpec, Scene


def voxelize_oracle(points, labels, spec: GridSpec) -> np.ndarray:
    nx_, ny, nz = spec.dims
    hist: dict[tuple, Counter] = {}
    for p, lab in zip(np.asarray(points, float), np.asarray(labels)):
        idx = []
        for axis in range(3):
            lo, hi = spec.ranges[axis]
            if p[axis] < lo or p[axis] > hi:
                break
            i = int(math.floor((p[axis] - lo) / spec.resolution))
            idx.append(min(i, spec.dims[axis] - 1))
        else:
            hist.setdefault(tuple(idx), Counter())[int(lab)] += 1
    out = np.full((nx_, ny, nz), UNKNOWN, dtype=np.uint8)
    for cell, counter in hist.items():
        top = max(counter.values())
        out[cell] = min(c for c, n in counter.items() if n == top)
    return out


def densify_oracle(labels: np.ndarray) -> np.ndarray:
    """Exhaustive nearest labeled voxel for every unknown voxel."""
    lab = np.array(labels)
    seeds = np.argwhere(lab < NUM_CLASSES)
    out = lab.copy()
    for cell in np.argwhere(lab == UNKNOWN):
        d2 = np.sum((seeds - cell) ** 2, axis=1)
        out[tuple(cell)] = lab[tuple(seeds[int(np.argmin(d2))])]
    return out


def downsample_oracle(labels: np.ndarray, factor: int) -> np.ndarray:
    lab = np.asarray(labels)
    cd = [-(-n // factor) for n in lab.shape]
    out = np.full(cd, UNKNOWN, dtype=np.uint8)
    for ci in itertools.product(*(range(n) for n in cd)):
        children = []
        for off in itertools.product(range(factor), repeat=3):
            idx = tuple(ci[a] * factor + off[a] for a in range(3))
            if all(idx[a] < lab.shape[a] for a in range(3)):
                children.append(int(lab[idx]))
        occ = Counter(c for c in children if c < NUM_CLASSES)
        if occ:
            top = max(occ.values())
            out[ci] = min(c for c, n in occ.items() if n == top)
        elif FREE in children:
            out[ci] = FREE
    return out


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def _box_intersects_cell(box, lo, hi) -> bool:
    """Separating-axis test between a yaw box and an axis-aligned cell (positive measure)."""
    z0, z1 = box.z_interval()
    if _overlap(z0, z1, lo[2], hi[2]) <= 0:
        return False
    cell = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    fp = box.footprint()
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    for axis in (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([c, s]), np.array([-s, c])):
        pa, pb = cell @ axis, fp @ axis
        if _overlap(pa.min(), pa.max(), pb.min(), pb.max()) <= 1e-12:
            return False
    return True


def synthetic_occupancy_oracle(scene: Scene, viewpoint: str, spec: GridSpec) -> np.ndarray:
    """Ground-truth semantic occupancy of a generated scene around ``viewpoint``.

    Built from the generator's rooms and boxes, never from the point cloud.
    Only the room containing the viewpoint is observable (rooms are closed),
    so voxels whose centers lie outside it are UNKNOWN. Object voxels
    are those overlapping a box; other surface voxels take the room surface
    with the largest area inside them.
    """
    origin = scene.graph.positions[viewpoint]
    res = spec.resolution
    dims = spec.dims
    lower = spec.lower + origin
    out = np.full(dims, UNKNOWN, dtype=np.uint8)
    centers = spec.cell_centers() + origin
    room_idx = scene.room_of(origin)
    if room_idx is None:
        raise ValueError(f"viewpoint {viewpoint!r} is not inside a room")
    own = scene.rooms[room_idx]
    out.reshape(-1)[own.contains(centers, tol=1e-9)] = FREE

    best_area = np.zeros(dims)
    stuff = np.full(dims, UNKNOWN, dtype=np.uint8)

    def axis_cells(axis, a0, a1):
        lo = max(0, int(math.floor((a0 - lower[axis]) / res)))
        hi = min(dims[axis] - 1, int(math.floor((a1 - lower[axis]) / res)))
        return range(lo, hi + 1)

    for room in (own,):
        if room.rotation != 0.0:
            raise ValueError("oracle only supports axis-aligned rooms")
        cx, cy, cz = room.center
        hx, hy, hz = room.width / 2, room.length / 2, room.height / 2
        bounds = [(cx - hx, cx + hx), (cy - hy, cy + hy), (cz - hz, cz + hz)]
        faces = [(0, cx - hx, WALL), (0, cx + hx, WALL), (1, cy - hy, WALL), (1, cy + hy, WALL),
                 (2, cz - hz, FLOOR), (2, cz + hz, CEILING)]
        for normal_axis, value, cls in faces:
            if not (lower[normal_axis] <= value <= lower[normal_axis] + dims[normal_axis] * res):
                continue
            k = min(int(math.floor((value - lower[normal_axis]) / res)), dims[normal_axis] - 1)
            a, b = [ax for ax in range(3) if ax != normal_axis]
            for i in axis_cells(a, *bounds[a]):
                la = _overlap(*bounds[a], lower[a] + i * res, lower[a] + (i + 1) * res)
                if la <= 0:
                    continue
                for j in axis_cells(b, *bounds[b]):
                    lb = _overlap(*bounds[b], lower[b] + j * res, lower[b] + (j + 1) * res)
                    area = la * lb
                    if area <= 0:
                        continue
                    idx = [0, 0, 0]
                    idx[normal_axis], idx[a], idx[b] = k, i, j
                    idx = tuple(idx)
                    if area > best_area[idx] + 1e-12 or (abs(area - best_area[idx]) <= 1e-12 and cls < stuff[idx]):
                        best_area[idx], stuff[idx] = area, cls
    has_stuff = stuff != UNKNOWN
    out[has_stuff & (out != UNKNOWN)] = stuff[has_stuff & (out != UNKNOWN)]

    for box in sorted(scene.objects, key=lambda b: -b.volume):
        corners = box.corners()
        rng = [axis_cells(ax, corners[:, ax].min(), corners[:, ax].max()) for ax in range(3)]
        for idx in itertools.product(*rng):
            lo = lower + np.array(idx) * res
            if _box_intersects_cell(box, lo, lo + res) and out[idx] != UNKNOWN:
                out[idx] = box.class_id
    return out


def dtw_enumerate(query, reference) -> float:
    """Minimum warping cost over every monotone alignment path."""
    q = np.asarray(query, float)
    r = np.asarray(reference, float)
    n, m = len(q), len(r)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += float(np.linalg.norm(q[i] - r[j]))
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def ap_enumerate(tp_flags, n_gt: int) -> float:
    """Area under the monotone-envelope PR curve from an explicit ranked list."""
    points = []
    tp = 0
    for k, flag in enumerate(tp_flags, 1):
        tp += flag
        points.append((tp / n_gt, tp / k))
    area, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            envelope = max(p for rr, p in points if rr >= r)
            area += (r - prev_r) * envelope
            prev_r = r
    return area


def bilinear_oracle(fmap: np.ndarray, u: float, v: float) -> np.ndarray:
    """Scalar bilinear lookup; ``fmap`` is (C, H, W), ``u`` a column and ``v`` a row."""
    c, h, w = fmap.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    out = np.zeros(c)
    for ch in range(c):
        total = 0.0
        for row in range(h):
            for col in range(w):
                wu = max(0.0, 1.0 - abs(u - col))
                wv = max(0.0, 1.0 - abs(v - row))
                total += wu * wv * fmap[ch, row, col]
        out[ch] = total
    return out


def deformable_attention_oracle(query, ref_uv, fmap, layer) -> np.ndarray:
    """The deformable-attention double sum with explicit loops over heads and samples."""
    K, S = layer.heads, layer.samples
    q = np.asarray(query, float)
    D = layer.out_proj.shape[1]
    offsets = (layer.offset_w @ q + layer.offset_b).reshape(K, S, 2)
    logits = (layer.attn_w @ q + layer.attn_b).reshape(K, S)
    out = np.zeros(D)
    for k in range(K):
        m = max(logits[k])
        ex = [math.exp(x - m) for x in logits[k]]
        z = sum(ex)
        head = np.zeros(layer.out_proj.shape[2])
        for s in range(S):
            a = ex[s] / z
            f = bilinear_oracle(fmap, ref_uv[0] + offsets[k, s, 0], ref_uv[1] + offsets[k, s, 1])
            head += a * (layer.value_proj[s] @ f)
        out += layer.out_proj[k] @ head
    return out


def neighborhood_oracle(probs: np.ndarray, cells, radius: int = 1) -> list[float]:
    """Local action probabilities by explicit enumeration of each candidate's cells."""
    X, Y, Z = probs.shape
    scores = []
    for i, j in cells:
        values = []
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                for z in range(Z):
                    values.append(float(probs[i + di, j + dj, z]))
        scores.append(math.fsum(values) / Z)
    total = math.fsum(scores)
    return [s / total for s in scores]


def pillar_oracle(data: np.ndarray, cell, radius: int = 1) -> np.ndarray:
    D, _, _, Z = data.shape
    i, j = cell
    acc = np.zeros(D)
    n = 0
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            for z in range(Z):
                acc += data[:, i + di, j + dj, z]
                n += 1
    return acc / n


def _softmax_list(xs):
    m = max(xs)
    ex = [math.exp(x - m) for x in xs]
    z = sum(ex)
    return [e / z for e in ex]


def _layer_norm_row(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi for v, gi, bi in zip(x, g, b)]


def _matvec(w, x, b):
    return [sum(w[r][c] * x[c] for c in range(len(x))) + b[r] for r in range(len(w))]


def mlt_oracle(tokens, layers, heads: int) -> np.ndarray:
    """Post-norm transformer stack with scalar loops over tokens, heads and channels."""
    x = [list(map(float, row)) for row in np.atleast_2d(tokens)]
    for L in layers:
        n, d = len(x), len(x[0])
        dh = d // heads
        w = {k: np.asarray(getattr(L, k)).tolist() for k in
             ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
              "ln1_g", "ln1_b", "ln2_g", "ln2_b")}
        q = [_matvec(w["wq"], t, w["bq"]) for t in x]
        k = [_matvec(w["wk"], t, w["bk"]) for t in x]
        v = [_matvec(w["wv"], t, w["bv"]) for t in x]
        concat = [[0.0] * d for _ in range(n)]
        for h in range(heads):
            sl = range(h * dh, (h + 1) * dh)
            for i in range(n):
                logits = [sum(q[i][c] * k[j][c] for c in sl) / math.sqrt(dh) for j in range(n)]
                a = _softmax_list(logits)
                for c in sl:
                    concat[i][c] = sum(a[j] * v[j][c] for j in range(n))
        attn = [_matvec(w["wo"], row, w["bo"]) for row in concat]
        x = [_layer_norm_row([a + b for a, b in zip(t, o)], w["ln1_g"], w["ln1_b"]) for t, o in zip(x, attn)]
        out = []
        for t in x:
            hdn = [max(0.0, v_) for v_ in _matvec(w["ffn_w1"], t, w["ffn_b1"])]
            f = _matvec(w["ffn_w2"], hdn, w["ffn_b2"])
            out.append(_layer_norm_row([a + b for a, b in zip(t, f)], w["ln2_g"], w["ln2_b"]))
        x = out
    return np.array(x)


def _mlp_scalar(mlp, row):
    h = [max(0.0, v) for v in _matvec(np.asarray(mlp.w1).tolist(), row, np.asarray(mlp.b1).tolist())]
    return _matvec(np.asarray(mlp.w2).tolist(), h, np.asarray(mlp.b2).tolist())[0]


def estimate_state_oracle(tokens, data: np.ndarray, params) -> np.ndarray:
    """Volume state from per-slice scalar MLT runs, scalar MLP and a softmax over all cells."""
    D, X, Y, Z = data.shape
    L = len(tokens)
    updated = np.zeros_like(data, dtype=float)
    for z in range(Z):
        cells = [data[:, x, y, z] for x in range(X) for y in range(Y)]
        out = mlt_oracle(np.vstack([tokens, np.array(cells)]), params.state_mlt, params.config.heads)
        for n, (x, y) in enumerate((x, y) for x in range(X) for y in range(Y)):
            updated[:, x, y, z] = out[L + n]
    logits = [_mlp_scalar(params.state_mlp, updated[:, x, y, z].tolist())
              for x in range(X) for y in range(Y) for z in range(Z)]
    return np.array(_softmax_list(logits)).reshape(X, Y, Z)


def global_action_oracle(tokens, embeddings: np.ndarray, params) -> np.ndarray:
    out = mlt_oracle(np.vstack([tokens, embeddings]), params.graph_mlt, params.config.heads)
    logits = [_mlp_scalar(params.graph_mlp, row.tolist()) for row in out[len(tokens):]]
    return np.array(_softmax_list(logits))


def fuse_oracle(local_ids, local_probs, node_ids, global_probs, w_g: float) -> list[float]:
    """Lift (past nodes take the STOP value), renormalize, blend."""
    stop = local_probs[0]
    lifted = []
    for node in node_ids:
        lifted.append(local_probs[local_ids.index(node)] if node in local_ids else stop)
    total = sum(lifted)
    return [w_g * g + (1 - w_g) * (v / total) for g, v in zip(global_probs, lifted)]
