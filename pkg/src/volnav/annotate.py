"""Occupancy, box and room-layout ground truth from labeled point clouds.

The driver :func:`generate_annotations` runs layout fitting, object
collection, majority voxelization, free-space carving, amodal box filling,
nearest-label densification and multi-resolution downsampling for one
viewpoint. Everything is expressed in the viewpoint's egocentric frame:
world axes, origin at the viewpoint.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import ConvexHull, cKDTree

from .geometry import OrientedBox, RoomLayout, wrap_half_pi, wrap_quarter_pi
from .scene import FOREGROUND_CLASSES, NUM_CLASSES, WALL, GridSpec, Scene, SemanticPointCloud, cells_of

FREE = 254
UNKNOWN = 255
ANNOTATION_RESOLUTIONS = (0.4, 0.2, 0.1)


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.uint8)
        if lab.size != self.spec.num_cells:
            raise ValueError(f"labels size {lab.size} does not match grid dims {self.spec.dims}")
        lab = lab.reshape(self.spec.dims)
        bad = (lab >= NUM_CLASSES) & (lab != FREE) & (lab != UNKNOWN)
        if np.any(bad):
            raise ValueError("labels contain ids that are neither classes nor free/unknown")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def unknown(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.full(spec.dims, UNKNOWN, dtype=np.uint8))

    @property
    def occupied(self) -> np.ndarray:
        return self.labels < NUM_CLASSES

    def with_labels(self, labels) -> "VoxelGrid":
        return VoxelGrid(self.spec, labels)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.labels, other.labels)


def voxelize_majority(cloud: SemanticPointCloud, spec: GridSpec) -> VoxelGrid:
    """Label each voxel holding points with their modal class (ties: lowest id)."""
    if len(cloud) == 0:
        raise AnnotationError("cannot voxelize an empty point cloud")
    idx, inside = cells_of(cloud.points, spec)
    lin = np.ravel_multi_index(idx[inside].T, spec.dims)
    key = lin * NUM_CLASSES + cloud.labels[inside].astype(np.int64)
    uniq, counts = np.unique(key, return_counts=True)
    cell, lab = uniq // NUM_CLASSES, uniq % NUM_CLASSES
    order = np.lexsort((lab, -counts, cell))
    cell, lab = cell[order], lab[order]
    first = np.ones(len(cell), dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    labels = np.full(spec.num_cells, UNKNOWN, dtype=np.uint8)
    labels[cell[first]] = lab[first]
    return VoxelGrid(spec, labels.reshape(spec.dims))


def carve_free(grid: VoxelGrid, origin, targets: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of voxels crossed by rays from ``origin`` to observed voxels.

    Rays are traced with a 3D DDA (Amanatides-Woo) to the center of every
    occupied voxel, or to ``targets`` when given. The target voxel itself is
    not marked and occupied voxels are never free.
    """
    spec = grid.spec
    dims = np.array(spec.dims)
    start = (np.asarray(origin, dtype=float) - spec.lower) / spec.resolution
    if np.any(start < 0) or np.any(start > dims):
        raise AnnotationError("ray origin lies outside the grid")
    if targets is None:
        tgt = np.argwhere(grid.occupied) + 0.5
    else:
        tgt = (np.asarray(targets, dtype=float) - spec.lower) / spec.resolution
    free = np.zeros(spec.num_cells, dtype=bool)
    if len(tgt) == 0:
        return free.reshape(spec.dims)

    n = len(tgt)
    start_cell = np.minimum(np.floor(start).astype(np.int64), dims - 1)
    d = tgt - start
    cell = np.tile(start_cell, (n, 1))
    end = np.minimum(np.floor(tgt).astype(np.int64), dims - 1)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / np.abs(d), np.inf)
        next_boundary = np.where(step > 0, cell + 1 - start, start - cell)
        t_max = np.where(step != 0, next_boundary * inv, np.inf)
    t_delta = inv

    active = np.nonzero(np.any(cell != end, axis=1))[0]
    marks = [np.ravel_multi_index(start_cell, spec.dims)] if len(active) else []
    while len(active):
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        rows = np.arange(len(active))
        ok = tm[rows, axis] <= 1.0
        active, axis, rows = active[ok], axis[ok], rows[ok]
        cell[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        inb = np.all((cell[active] >= 0) & (cell[active] < dims), axis=1)
        active = active[inb]
        reached = np.all(cell[active] == end[active], axis=1)
        go = active[~reached]
        if len(go):
            marks.append(np.ravel_multi_index(cell[go].T, spec.dims))
        active = go
    if marks:
        free[np.unique(np.concatenate([np.atleast_1d(m) for m in marks]))] = True
    free &= ~grid.occupied.ravel()
    return free.reshape(spec.dims)


def densify_nearest_neighbor(grid: VoxelGrid, free_mask: np.ndarray | None = None) -> VoxelGrid:
    """Fill unknown, non-free voxels with the label of the nearest labeled voxel.

    Distances are Euclidean between cell centers; ties go to the labeled voxel
    with the lexicographically smallest index. Free voxels come out as FREE.
    """
    labels = grid.labels.copy()
    if free_mask is not None:
        labels[np.asarray(free_mask, dtype=bool) & ~grid.occupied] = FREE
    seeds = np.argwhere(labels < NUM_CLASSES)
    if len(seeds) == 0:
        raise AnnotationError("densification needs at least one labeled voxel")
    todo = np.argwhere(labels == UNKNOWN)
    if len(todo) == 0:
        return grid.with_labels(labels)
    seed_labels = labels[tuple(seeds.T)]
    tree = cKDTree(seeds)
    # argwhere is C-ordered, so position in `seeds` is the lexicographic rank
    choice = np.empty(len(todo), dtype=np.int64)
    pending = np.arange(len(todo))
    k = min(8, len(seeds))
    while len(pending):
        _, nn = tree.query(todo[pending], k=k)
        nn = nn.reshape(len(pending), -1)
        d2 = np.sum((seeds[nn] - todo[pending][:, None, :]) ** 2, axis=2)
        best = d2.min(axis=1)
        tied = d2 == best[:, None]
        saturated = tied[:, -1] & (k < len(seeds))
        masked = np.where(tied, nn, np.iinfo(np.int64).max)
        done = ~saturated
        choice[pending[done]] = masked[done].min(axis=1)
        pending = pending[saturated]
        k = min(2 * k, len(seeds))
    labels[tuple(todo.T)] = seed_labels[choice]
    return grid.with_labels(labels)


def _min_area_yaw(xy: np.ndarray) -> float:
    hull = xy[ConvexHull(xy).vertices]
    edges = np.roll(hull, -1, axis=0) - hull
    best, best_key = 0.0, None
    for ex, ey in edges:
        theta = wrap_quarter_pi(math.atan2(ey, ex))
        c, s = math.cos(theta), math.sin(theta)
        proj = xy @ np.array([[c, -s], [s, c]])
        area = float(np.prod(proj.max(axis=0) - proj.min(axis=0)))
        key = (round(area, 12), abs(theta))
        if best_key is None or key < best_key:
            best, best_key = theta, key
    return best


def fit_oriented_box(points: np.ndarray, class_id: int = -1, instance_id: int = -1,
                     isotropy_tol: float = 1e-3) -> OrientedBox:
    """Gravity-aligned box whose horizontal axes are the principal axes of ``points``.

    When the horizontal covariance is isotropic the principal axes are
    undefined; the minimum-area enclosing rectangle orientation is used then.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise AnnotationError("box fitting needs at least 3 points")
    xy = pts[:, :2]
    centered = xy - xy.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(evals[1], 1e-300)
    if evals[0] <= 1e-12 * scale or evals[1] <= 1e-18:
        raise AnnotationError("degenerate point set: points are collinear or coincident on the horizontal plane")
    if evals[0] / evals[1] > 1 - isotropy_tol:
        yaw = _min_area_yaw(xy)
    else:
        major = evecs[:, 1]
        yaw = wrap_half_pi(math.atan2(major[1], major[0]))
    c, s = math.cos(yaw), math.sin(yaw)
    axes = np.array([[c, -s], [s, c]])
    proj = xy @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    z0, z1 = pts[:, 2].min(), pts[:, 2].max()
    if z1 - z0 <= 0:
        raise AnnotationError("degenerate point set: zero vertical extent")
    center_xy = axes @ ((lo + hi) / 2)
    half = np.array([(hi[0] - lo[0]) / 2, (hi[1] - lo[1]) / 2, (z1 - z0) / 2])
    return OrientedBox((center_xy[0], center_xy[1], (z0 + z1) / 2), half, yaw, class_id, instance_id)


def visible_wall_points(points: np.ndarray, agent, bins: int = 720, window: int = 3,
                        tolerance: float = 0.15) -> np.ndarray:
    """Keep wall points that are (nearly) first hits from the agent along their azimuth.

    The nearest range is taken over ``window`` neighboring bins on each side
    so sparse sampling of close walls cannot leave holes that far walls leak
    through.
    """
    rel = np.asarray(points, dtype=float)[:, :2] - np.asarray(agent, dtype=float)[:2]
    rng = np.hypot(rel[:, 0], rel[:, 1])
    az = np.floor((np.arctan2(rel[:, 1], rel[:, 0]) + np.pi) / (2 * np.pi) * bins).astype(np.int64) % bins
    nearest = np.full(bins, np.inf)
    np.minimum.at(nearest, az, rng)
    nearest = np.min([np.roll(nearest, k) for k in range(-window, window + 1)], axis=0)
    return rng <= nearest[az] + tolerance


def _manhattan_angle(xy: np.ndarray, radius: float = 0.25) -> float:
    """Dominant wall direction modulo 90 degrees from local line fits."""
    tree = cKDTree(xy)
    k = min(12, len(xy))
    _, nn = tree.query(xy, k=k)
    nb = xy[nn] - xy[nn].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    evals, evecs = np.linalg.eigh(cov)
    direction = evecs[:, :, 1]
    weight = (evals[:, 1] - evals[:, 0]) / np.maximum(evals[:, 1], 1e-300)
    phi = np.arctan2(direction[:, 1], direction[:, 0])
    z = np.sum(weight * np.exp(4j * phi))
    return float(np.angle(z) / 4)


def fit_room_layout(wall_points: np.ndarray, agent_position, min_support: int = 20,
                    min_size: float = 1.0, min_inlier_fraction: float = 0.8) -> RoomLayout | None:
    """Cuboid room around the agent from wall-labeled points, or None.

    Returns None when the visible walls do not surround the agent in all
    four horizontal quadrants, when the cuboid leaves more than
    ``1 - min_inlier_fraction`` of the visible walls unexplained, or when it
    is narrower than ``min_size`` or does not contain the agent.
    """
    pts = np.asarray(wall_points, dtype=float).reshape(-1, 3)
    agent = np.asarray(agent_position, dtype=float)
    if len(pts) < 4 * min_support:
        return None
    pts = pts[visible_wall_points(pts, agent)]
    rel = pts[:, :2] - agent[:2]
    quadrants = (rel[:, 0] >= 0).astype(int) * 2 + (rel[:, 1] >= 0).astype(int)
    if np.min(np.bincount(quadrants, minlength=4)) < min_support:
        return None

    xy = np.unique(np.round(pts[:, :2], 4), axis=0)
    if len(xy) < 8:
        return None
    theta0 = _manhattan_angle(xy)

    def frame(theta):
        c, s = math.cos(theta), math.sin(theta)
        return (xy - agent[:2]) @ np.array([[c, -s], [s, c]])

    local = frame(theta0)
    lo, hi = local.min(axis=0), local.max(axis=0)
    x0 = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, hi[0] - lo[0], hi[1] - lo[1], theta0])

    def residual(p, pts2d):
        cx, cy, w, l, th = p
        c, s = math.cos(th), math.sin(th)
        q = (pts2d - agent[:2]) @ np.array([[c, -s], [s, c]]) - (cx, cy)
        dx, dy = np.abs(q[:, 0]) - abs(w) / 2, np.abs(q[:, 1]) - abs(l) / 2
        outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
        return np.where((dx > 0) | (dy > 0), outside, np.minimum(-dx, -dy))

    sol = least_squares(residual, x0, args=(xy,), loss="soft_l1", f_scale=0.05, x_scale=[1, 1, 1, 1, 0.1])
    inliers = xy[np.abs(residual(sol.x, xy)) < 0.2]
    if len(inliers) >= 8:
        sol = least_squares(residual, sol.x, args=(inliers,), x_scale=[1, 1, 1, 1, 0.1])
    cx, cy, w, l, th = sol.x
    w, l = abs(w), abs(l)
    if min(w, l) < min_size:
        return None
    if np.mean(np.abs(residual(sol.x, xy)) < 0.1) < min_inlier_fraction:
        return None
    c, s = math.cos(th), math.sin(th)
    center_xy = agent[:2] + np.array([[c, -s], [s, c]]) @ np.array([cx, cy])
    wrapped = wrap_quarter_pi(th)
    if abs(wrap_half_pi(th - wrapped)) > 1e-9:
        w, l = l, w
    z0, z1 = pts[:, 2].min(), pts[:, 2].max()
    if z1 - z0 <= 0:
        return None
    layout = RoomLayout((center_xy[0], center_xy[1], (z0 + z1) / 2), w, l, z1 - z0, wrapped)
    if not layout.contains(np.array([[agent[0], agent[1], layout.center[2]]]))[0]:
        return None
    return layout


def amodal_fill(grid: VoxelGrid, boxes) -> VoxelGrid:
    """Label every voxel whose center lies inside a box; smaller boxes win overlaps."""
    labels = grid.labels.copy()
    spec = grid.spec
    dims = np.array(spec.dims)
    ordered = sorted(enumerate(boxes), key=lambda ib: (-ib[1].volume, ib[0]))
    for _, box in ordered:
        corners = box.corners()
        lo = np.floor((corners.min(axis=0) - spec.lower) / spec.resolution - 0.5).astype(int)
        hi = np.ceil((corners.max(axis=0) - spec.lower) / spec.resolution - 0.5).astype(int)
        lo, hi = np.clip(lo, 0, dims - 1), np.clip(hi, 0, dims - 1)
        if np.any(corners.max(axis=0) < spec.lower) or np.any(corners.min(axis=0) > spec.upper):
            continue
        ranges = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        gi = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
        inside = box.contains(spec.lower + (gi + 0.5) * spec.resolution)
        sel = gi[inside]
        labels[tuple(sel.T)] = box.class_id
    return grid.with_labels(labels)


def downsample_labels(fine: VoxelGrid, factor: int) -> VoxelGrid:
    """Coarsen by ``factor``: modal occupied child label, else FREE if any child is free.

    Axes not divisible by ``factor`` are padded with UNKNOWN at the upper end.
    """
    if int(factor) != factor or factor < 2:
        raise ValueError("factor must be an integer >= 2")
    f = int(factor)
    spec = fine.spec
    dims = np.array(spec.dims)
    cdims = -(-dims // f)
    padded = np.full(cdims * f, UNKNOWN, dtype=np.uint8)
    padded[: dims[0], : dims[1], : dims[2]] = fine.labels
    blocks = padded.reshape(cdims[0], f, cdims[1], f, cdims[2], f).transpose(0, 2, 4, 1, 3, 5).reshape(-1, f ** 3)
    counts = np.stack([(blocks == c).sum(axis=1) for c in range(NUM_CLASSES)], axis=1)
    out = np.where(counts.max(axis=1) > 0, counts.argmax(axis=1), UNKNOWN).astype(np.uint8)
    any_free = np.any(blocks == FREE, axis=1)
    out[(counts.max(axis=1) == 0) & any_free] = FREE
    res = spec.resolution * f
    lower = spec.lower
    cspec = GridSpec(*[(float(lower[i]), float(lower[i] + cdims[i] * res)) for i in range(3)], res)
    if tuple(cspec.dims) != tuple(int(v) for v in cdims):
        raise AssertionError(f"coarse spec dims {cspec.dims} != {tuple(cdims)}")
    return VoxelGrid(cspec, out.reshape(cdims))


def crop_top(spec: GridSpec, z_cells: int) -> GridSpec:
    """Same horizontal extent, keeping only the top ``z_cells`` layers."""
    hi = spec.z_range[1]
    return GridSpec(spec.x_range, spec.y_range, (hi - z_cells * spec.resolution, hi), spec.resolution)


def crop_grid_top(grid: VoxelGrid, z_cells: int) -> VoxelGrid:
    if z_cells > grid.spec.dims[2]:
        raise ValueError("cannot crop to more layers than the grid has")
    return VoxelGrid(crop_top(grid.spec, z_cells), grid.labels[:, :, grid.spec.dims[2] - z_cells:])


@dataclass(frozen=True, eq=False)
class AnnotationSet:
    viewpoint: str
    origin: np.ndarray
    occupancy: dict
    boxes: tuple = ()
    layout: RoomLayout | None = None

    @property
    def fine(self) -> VoxelGrid:
        return self.occupancy[min(self.occupancy)]

    def __eq__(self, other):
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return (
            self.viewpoint == other.viewpoint
            and np.array_equal(self.origin, other.origin)
            and sorted(self.occupancy) == sorted(other.occupancy)
            and all(self.occupancy[k] == other.occupancy[k] for k in self.occupancy)
            and tuple(self.boxes) == tuple(other.boxes)
            and self.layout == other.layout
        )


def collect_objects(cloud: SemanticPointCloud, origin, spec: GridSpec, layout: RoomLayout | None) -> list[OrientedBox]:
    """Fit boxes to every instance and keep those belonging to the agent's surroundings.

    Inside a room, objects whose box center lies in the layout; otherwise
    objects with at least one point in the horizontal perception range. All
    instance points are used, visible or not.
    """
    origin = np.asarray(origin, dtype=float)
    boxes = []
    for inst in np.unique(cloud.instance_ids):
        if inst < 0:
            continue
        sel = cloud.instance_ids == inst
        labels = cloud.labels[sel]
        fg = labels[np.isin(labels, FOREGROUND_CLASSES)]
        if len(fg) == 0:
            continue
        pts = cloud.points[sel] - origin
        cls = int(np.bincount(fg, minlength=NUM_CLASSES).argmax())
        try:
            box = fit_oriented_box(pts, cls, int(inst))
        except AnnotationError:
            continue
        if layout is not None:
            keep = bool(layout.contains(box.center[None], tol=1e-6)[0])
        else:
            inx = (pts[:, 0] >= spec.x_range[0]) & (pts[:, 0] <= spec.x_range[1])
            iny = (pts[:, 1] >= spec.y_range[0]) & (pts[:, 1] <= spec.y_range[1])
            keep = bool(np.any(inx & iny))
        if keep:
            boxes.append(box)
    return boxes


def generate_annotations(scene: Scene, viewpoint: str, spec: GridSpec | None = None,
                         resolutions=ANNOTATION_RESOLUTIONS) -> AnnotationSet:
    """Full room-object-voxel annotation for one viewpoint."""
    if viewpoint not in scene.graph.positions:
        raise AnnotationError(f"viewpoint {viewpoint!r} not in scene graph")
    spec = spec or scene.grid
    fine_res = min(resolutions)
    spec = spec.with_resolution(fine_res)
    origin = scene.graph.positions[viewpoint]
    local = scene.cloud.points - origin
    in_range = np.all((local >= spec.lower) & (local <= spec.upper), axis=1)
    cropped = SemanticPointCloud(local[in_range], scene.cloud.labels[in_range], scene.cloud.instance_ids[in_range])

    walls = cropped.points[cropped.labels == WALL]
    layout = fit_room_layout(walls, np.zeros(3))
    boxes = collect_objects(scene.cloud, origin, spec, layout)

    grid = voxelize_majority(cropped, spec)
    free = carve_free(grid, np.zeros(3))
    grid = grid.with_labels(np.where(free, FREE, grid.labels))
    grid = amodal_fill(grid, boxes)
    grid = densify_nearest_neighbor(grid)

    occupancy = {fine_res: grid}
    for res in resolutions:
        if res == fine_res:
            continue
        factor = res / fine_res
        if abs(factor - round(factor)) > 1e-9:
            raise AnnotationError(f"resolution {res} is not an integer multiple of {fine_res}")
        occupancy[res] = downsample_labels(grid, int(round(factor)))
    return AnnotationSet(viewpoint, origin.copy(), occupancy, tuple(boxes), layout)


# --- export --------------------------------------------------------------

_MAGIC = b"VNAN"


def rle_encode(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(labels, dtype=np.uint8).ravel()
    if flat.size == 0:
        return flat, np.zeros(0, dtype=np.uint32)
    starts = np.concatenate([[0], np.nonzero(flat[1:] != flat[:-1])[0] + 1])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return flat[starts], lengths.astype(np.uint32)


def rle_decode(values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(values, dtype=np.uint8), np.asarray(lengths, dtype=np.int64))


def write_annotation(ann: AnnotationSet, fh) -> None:
    """One binary record: grids (run-length encoded), boxes, optional layout."""
    name = ann.viewpoint.encode()
    fh.write(_MAGIC + struct.pack("<HH", 1, len(name)) + name)
    fh.write(np.asarray(ann.origin, dtype="<f8").tobytes())
    fh.write(struct.pack("<I", len(ann.occupancy)))
    for res in sorted(ann.occupancy, reverse=True):
        g = ann.occupancy[res]
        s = g.spec
        fh.write(np.array([*s.x_range, *s.y_range, *s.z_range, s.resolution], dtype="<f8").tobytes())
        fh.write(np.array(s.dims, dtype="<u4").tobytes())
        vals, lens = rle_encode(g.labels)
        fh.write(struct.pack("<I", len(vals)))
        fh.write(vals.astype("<u1").tobytes())
        fh.write(lens.astype("<u4").tobytes())
    fh.write(struct.pack("<I", len(ann.boxes)))
    for b in ann.boxes:
        fh.write(np.array([*b.center, *b.half_extents, b.yaw], dtype="<f8").tobytes())
        fh.write(struct.pack("<ii", b.class_id, b.instance_id))
    if ann.layout is None:
        fh.write(b"\x00")
    else:
        L = ann.layout
        fh.write(b"\x01" + np.array([*L.center, L.width, L.length, L.height, L.rotation], dtype="<f8").tobytes())


def read_annotations(path) -> list[AnnotationSet]:
    blob = Path(path).read_bytes()
    off = 0
    out = []

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise AnnotationError("annotation file truncated")
        chunk = blob[off:off + n]
        off += n
        return chunk

    while off < len(blob):
        if take(4) != _MAGIC:
            raise AnnotationError("bad annotation record magic")
        version, ln = struct.unpack("<HH", take(4))
        if version != 1:
            raise AnnotationError(f"unsupported annotation version {version}")
        vp = take(ln).decode()
        origin = np.frombuffer(take(24), dtype="<f8").copy()
        (ngrids,) = struct.unpack("<I", take(4))
        occ = {}
        for _ in range(ngrids):
            s = np.frombuffer(take(56), dtype="<f8")
            dims = tuple(int(v) for v in np.frombuffer(take(12), dtype="<u4"))
            spec = GridSpec((s[0], s[1]), (s[2], s[3]), (s[4], s[5]), s[6])
            if spec.dims != dims:
                raise AnnotationError(f"grid dims {dims} inconsistent with spec {spec.dims}")
            (nruns,) = struct.unpack("<I", take(4))
            vals = np.frombuffer(take(nruns), dtype="<u1")
            lens = np.frombuffer(take(4 * nruns), dtype="<u4")
            occ[spec.resolution] = VoxelGrid(spec, rle_decode(vals, lens).reshape(dims))
        (nbox,) = struct.unpack("<I", take(4))
        boxes = []
        for _ in range(nbox):
            v = np.frombuffer(take(56), dtype="<f8")
            cls, inst = struct.unpack("<ii", take(8))
            boxes.append(OrientedBox(v[:3], v[3:6], v[6], cls, inst))
        layout = None
        if take(1) == b"\x01":
            v = np.frombuffer(take(56), dtype="<f8")
            layout = RoomLayout(v[:3], v[3], v[4], v[5], v[6])
        out.append(AnnotationSet(vp, origin, occ, tuple(boxes), layout))
    return out
