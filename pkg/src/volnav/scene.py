"""Scene substrate: grids, cameras, labeled point clouds, viewpoint graphs.

World frame is right-handed with +z up. Camera frames look down +z with
+x right and +y down.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .geometry import OrientedBox, RoomLayout

FORMAT_VERSION = 1

CLASS_NAMES = (
    "misc", "wall", "floor", "ceiling", "window",
    "bed", "chair", "sofa", "table", "cabinet", "toilet",
    "sink", "bathtub", "tv_monitor", "plant", "counter",
)
STUFF_CLASSES = (0, 1, 2, 3, 4)
FOREGROUND_CLASSES = tuple(range(5, 16))
NUM_CLASSES = len(CLASS_NAMES)
WALL, FLOOR, CEILING = 1, 2, 3

PERCEPTION_XY = (-6.0, 6.0)
PERCEPTION_Z = (-1.5, 2.0)
CAMERA_HEIGHT = 1.5


class SceneError(ValueError):
    """Raised when a scene file is malformed or violates an invariant."""


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = PERCEPTION_XY
    y_range: tuple[float, float] = PERCEPTION_XY
    z_range: tuple[float, float] = PERCEPTION_Z
    resolution: float = 0.1

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not hi > lo:
                raise ValueError(f"{name} must have max > min, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        object.__setattr__(self, "resolution", float(self.resolution))
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if min(self.dims) < 1:
            raise ValueError(f"grid has an empty axis: dims={self.dims}")

    @property
    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (self.x_range, self.y_range, self.z_range)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(round((hi - lo) / self.resolution)) for lo, hi in self.ranges)

    @property
    def lower(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges])

    @property
    def upper(self) -> np.ndarray:
        return np.array([r[1] for r in self.ranges])

    @property
    def num_cells(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def cell_centers(self) -> np.ndarray:
        """Centers of all cells in C order, shape (X*Y*Z, 3)."""
        axes = [lo + (np.arange(n) + 0.5) * self.resolution for (lo, _), n in zip(self.ranges, self.dims)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def cell_center(self, idx) -> np.ndarray:
        return self.lower + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def with_resolution(self, resolution: float) -> "GridSpec":
        return GridSpec(self.x_range, self.y_range, self.z_range, resolution)


def cells_of(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized quantization: integer cell indices (N, 3) and an inside mask."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lower, upper = spec.lower, spec.upper
    dims = np.array(spec.dims)
    inside = np.all((pts >= lower) & (pts <= upper), axis=1)
    idx = np.floor((pts - lower) / spec.resolution).astype(np.int64)
    idx = np.clip(idx, 0, dims - 1)
    return idx, inside


def world_to_cell(p, spec: GridSpec) -> tuple[int, int, int] | None:
    """Cell containing ``p``; ``None`` when outside the closed grid ranges.

    Cells are half-open except the last one on each axis, which also takes the
    upper boundary.
    """
    idx, inside = cells_of(np.asarray(p, dtype=float)[None], spec)
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        for arr in (K, R, t):
            arr.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        h, w = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (h, w))
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= K[0, 2] < w and 0 <= K[1, 2] < h):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def extrinsics(self) -> np.ndarray:
        """World-to-camera [R | t], shape (3, 4)."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @classmethod
    def looking(cls, position, heading: float, elevation: float, image_size=(224, 224), hfov_deg: float = 60.0):
        """Camera at ``position`` with yaw ``heading`` and pitch ``elevation`` (radians)."""
        h, w = image_size
        f = (w / 2) / math.tan(math.radians(hfov_deg) / 2)
        K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
        ce, se = math.cos(elevation), math.sin(elevation)
        ch, sh = math.cos(heading), math.sin(heading)
        forward = np.array([ce * ch, ce * sh, se])
        right = np.array([sh, -ch, 0.0])
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        t = -R @ np.asarray(position, dtype=float)
        return cls(K, R, t, (h, w))

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            np.array_equal(self.intrinsics, other.intrinsics)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and self.image_size == other.image_size
        )


def project_points(points: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points; returns pixel coords (N, 2), depth (N,), visibility (N,)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    pc = pts @ cam.rotation.T + cam.translation
    depth = pc[:, 2]
    K = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = pc[:, 0] / depth
        yn = pc[:, 1] / depth
        u = K[0, 0] * xn + K[0, 1] * yn + K[0, 2]
        v = K[1, 1] * yn + K[1, 2]
    h, w = cam.image_size
    visible = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    uv = np.stack([u, v], axis=1)
    uv[~(depth > 0)] = np.nan
    return uv, depth, visible


def project_to_camera(p, cam: Camera) -> tuple[float, float, bool]:
    uv, _, vis = project_points(np.asarray(p, dtype=float)[None], cam)
    return float(uv[0, 0]), float(uv[0, 1]), bool(vis[0])


@dataclass(frozen=True, eq=False)
class SemanticPointCloud:
    points: np.ndarray
    labels: np.ndarray
    instance_ids: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.array(self.labels, dtype=np.uint16).reshape(-1)
        ins = np.array(self.instance_ids, dtype=np.int32).reshape(-1)
        if not (len(pts) == len(lab) == len(ins)):
            raise SceneError(f"points/labels/instance_ids length mismatch: {len(pts)}/{len(lab)}/{len(ins)}")
        if np.any(lab >= NUM_CLASSES):
            raise SceneError(f"labels: class id out of range [0, {NUM_CLASSES})")
        fg = np.isin(lab, FOREGROUND_CLASSES)
        if np.any(ins[fg] < 0):
            raise SceneError("instance_ids: foreground point without an instance id")
        for arr in (pts, lab, ins):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "instance_ids", ins)

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "SemanticPointCloud":
        return SemanticPointCloud(self.points[mask], self.labels[mask], self.instance_ids[mask])

    def __eq__(self, other):
        if not isinstance(other, SemanticPointCloud):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.instance_ids, other.instance_ids)
        )


@dataclass(frozen=True)
class SceneGraph:
    positions: dict
    edges: tuple

    def __post_init__(self):
        pos = {}
        for k, v in self.positions.items():
            arr = np.array(v, dtype=float).reshape(3)
            arr.setflags(write=False)
            pos[str(k)] = arr
        object.__setattr__(self, "positions", pos)
        edges = tuple(sorted(tuple(sorted((str(a), str(b)))) for a, b in self.edges))
        object.__setattr__(self, "edges", edges)
        if not pos:
            raise SceneError("graph: no viewpoints")
        for a, b in edges:
            for n in (a, b):
                if n not in pos:
                    raise SceneError(f"graph: edge {a}-{b} references missing node {n}")
        if not nx.is_connected(self.to_networkx()):
            raise SceneError("graph: viewpoint graph is not connected")

    @property
    def nodes(self) -> list[str]:
        return list(self.positions)

    def neighbors(self, node: str) -> list[str]:
        out = [b for a, b in self.edges if a == node] + [a for a, b in self.edges if b == node]
        return sorted(out)

    def distance(self, a: str, b: str) -> float:
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.positions)
        for a, b in self.edges:
            g.add_edge(a, b, weight=float(np.linalg.norm(self.positions[a] - self.positions[b])))
        return g

    def shortest_path_length(self, a: str, b: str) -> float:
        return float(nx.dijkstra_path_length(self.to_networkx(), a, b))

    def __eq__(self, other):
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (
            list(self.positions) == list(other.positions)
            and all(np.array_equal(self.positions[k], other.positions[k]) for k in self.positions)
            and self.edges == other.edges
        )


@dataclass(frozen=True, eq=False)
class Instruction:
    tokens: np.ndarray
    text: str | None = None

    def __post_init__(self):
        tok = np.array(self.tokens, dtype=np.float64)
        if tok.ndim != 2 or tok.shape[0] < 1:
            raise ValueError("instruction needs at least one token embedding, shape (L, D_w)")
        tok.setflags(write=False)
        object.__setattr__(self, "tokens", tok)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def random(cls, seed: int, length: int, dim: int, text: str | None = None) -> "Instruction":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((length, dim)).astype(np.float32).astype(np.float64), text)


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: SemanticPointCloud
    graph: SceneGraph
    cameras: dict
    rooms: tuple = ()
    objects: tuple = ()
    class_names: tuple = CLASS_NAMES
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        cams = {str(k): tuple(v) for k, v in self.cameras.items()}
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "rooms", tuple(self.rooms))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        for vp in cams:
            if vp not in self.graph.positions:
                raise SceneError(f"cameras: viewpoint {vp} not in graph")

    def room_of(self, position) -> int | None:
        """Index of the generator room containing ``position`` horizontally."""
        p = np.asarray(position, dtype=float)
        for i, room in enumerate(self.rooms):
            if room.contains(p[None])[0]:
                return i
        return None

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.cloud == other.cloud
            and self.graph == other.graph
            and self.cameras == other.cameras
            and self.rooms == other.rooms
            and self.objects == other.objects
            and self.class_names == other.class_names
            and self.grid == other.grid
        )


# --- scene archive -------------------------------------------------------

_POINT_DTYPE = np.dtype([("xyz", "<f8", (3,)), ("label", "<u2"), ("instance", "<i4")])


def _layout_to_json(r: RoomLayout) -> dict:
    return {"center": r.center.tolist(), "width": r.width, "length": r.length, "height": r.height, "rotation": r.rotation}


def _box_to_json(b: OrientedBox) -> dict:
    return {
        "center": b.center.tolist(), "half_extents": b.half_extents.tolist(), "yaw": b.yaw,
        "class_id": b.class_id, "instance_id": b.instance_id,
    }


def save_scene(scene: Scene, path) -> Path:
    """Write ``scene`` as a directory archive: header, points, graph, cameras."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    g = scene.grid
    header = {
        "format_version": FORMAT_VERSION,
        "classes": [
            {"id": i, "name": n, "kind": "stuff" if i in STUFF_CLASSES else "foreground"}
            for i, n in enumerate(scene.class_names)
        ],
        "grid": {"x_range": list(g.x_range), "y_range": list(g.y_range), "z_range": list(g.z_range),
                 "resolution": g.resolution},
        "oracle": {
            "rooms": [_layout_to_json(r) for r in scene.rooms],
            "objects": [_box_to_json(b) for b in scene.objects],
        },
    }
    (root / "header.json").write_text(json.dumps(header, indent=1) + "\n")

    rec = np.empty(len(scene.cloud), dtype=_POINT_DTYPE)
    rec["xyz"] = scene.cloud.points
    rec["label"] = scene.cloud.labels
    rec["instance"] = scene.cloud.instance_ids
    with open(root / "points.bin", "wb") as fh:
        fh.write(struct.pack("<Q", len(rec)))
        fh.write(rec.tobytes())

    lines = [f"node {k} {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for k, v in scene.graph.positions.items()]
    lines += [f"edge {a} {b}" for a, b in scene.graph.edges]
    (root / "graph.txt").write_text("\n".join(lines) + "\n")

    with open(root / "cameras.bin", "wb") as fh:
        fh.write(struct.pack("<I", len(scene.cameras)))
        for vp, cams in scene.cameras.items():
            name = vp.encode()
            fh.write(struct.pack("<H", len(name)) + name)
            fh.write(struct.pack("<I", len(cams)))
            for cam in cams:
                fh.write(cam.intrinsics.astype("<f8").tobytes())
                fh.write(cam.extrinsics.astype("<f8").tobytes())
                fh.write(struct.pack("<II", *cam.image_size))
    return root


def _read_graph(text: str) -> SceneGraph:
    positions, edges = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "node" and len(parts) == 5:
                positions[parts[1]] = [float(v) for v in parts[2:5]]
            elif parts[0] == "edge" and len(parts) == 3:
                edges.append((parts[1], parts[2]))
            else:
                raise ValueError
        except ValueError:
            raise SceneError(f"graph.txt line {lineno}: malformed record {line!r}") from None
    return SceneGraph(positions, tuple(edges))


def _read_cameras(blob: bytes) -> dict:
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise SceneError("cameras.bin: truncated")
        out = blob[off:off + n]
        off += n
        return out

    cams = {}
    (nvp,) = struct.unpack("<I", take(4))
    for _ in range(nvp):
        (ln,) = struct.unpack("<H", take(2))
        vp = take(ln).decode()
        (nv,) = struct.unpack("<I", take(4))
        views = []
        for _ in range(nv):
            K = np.frombuffer(take(72), dtype="<f8").reshape(3, 3)
            E = np.frombuffer(take(96), dtype="<f8").reshape(3, 4)
            h, w = struct.unpack("<II", take(8))
            try:
                views.append(Camera(K.copy(), E[:, :3].copy(), E[:, 3].copy(), (h, w)))
            except ValueError as exc:
                raise SceneError(f"cameras: viewpoint {vp}: {exc}") from None
        cams[vp] = tuple(views)
    if off != len(blob):
        raise SceneError("cameras.bin: trailing bytes")
    return cams


def load_scene(path) -> Scene:
    """Read a scene archive written by :func:`save_scene`."""
    root = Path(path)
    try:
        header = json.loads((root / "header.json").read_text())
    except FileNotFoundError:
        raise SceneError(f"header: missing {root / 'header.json'}") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"header: malformed JSON ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise SceneError(f"header: unsupported format_version {header.get('format_version')!r}")
    try:
        class_names = tuple(c["name"] for c in sorted(header["classes"], key=lambda c: c["id"]))
        g = header["grid"]
        grid = GridSpec(tuple(g["x_range"]), tuple(g["y_range"]), tuple(g["z_range"]), g["resolution"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"header: invalid class table or grid ({exc})") from None

    blob = (root / "points.bin").read_bytes()
    if len(blob) < 8:
        raise SceneError("points: truncated header")
    (n,) = struct.unpack("<Q", blob[:8])
    if len(blob) != 8 + n * _POINT_DTYPE.itemsize:
        raise SceneError(f"points: expected {n} records, byte size mismatch")
    rec = np.frombuffer(blob[8:], dtype=_POINT_DTYPE)
    cloud = SemanticPointCloud(rec["xyz"].copy(), rec["label"].copy(), rec["instance"].copy())

    graph = _read_graph((root / "graph.txt").read_text())
    cameras = _read_cameras((root / "cameras.bin").read_bytes())
    oracle = header.get("oracle", {})
    rooms = tuple(RoomLayout(**r) for r in oracle.get("rooms", []))
    objects = tuple(OrientedBox(**b) for b in oracle.get("objects", []))
    return Scene(cloud, graph, cameras, rooms, objects, class_names, grid)


# --- synthetic scenes ----------------------------------------------------

def _face_grid(extent_u: float, extent_v: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric regular samples over [-eu, eu] x [-ev, ev], edges included."""
    nu = max(2, int(math.ceil(2 * extent_u / spacing)) + 1)
    nv = max(2, int(math.ceil(2 * extent_v / spacing)) + 1)
    u, v = np.meshgrid(np.linspace(-extent_u, extent_u, nu), np.linspace(-extent_v, extent_v, nv), indexing="ij")
    return u.ravel(), v.ravel()


def box_surface_points(box: OrientedBox, spacing: float, bottom: bool = False) -> np.ndarray:
    """Points on the faces of ``box`` on a regular grid (symmetric about the center)."""
    ex, ey, ez = box.half_extents
    faces = []
    u, v = _face_grid(ey, ez, spacing)
    faces += [np.stack([np.full_like(u, s * ex), u, v], 1) for s in (-1, 1)]
    u, v = _face_grid(ex, ez, spacing)
    faces += [np.stack([u, np.full_like(u, s * ey), v], 1) for s in (-1, 1)]
    u, v = _face_grid(ex, ey, spacing)
    faces.append(np.stack([u, v, np.full_like(u, ez)], 1))
    if bottom:
        faces.append(np.stack([u, v, np.full_like(u, -ez)], 1))
    local = np.concatenate(faces)
    return local @ box.rotation.T + box.center


def room_surface_points(room: RoomLayout, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Wall, floor and ceiling samples of a cuboid room with their class labels."""
    hx, hy, hz = room.width / 2, room.length / 2, room.height / 2
    parts, labels = [], []
    u, v = _face_grid(hy, hz, spacing)
    for s in (-1, 1):
        parts.append(np.stack([np.full_like(u, s * hx), u, v], 1))
        labels.append(np.full(len(u), WALL))
    u, v = _face_grid(hx, hz, spacing)
    for s in (-1, 1):
        parts.append(np.stack([u, np.full_like(u, s * hy), v], 1))
        labels.append(np.full(len(u), WALL))
    u, v = _face_grid(hx, hy, spacing)
    parts.append(np.stack([u, v, np.full_like(u, -hz)], 1))
    labels.append(np.full(len(u), FLOOR))
    parts.append(np.stack([u, v, np.full_like(u, hz)], 1))
    labels.append(np.full(len(u), CEILING))
    local = np.concatenate(parts)
    pts = local @ room.as_box().rotation.T + room.center
    return pts, np.concatenate(labels)


def panorama_cameras(position, headings: int = 12, elevations=(-30.0, 0.0, 30.0),
                     image_size=(224, 224), hfov_deg: float = 60.0) -> tuple[Camera, ...]:
    cams = []
    for e in elevations:
        for i in range(headings):
            cams.append(Camera.looking(position, 2 * math.pi * i / headings, math.radians(e), image_size, hfov_deg))
    return tuple(cams)


def generate_synthetic_scene(seed: int, n_rooms: int = 2, n_objects: int = 4, point_spacing: float = 0.05,
                             headings: int = 12, elevations=(-30.0, 0.0, 30.0)) -> Scene:
    """Deterministic Manhattan scene: a row of axis-aligned rooms joined by doorways.

    Each room gets a center viewpoint and one viewpoint in front of every
    doorway; doorway viewpoints sit in the gap between rooms. Doorways exist
    only in the graph: walls are sampled without openings. Objects are boxes
    resting on the floor with distinct footprint sides, so their horizontal
    principal axes are well defined.
    """
    if n_rooms < 1:
        raise ValueError("n_rooms must be >= 1")
    rng = np.random.default_rng(seed)
    gap = 0.5
    rooms = []
    x_cursor = 0.0
    for _ in range(n_rooms):
        w, l, h = rng.uniform(4.0, 5.6), rng.uniform(4.0, 5.6), rng.uniform(2.6, 3.0)
        cy = rng.uniform(-0.4, 0.4)
        rooms.append(RoomLayout((x_cursor + w / 2, cy, h / 2), w, l, h, 0.0))
        x_cursor += w + gap

    positions: dict[str, list[float]] = {}
    edges: list[tuple[str, str]] = []
    room_vps: list[list[str]] = [[] for _ in rooms]
    for i, room in enumerate(rooms):
        name = f"r{i}c"
        jitter = rng.uniform(-0.3, 0.3, size=2)
        positions[name] = [room.center[0] + jitter[0], room.center[1] + jitter[1], CAMERA_HEIGHT]
        room_vps[i].append(name)
    for i in range(n_rooms - 1):
        a, b = rooms[i], rooms[i + 1]
        y_lo = max(a.center[1] - a.length / 2, b.center[1] - b.length / 2) + 0.8
        y_hi = min(a.center[1] + a.length / 2, b.center[1] + b.length / 2) - 0.8
        dy = rng.uniform(y_lo, y_hi)
        wall_a = a.center[0] + a.width / 2
        door = f"d{i}"
        positions[door] = [wall_a + gap / 2, dy, CAMERA_HEIGHT]
        fa, fb = f"r{i}e", f"r{i + 1}w"
        positions[fa] = [wall_a - 1.0, dy, CAMERA_HEIGHT]
        positions[fb] = [wall_a + gap + 1.0, dy, CAMERA_HEIGHT]
        room_vps[i].append(fa)
        room_vps[i + 1].append(fb)
        edges += [(fa, door), (door, fb)]
    for vps in room_vps:
        center = vps[0]
        for other in vps[1:]:
            edges.append((center, other))

    objects: list[OrientedBox] = []
    vp_xy = np.array([p[:2] for p in positions.values()])
    for k in range(n_objects):
        room = rooms[k % n_rooms]
        for _ in range(500):
            ex = rng.uniform(0.25, 0.6)
            ey = ex * rng.uniform(1.3, 1.8)
            ez = rng.uniform(0.3, 0.8)
            yaw = rng.uniform(-np.pi / 2, np.pi / 2)
            r = math.hypot(ex, ey)
            cx = rng.uniform(room.center[0] - room.width / 2 + r + 0.15, room.center[0] + room.width / 2 - r - 0.15)
            cy = rng.uniform(room.center[1] - room.length / 2 + r + 0.15, room.center[1] + room.length / 2 - r - 0.15)
            if np.min(np.hypot(vp_xy[:, 0] - cx, vp_xy[:, 1] - cy)) < r + 0.4:
                continue
            if any(math.hypot(o.center[0] - cx, o.center[1] - cy) < r + math.hypot(*o.half_extents[:2]) + 0.2
                   for o in objects):
                continue
            cls = int(rng.choice(FOREGROUND_CLASSES))
            objects.append(OrientedBox((cx, cy, ez), (ex, ey, ez), yaw, cls, len(objects)))
            break

    pts, labels, inst = [], [], []
    for room in rooms:
        p, lab = room_surface_points(room, point_spacing)
        pts.append(p)
        labels.append(lab)
        inst.append(np.full(len(p), -1))
    for box in objects:
        p = box_surface_points(box, point_spacing)
        pts.append(p)
        labels.append(np.full(len(p), box.class_id))
        inst.append(np.full(len(p), box.instance_id))
    cloud = SemanticPointCloud(np.concatenate(pts), np.concatenate(labels), np.concatenate(inst))
    graph = SceneGraph(positions, tuple(edges))
    cameras = {vp: panorama_cameras(pos, headings, elevations) for vp, pos in graph.positions.items()}
    return Scene(cloud, graph, cameras, tuple(rooms), tuple(objects))
