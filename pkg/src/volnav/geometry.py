"""Gravity-aligned boxes, cuboid room layouts and their 3D overlap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def wrap_half_pi(angle: float) -> float:
    """Wrap an angle into [-pi/2, pi/2)."""
    return float((angle + np.pi / 2) % np.pi - np.pi / 2)


def wrap_quarter_pi(angle: float) -> float:
    """Wrap an angle into [-pi/4, pi/4), i.e. modulo 90 degrees."""
    return float((angle + np.pi / 4) % (np.pi / 2) - np.pi / 4)


def angle_diff_mod(a: float, b: float, period: float) -> float:
    """Smallest absolute difference between two angles modulo ``period``."""
    d = (a - b) % period
    return float(min(d, period - d))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float
    class_id: int = -1
    instance_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center))
        object.__setattr__(self, "half_extents", _frozen(self.half_extents))
        object.__setattr__(self, "yaw", float(self.yaw))
        if self.center.shape != (3,) or self.half_extents.shape != (3,):
            raise ValueError("box center and half_extents must be 3-vectors")
        if not np.all(self.half_extents > 0):
            raise ValueError(f"half_extents must be positive, got {self.half_extents}")

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.yaw)

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def footprint(self) -> np.ndarray:
        """Counter-clockwise horizontal footprint, shape (4, 2)."""
        ex, ey = self.half_extents[:2]
        local = np.array([[-ex, -ey], [ex, -ey], [ex, ey], [-ex, ey]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return (signs * self.half_extents) @ self.rotation.T + self.center

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Express world points in the box frame."""
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        local = self.to_local(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)

    def z_interval(self) -> tuple[float, float]:
        return float(self.center[2] - self.half_extents[2]), float(self.center[2] + self.half_extents[2])

    def __eq__(self, other):
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.half_extents, other.half_extents)
            and self.yaw == other.yaw
            and self.class_id == other.class_id
            and self.instance_id == other.instance_id
        )

    def __repr__(self):
        return (
            f"OrientedBox(center={self.center.tolist()}, half_extents={self.half_extents.tolist()}, "
            f"yaw={self.yaw:.6f}, class_id={self.class_id}, instance_id={self.instance_id})"
        )


@dataclass(frozen=True, eq=False)
class RoomLayout:
    """Cuboid room: ``width`` runs along the rotated x axis, ``length`` along y.

    ``center`` is (x, y, z) with z at mid-height; gravity is +z.
    """

    center: np.ndarray
    width: float
    length: float
    height: float
    rotation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center))
        for name in ("width", "length", "height", "rotation"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.width, self.length, self.height) <= 0:
            raise ValueError("layout width, length and height must be positive")

    def as_box(self) -> OrientedBox:
        return OrientedBox(self.center, (self.width / 2, self.length / 2, self.height / 2), self.rotation)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.as_box().contains(points, tol)

    def translated(self, offset) -> "RoomLayout":
        return RoomLayout(self.center + np.asarray(offset, float), self.width, self.length, self.height, self.rotation)

    def __eq__(self, other):
        if not isinstance(other, RoomLayout):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and (self.width, self.length, self.height, self.rotation)
            == (other.width, other.length, other.height, other.rotation)
        )

    def __repr__(self):
        return (
            f"RoomLayout(center={self.center.tolist()}, width={self.width:.4f}, "
            f"length={self.length:.4f}, height={self.height:.4f}, rotation={self.rotation:.6f})"
        )


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, output = output, []
        for j in range(len(inp)):
            cur, prev = np.array(inp[j]), np.array(inp[j - 1])
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    output.append(tuple(prev + (cur - prev) * (sp / (sp - sc))))
                output.append(tuple(cur))
            elif sp >= 0:
                output.append(tuple(prev + (cur - prev) * (sp / (sp - sc))))
    return np.array(output, dtype=float).reshape(-1, 2)


def box_iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """3D IoU of two yaw-rotated boxes: footprint clipping times height overlap."""
    z0 = max(a.z_interval()[0], b.z_interval()[0])
    z1 = min(a.z_interval()[1], b.z_interval()[1])
    if z1 <= z0:
        return 0.0
    inter_area = polygon_area(clip_convex(a.footprint(), b.footprint()))
    inter = inter_area * (z1 - z0)
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0
