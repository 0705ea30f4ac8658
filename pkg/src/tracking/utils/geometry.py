import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import circmean

TWO_PI = 2.0 * math.pi

# Vertices closer than this to a clipping edge count as lying on it
_CLIP_EPS = 1e-12


@dataclass(frozen=True)
class Box3D:
    """
    An upright 3D box in the ego frame.

    Attributes:
        center (tuple[float, float, float]): (x, y, z) in meters.
        size (tuple[float, float, float]): (w, l, h) in meters, all > 0. The
            length runs along the heading, the width across it.
        yaw (float): Heading in radians about +z.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("Box3D needs a 3-vector center and a 3-vector size.")
        if not all(math.isfinite(c) for c in self.center):
            raise ValueError(f"Box3D center must be finite, got {self.center}.")
        if not all(math.isfinite(s) and s > 0 for s in self.size):
            raise ValueError(
                f"Box3D size must be strictly positive, got {self.size}."
            )
        if not math.isfinite(self.yaw):
            raise ValueError(f"Box3D yaw must be finite, got {self.yaw}.")

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    @property
    def footprint_area(self) -> float:
        w, l, _ = self.size
        return w * l


def wrap_angle(theta: float) -> float:
    """Map an angle onto the half-open range [-pi, pi)."""
    if not math.isfinite(theta):
        raise ValueError(f"Cannot wrap a non-finite angle: {theta}")
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def signed_yaw_diff(a: float, b: float) -> float:
    """Smallest signed difference a - b, wrapped onto [-pi, pi)."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"Yaw difference needs finite angles, got {a}, {b}")
    return wrap_angle(a - b)


def center_distance_xy(a: Box3D, b: Box3D) -> float:
    """Euclidean distance between the box centers in the x-y plane."""
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def bev_corners(box: Box3D) -> np.ndarray:
    """
    Return the four footprint corners of a box, counter-clockwise.

    Returns:
        np.ndarray: Array of shape (4, 2).
    """
    w, l, _ = box.size
    half = np.array(
        [
            [l / 2.0, w / 2.0],
            [-l / 2.0, w / 2.0],
            [-l / 2.0, -w / 2.0],
            [l / 2.0, -w / 2.0],
        ]
    )
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return half @ rot.T + np.array(box.center[:2])


def polygon_area(points: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as an (n, 2) array."""
    if len(points) < 3:
        return 0.0
    x, y = points[:, 0], points[:, 1]
    cross = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return 0.5 * abs(float(cross))


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """
    Clip a polygon against a convex polygon (Sutherland-Hodgman).

    Both polygons must be ordered counter-clockwise.

    Args:
        subject (np.ndarray): (n, 2) vertices of the polygon to clip.
        clip (np.ndarray): (m, 2) vertices of the convex clipping polygon.

    Returns:
        np.ndarray: (k, 2) vertices of the intersection, possibly empty.
    """
    output = [np.asarray(p, dtype=float) for p in subject]
    cp1 = clip[-1]
    for cp2 in clip:
        edge = cp2 - cp1
        inputs = output
        output = []
        if not inputs:
            break

        def side(p, edge=edge, cp1=cp1):
            return edge[0] * (p[1] - cp1[1]) - edge[1] * (p[0] - cp1[0])

        s = inputs[-1]
        d_s = side(s)
        for e in inputs:
            d_e = side(e)
            if d_e >= -_CLIP_EPS:
                if d_s < -_CLIP_EPS:
                    output.append(s + (e - s) * (d_s / (d_s - d_e)))
                output.append(e)
            elif d_s >= -_CLIP_EPS:
                output.append(s + (e - s) * (d_s / (d_s - d_e)))
            s, d_s = e, d_e
        cp1 = cp2
    return np.array(output, dtype=float).reshape(-1, 2)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """
    Intersection-over-union of the yaw-rotated footprints of two boxes.

    Heights are ignored. Boxes that only touch along an edge have IoU 0.

    Raises:
        ValueError: If either footprint has zero area.
    """
    area_a = a.footprint_area
    area_b = b.footprint_area
    if area_a <= 0.0 or area_b <= 0.0:
        raise ValueError("bev_iou is undefined for a zero-area footprint.")

    # Cheap reject on the circumscribed circles
    reach = 0.5 * (math.hypot(*a.size[:2]) + math.hypot(*b.size[:2]))
    if center_distance_xy(a, b) >= reach:
        return 0.0

    inter = polygon_area(clip_convex_polygon(bev_corners(a), bev_corners(b)))
    if inter <= 0.0:
        return 0.0
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union)))


def box_from_mean_pose(boxes: list[Box3D]) -> Box3D:
    """Average a list of boxes into one box; yaw uses the circular mean."""
    if not boxes:
        raise ValueError("Cannot average an empty list of boxes.")
    centers = np.array([b.center for b in boxes], dtype=float)
    sizes = np.array([b.size for b in boxes], dtype=float)
    yaws = np.array([b.yaw for b in boxes], dtype=float)
    mean_yaw = float(circmean(yaws, high=math.pi, low=-math.pi))
    return Box3D(
        center=tuple(float(v) for v in centers.mean(axis=0)),
        size=tuple(float(v) for v in sizes.mean(axis=0)),
        yaw=wrap_angle(mean_yaw),
    )
