"""Camera views as exact plane homographies.

Camera 0 looks straight down: its pixels ARE world coordinates. Cameras 1
and 2 are mildly oblique; each is a fixed projective map from world points
to view pixels. Because the scene is planar, the pixel-to-pixel map between
any two views is the exact homography H_j @ inv(H_i), which the recorder
stores alongside every episode.
"""
from __future__ import annotations

import numpy as np

from .scene import IMAGE_SIZE

VIEW_NAMES: tuple[str, ...] = ("view0", "view1", "view2")
NUM_VIEWS = len(VIEW_NAMES)


def _homography(angle_deg: float, scale: float, tx: float, ty: float,
                g1: float, g2: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array(
        [
            [scale * c, -scale * s, tx],
            [scale * s, scale * c, ty],
            [g1, g2, 1.0],
        ],
        dtype=np.float64,
    )


# World -> view-pixel maps. Kept gentle so every element stays inside all
# frames and cross-view mask overlap after warping stays high.
VIEW_HOMOGRAPHIES: tuple[np.ndarray, ...] = (
    np.eye(3, dtype=np.float64),
    _homography(5.0, 0.96, 2.5, 1.2, 0.0009, -0.0006),
    _homography(-5.0, 0.97, -2.0, 2.0, -0.0008, 0.0007),
)


def view_warp(src_view: int, dst_view: int) -> np.ndarray:
    """Homography taking src-view pixel coords to dst-view pixel coords."""
    h_src = VIEW_HOMOGRAPHIES[src_view]
    h_dst = VIEW_HOMOGRAPHIES[dst_view]
    w = h_dst @ np.linalg.inv(h_src)
    return w / w[2, 2]


def all_view_warps() -> list[list[np.ndarray]]:
    """warps[i][j] maps view-i pixels to view-j pixels (identity on i==j)."""
    return [
        [view_warp(i, j) for j in range(NUM_VIEWS)] for i in range(NUM_VIEWS)
    ]


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to points of shape (..., 2)."""
    x = pts[..., 0]
    y = pts[..., 1]
    d = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / d
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / d
    return np.stack([u, v], axis=-1)


def pixel_grid(size: int = IMAGE_SIZE) -> np.ndarray:
    """Pixel-center coordinates of a size x size image, shape (H, W, 2)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


_WORLD_GRID_CACHE: dict[int, np.ndarray] = {}


def world_grid(view: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """World coordinates under each pixel center of the given view."""
    key = view * 100000 + size
    if key not in _WORLD_GRID_CACHE:
        inv = np.linalg.inv(VIEW_HOMOGRAPHIES[view])
        _WORLD_GRID_CACHE[key] = apply_homography(inv, pixel_grid(size))
    return _WORLD_GRID_CACHE[key]
