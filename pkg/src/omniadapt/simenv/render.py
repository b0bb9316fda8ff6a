"""Rasterizer: analytic shapes + procedural backdrop, per view.

Rendering walks the instance list bottom-to-top and paints an integer id
map, so per-element visibility (after occlusion) falls out exactly. Draw
order: backdrop, static distractors, target, occluder bar, dynamic
distractors (they fly OVER the target), gripper on top.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import views
from .scene import PALETTE, SceneConfig, SceneLayout, ShapeSpec, background_rgb

ID_BACKGROUND = 0
ID_TARGET = 1
ID_EFFECTOR = 2
ID_OCCLUDER = 3
ID_DISTRACTOR0 = 10  # distractor k gets id 10 + k

# Gripper glyph (world units): a solid block whose width tracks the hand
# aperture, so closing the hand visibly narrows the silhouette. A compact
# solid keeps cross-view mask warps accurate at this resolution; thin
# fingers alias too hard at 64x64.
_GRIP_H = 6.5       # half height
_GRIP_W_MIN = 4.8   # half width when fully closed
_GRIP_W_SPAN = 2.6  # extra half width when fully open

_BAR_H = 2.4  # occluder bar half height


@dataclasses.dataclass(frozen=True)
class DrawItem:
    instance_id: int
    spec: ShapeSpec
    xy: tuple[float, float]


def shape_region(spec: ShapeSpec, center: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Boolean membership of world points (..., 2) in the shape."""
    d = pts - center
    if spec.kind == "disc":
        return (d * d).sum(-1) <= spec.size * spec.size
    if spec.kind == "square":
        return np.abs(d).max(-1) <= spec.size
    if spec.kind == "triangle":
        # Equilateral, apex toward -y, circumradius = size, centered on the
        # centroid. Three half-plane tests against the edges.
        r = spec.size
        dx, dy = d[..., 0], d[..., 1]
        c1 = 0.8660254037844386 * r * (dy + r) - 1.5 * r * dx
        c2 = -1.7320508075688772 * r * (dy - 0.5 * r)
        c3 = 0.8660254037844386 * r * (dy - 0.5 * r) + 1.5 * r * (dx + 0.8660254037844386 * r)
        return (c1 >= 0.0) & (c2 >= 0.0) & (c3 >= 0.0)
    if spec.kind == "bar":
        return (np.abs(d[..., 0]) <= spec.size) & (np.abs(d[..., 1]) <= _BAR_H)
    raise ValueError(f"unknown shape kind {spec.kind!r}")


def gripper_region(center_xy: np.ndarray, aperture: float, pts: np.ndarray) -> np.ndarray:
    """Boolean membership of world points in the gripper glyph."""
    half_w = _GRIP_W_MIN + _GRIP_W_SPAN * float(np.clip(aperture, 0.0, 1.0))
    dx = np.abs(pts[..., 0] - center_xy[0])
    dy = np.abs(pts[..., 1] - center_xy[1])
    return (dx <= half_w) & (dy <= _GRIP_H)


def render_views(
    config: SceneConfig,
    layout: SceneLayout,
    target_xy: tuple[float, float],
    distractor_xy: tuple[tuple[float, float], ...],
    effector_xy: tuple[float, float],
    aperture: float,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Render all views.

    Returns (images, id_maps): images maps view name to (H, W, 3) float32 in
    [0, 1]; id_maps maps view name to (H, W) uint8 instance ids.
    """
    items: list[DrawItem] = []
    for k, spec in enumerate(config.distractor_specs):
        if not config.dynamic_distractors:
            items.append(DrawItem(ID_DISTRACTOR0 + k, spec, distractor_xy[k]))
    items.append(DrawItem(ID_TARGET, config.target_spec, target_xy))
    if config.occluder_spec is not None and layout.occluder_xy is not None:
        items.append(DrawItem(ID_OCCLUDER, config.occluder_spec, layout.occluder_xy))
    if config.dynamic_distractors:
        for k, spec in enumerate(config.distractor_specs):
            items.append(DrawItem(ID_DISTRACTOR0 + k, spec, distractor_xy[k]))

    images: dict[str, np.ndarray] = {}
    id_maps: dict[str, np.ndarray] = {}
    for v, name in enumerate(views.VIEW_NAMES):
        pts = views.world_grid(v)
        img = background_rgb(pts, config.background_id)
        ids = np.zeros(pts.shape[:2], dtype=np.uint8)
        for item in items:
            region = shape_region(item.spec, np.asarray(item.xy), pts)
            img[region] = item.spec.rgb
            ids[region] = item.instance_id
        grip = gripper_region(np.asarray(effector_xy), aperture, pts)
        img[grip] = PALETTE["steel"]
        ids[grip] = ID_EFFECTOR
        images[name] = img.astype(np.float32)
        id_maps[name] = ids
    return images, id_maps


def gt_masks_from_ids(id_maps: dict[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    """Visible-pixel masks for the labeled elements, per view."""
    out: dict[str, dict[str, np.ndarray]] = {}
    for name, ids in id_maps.items():
        out[name] = {
            "target": ids == ID_TARGET,
            "effector": ids == ID_EFFECTOR,
        }
    return out
