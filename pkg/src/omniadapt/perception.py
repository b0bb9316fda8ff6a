"""Mask pipeline: language-free task grounding, segmentation, tracking.

The heavy open-vocabulary models this mimics are replaced by deterministic
stand-ins with the same interfaces: a registry lookup grounds the task
description, color thresholding segments the prompted elements, and
normalized cross-correlation template matching propagates masks frame to
frame with a confidence fallback. Everything downstream (dilation, masking
modes, the cross-view consistency gate) is the real pipeline.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .simenv.scene import PALETTE, TASKS, EFFECTOR_COLOR_NAME

logger = logging.getLogger(__name__)

ELEMENT_LABELS: tuple[str, ...] = ("target", "effector")

COLOR_TOL = 0.02          # renderer emits exact palette colors
MATCH_WINDOW = 8          # template search radius, px
MATCH_MIN_CONFIDENCE = 0.5
DILATE_RADIUS = 2         # object-footprint growth at 64x64
CONSISTENCY_THRESHOLD = 0.65

MASKING_MODES = ("background", "target", "effector", "none")


class UnsupportedTaskError(ValueError):
    """The task description matches nothing in the registry."""


class TrackingLostError(RuntimeError):
    """Every element vanished from every view."""


@dataclasses.dataclass
class TaskPrompt:
    """Grounded task: description plus the element labels each view tracks."""

    task_description: str
    element_labels: dict[str, tuple[str, ...]]  # view -> labels


@dataclasses.dataclass
class MaskSet:
    """Per-view stacks of binary element masks.

    masks[view] has shape (E, H, W) with channel order element_labels;
    confidence[view] has shape (E,), the tracker's match confidence
    (1.0 for freshly segmented or ground-truth masks).
    """

    element_labels: tuple[str, ...]
    masks: dict[str, np.ndarray]
    confidence: dict[str, np.ndarray]
    # Color prototype per channel, locked at segmentation time so the
    # tracker never re-derives a class from occluded slivers.
    element_colors: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self) -> None:
        e = len(self.element_labels)
        for view, m in self.masks.items():
            if m.ndim != 3 or m.shape[0] != e:
                raise ValueError(
                    f"{view}: mask stack must be (E, H, W) with E={e}, got {m.shape}"
                )
            if m.dtype != np.bool_:
                raise ValueError(f"{view}: masks must be boolean")

    @property
    def views(self) -> list[str]:
        return list(self.masks)

    def mask(self, view: str, label: str) -> np.ndarray:
        return self.masks[view][self.element_labels.index(label)]

    def union(self, view: str) -> np.ndarray:
        return self.masks[view].any(axis=0)

    @staticmethod
    def from_label_dicts(
        d: dict[str, dict[str, np.ndarray]],
        element_labels: tuple[str, ...] = ELEMENT_LABELS,
        element_colors: tuple[tuple[float, float, float], ...] | None = None,
    ) -> "MaskSet":
        masks = {
            view: np.stack([np.asarray(lab[l], dtype=bool) for l in element_labels])
            for view, lab in d.items()
        }
        conf = {view: np.ones(len(element_labels)) for view in d}
        return MaskSet(element_labels, masks, conf, element_colors)

    def to_label_dicts(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            view: {l: m[i] for i, l in enumerate(self.element_labels)}
            for view, m in self.masks.items()
        }


# ---------------------------------------------------------------------------
# Grounding and segmentation
# ---------------------------------------------------------------------------


def interpret_task(
    first_frames: dict[str, np.ndarray], task_description: str
) -> TaskPrompt:
    """Ground a task description against the registry of known tasks."""
    wanted = " ".join(task_description.lower().split())
    for spec in TASKS.values():
        if wanted in (spec.description.lower(), spec.task_id.lower()):
            return TaskPrompt(
                task_description=spec.description,
                element_labels={v: ELEMENT_LABELS for v in first_frames},
            )
    known = sorted(f"{s.task_id}: {s.description!r}" for s in TASKS.values())
    raise UnsupportedTaskError(
        f"cannot ground task {task_description!r}; known tasks: {known}"
    )


def _task_spec_for(description: str):
    wanted = " ".join(description.lower().split())
    for spec in TASKS.values():
        if wanted in (spec.description.lower(), spec.task_id.lower()):
            return spec
    raise UnsupportedTaskError(f"cannot ground task {description!r}")


def _color_mask(frame: np.ndarray, rgb: tuple[float, float, float]) -> np.ndarray:
    return (np.abs(frame - np.asarray(rgb, dtype=frame.dtype)) <= COLOR_TOL).all(-1)


def _snap_to_palette(rgb: np.ndarray, max_dist: float = 0.1):
    """Nearest palette color, or None if nothing is close."""
    best, best_d = None, max_dist
    for c in PALETTE.values():
        d = float(np.linalg.norm(rgb - np.asarray(c)))
        if d < best_d:
            best, best_d = c, d
    return best


def init_masks(
    first_frames: dict[str, np.ndarray],
    prompt: TaskPrompt,
    *,
    gt_masks: dict[str, dict[str, np.ndarray]] | None = None,
) -> MaskSet:
    """Segment the prompted elements in the first frames.

    With gt_masks the simulator's masks pass straight through (the
    --gt-masks escape hatch); otherwise each element is found by color
    threshold against its palette entry.
    """
    if gt_masks is not None:
        return MaskSet.from_label_dicts(gt_masks)

    spec = _task_spec_for(prompt.task_description)
    colors = {
        "target": spec.target_spec.rgb,
        "effector": PALETTE[EFFECTOR_COLOR_NAME],
    }
    masks: dict[str, np.ndarray] = {}
    conf: dict[str, np.ndarray] = {}
    for view, frame in first_frames.items():
        labels = prompt.element_labels[view]
        chans = []
        for label in labels:
            m = _color_mask(frame, colors[label])
            if not m.any():
                logger.warning("init_masks: %s not visible in %s", label, view)
            chans.append(m)
        masks[view] = np.stack(chans)
        conf[view] = np.ones(len(labels))
    labels = tuple(next(iter(prompt.element_labels.values())))
    return MaskSet(labels, masks, conf, tuple(colors[l] for l in labels))


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


def _bbox(mask: np.ndarray, pad: int, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return (
        max(int(ys.min()) - pad, 0),
        min(int(ys.max()) + pad + 1, shape[0]),
        max(int(xs.min()) - pad, 0),
        min(int(xs.max()) + pad + 1, shape[1]),
    )


def _crop(frame: np.ndarray, y0: int, y1: int, x0: int, x1: int) -> np.ndarray:
    """Crop with zero padding outside the frame."""
    h, w = frame.shape[:2]
    out = np.zeros((y1 - y0, x1 - x0) + frame.shape[2:], dtype=frame.dtype)
    sy0, sy1 = max(y0, 0), min(y1, h)
    sx0, sx1 = max(x0, 0), min(x1, w)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return out


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def propagate_masks(
    prev_frames: dict[str, np.ndarray],
    prev_masks: MaskSet,
    cur_frames: dict[str, np.ndarray],
    *,
    window: int = MATCH_WINDOW,
    min_confidence: float = MATCH_MIN_CONFIDENCE,
) -> MaskSet:
    """Track each element one frame forward by template matching.

    The previous bounding-box patch is matched against the new frame within
    +/-window pixels (normalized cross-correlation); the matched region is
    then re-segmented by the element's color. A weak best match keeps the
    previous mask and flags low confidence. If every element of every view
    ends up empty, tracking is declared lost.
    """
    out_masks: dict[str, np.ndarray] = {}
    out_conf: dict[str, np.ndarray] = {}
    for view, prev_frame in prev_frames.items():
        cur = cur_frames[view]
        stack = prev_masks.masks[view]
        if np.array_equal(prev_frame, cur):
            out_masks[view] = stack.copy()
            out_conf[view] = np.ones(stack.shape[0])
            continue
        chans = []
        confs = []
        for e in range(stack.shape[0]):
            mask = stack[e]
            if not mask.any():
                chans.append(np.zeros_like(mask))
                confs.append(0.0)
                continue
            y0, y1, x0, x1 = _bbox(mask, 2, mask.shape)
            patch = prev_frame[y0:y1, x0:x1]
            region = _crop(cur, y0 - window, y1 + window, x0 - window, x1 + window)
            wins = np.lib.stride_tricks.sliding_window_view(
                region, patch.shape[:2], axis=(0, 1)
            )  # (2w+1, 2w+1, 3, ph, pw)
            flat = wins.transpose(0, 1, 3, 4, 2).reshape(
                wins.shape[0] * wins.shape[1], -1
            )
            flat = flat - flat.mean(axis=1, keepdims=True)
            norms = np.linalg.norm(flat, axis=1)
            t = (patch - patch.mean()).ravel()
            tn = np.linalg.norm(t)
            if tn == 0.0:
                scores = np.where(norms == 0.0, 1.0, 0.0)
            else:
                with np.errstate(invalid="ignore", divide="ignore"):
                    scores = np.where(norms > 0.0, flat @ t / (norms * tn), 0.0)
            k = int(np.argmax(scores))
            by = k // wins.shape[1] - window
            bx = k % wins.shape[1] - window
            conf = max(float(scores[k]), 0.0)
            if conf < min_confidence:
                chans.append(mask.copy())  # fall back, flag low confidence
                confs.append(conf)
                continue
            if prev_masks.element_colors is not None:
                color = prev_masks.element_colors[e]
            else:
                color = _snap_to_palette(np.median(prev_frame[mask], axis=0))
            if color is None:
                # The carried mask no longer covers a known element color
                # (e.g. a sliver behind the gripper); keep it, low trust.
                chans.append(mask.copy())
                confs.append(min(conf, min_confidence / 2))
                continue
            region = np.zeros_like(mask)
            ry0, ry1 = max(y0 + by - 2, 0), min(y1 + by + 2, mask.shape[0])
            rx0, rx1 = max(x0 + bx - 2, 0), min(x1 + bx + 2, mask.shape[1])
            region[ry0:ry1, rx0:rx1] = True
            new_mask = region & _color_mask(cur, tuple(color))
            if not new_mask.any():
                new_mask = mask.copy()
                conf = min(conf, min_confidence / 2)
            chans.append(new_mask)
            confs.append(conf)
        out_masks[view] = np.stack(chans)
        out_conf[view] = np.asarray(confs, dtype=np.float64)

    result = MaskSet(
        prev_masks.element_labels, out_masks, out_conf, prev_masks.element_colors
    )
    if not any(m.any() for m in result.masks.values()):
        raise TrackingLostError("all elements lost in all views")
    return result


# ---------------------------------------------------------------------------
# Mask algebra
# ---------------------------------------------------------------------------


def dilate_mask(mask: np.ndarray, radius: int = DILATE_RADIUS) -> np.ndarray:
    """Grow a binary mask by a disc footprint of the given pixel radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    disc = (yy * yy + xx * xx) <= r * r
    return ndimage.binary_dilation(mask, structure=disc)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty vs empty is 1.0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != np.bool_ or b.dtype != np.bool_:
        raise ValueError("iou expects boolean masks")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / union


def warp_mask(mask: np.ndarray, homography: np.ndarray) -> np.ndarray:
    """Warp a binary mask by a 3x3 pixel-to-pixel homography.

    Output pixel centers are pulled back through the inverse map and
    bilinearly sampled; coverage >= 0.5 marks membership.
    """
    h = np.asarray(homography, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError("homography must be 3x3")
    hinv = np.linalg.inv(h)
    hh, ww = mask.shape
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    d = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / d
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / d
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0

    m = mask.astype(np.float64)

    def at(yy, xx):
        v = np.zeros_like(m)
        ok = (yy >= 0) & (yy < hh) & (xx >= 0) & (xx < ww)
        v[ok] = m[yy[ok], xx[ok]]
        return v

    acc = (
        at(y0, x0) * (1 - fx) * (1 - fy)
        + at(y0, x0 + 1) * fx * (1 - fy)
        + at(y0 + 1, x0) * (1 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
    )
    return acc >= 0.5


def apply_background_mask(
    frame: np.ndarray, masks: MaskSet, mode: str, view: str
) -> np.ndarray:
    """Apply a masking mode to one view's frame.

    background: keep only element pixels (zero the backdrop);
    target: zero the target pixels; effector: zero the effector pixels;
    none: leave the frame untouched (ablation control).
    """
    if mode not in MASKING_MODES:
        raise ValueError(f"mode must be one of {MASKING_MODES}, got {mode!r}")
    out = frame.copy()
    if mode == "background":
        out[~masks.union(view)] = 0.0
    elif mode != "none":
        out[masks.mask(view, mode)] = 0.0
    return out


def check_view_consistency(
    masks: MaskSet,
    warps: list[list[np.ndarray]],
    threshold: float = CONSISTENCY_THRESHOLD,
) -> tuple[float, bool]:
    """Cross-view agreement score: mean IoU over ordered view pairs.

    Each view's element union is warped into every other view's frame with
    the true inter-view homography (warps[i][j] maps view i to view j) and
    compared against that view's own union.
    """
    views = masks.views
    if len(views) < 2:
        raise ValueError("need at least two views for a consistency check")
    unions = {v: masks.union(v) for v in views}
    scores = []
    for i, vi in enumerate(views):
        for j, vj in enumerate(views):
            if i == j:
                continue
            warped = warp_mask(unions[vj], np.asarray(warps[j][i]))
            scores.append(iou(unions[vi], warped))
    score = float(np.mean(scores))
    return score, bool(score > threshold)


# ---------------------------------------------------------------------------
# Episode preprocessing
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PreprocessResult:
    """Per-frame bookkeeping from preprocessing one episode."""

    mode: str
    scores: list[float]
    passed: list[bool]
    min_confidence: list[float]

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def preprocess_episode(
    episode,
    *,
    mode: str = "background",
    dilate_effector: bool = False,
    dilate_radius: int = DILATE_RADIUS,
    use_gt_masks: bool = False,
    threshold: float = CONSISTENCY_THRESHOLD,
    out_dir: str | Path | None = None,
) -> tuple[list[dict[str, np.ndarray]], PreprocessResult]:
    """Track, dilate, gate, and mask every frame of an episode.

    Returns the masked frames (list over time of view->image) and the
    per-frame consistency record. With out_dir set, masked frames go to
    out_dir/masked_frames/<view>/<t>.png and the record to
    out_dir/preprocess.json.
    """
    frames = [f.images for f in episode.frames]
    prompt = interpret_task(frames[0], TASKS[episode.scene.task_id].description)

    masked_all: list[dict[str, np.ndarray]] = []
    scores: list[float] = []
    passed: list[bool] = []
    min_conf: list[float] = []

    masks = init_masks(
        frames[0], prompt, gt_masks=episode.masks[0] if use_gt_masks else None
    )
    prev_raw = masks
    for t, frame_t in enumerate(frames):
        if t > 0:
            if use_gt_masks:
                prev_raw = MaskSet.from_label_dicts(episode.masks[t])
            else:
                prev_raw = propagate_masks(frames[t - 1], prev_raw, frame_t)

        processed = _postprocess(prev_raw, dilate_effector, dilate_radius)
        score, ok = check_view_consistency(processed, episode.view_warps, threshold)
        scores.append(score)
        passed.append(ok)
        min_conf.append(float(min(c.min() for c in prev_raw.confidence.values())))
        masked_all.append(
            {
                v: apply_background_mask(frame_t[v], processed, mode, v)
                for v in frame_t
            }
        )

    result = PreprocessResult(mode, scores, passed, min_conf)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for t, mf in enumerate(masked_all):
            for v, img in mf.items():
                d = out_dir / "masked_frames" / v
                d.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(
                    d / f"{t}.png"
                )
        (out_dir / "preprocess.json").write_text(json.dumps(result.to_json()))
    return masked_all, result


def _postprocess(masks: MaskSet, dilate_effector: bool, radius: int) -> MaskSet:
    """Dilate the target (always) and optionally the effector channel."""
    new = {}
    for view, stack in masks.masks.items():
        chans = []
        for i, label in enumerate(masks.element_labels):
            if label == "target" or (label == "effector" and dilate_effector):
                chans.append(dilate_mask(stack[i], radius))
            else:
                chans.append(stack[i].copy())
        new[view] = np.stack(chans)
    return MaskSet(
        masks.element_labels,
        new,
        {k: v.copy() for k, v in masks.confidence.items()},
        masks.element_colors,
    )
