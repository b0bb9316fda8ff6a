"""Scene description: color palette, shape specs, task registry, layouts.

A scene lives in a 64x64 "world" plane whose coordinates coincide with the
pixels of camera 0 (the overhead view). Element positions are continuous
world coordinates; shapes are analytic regions rasterized per view.
"""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

IMAGE_SIZE = 64
WORLD_LO = 0.0
WORLD_HI = float(IMAGE_SIZE)


def _q(rgb: tuple[float, float, float]) -> tuple[float, float, float]:
    # Snap to exact 8-bit levels so PNG round-trips are lossless.
    return tuple(round(c * 255.0) / 255.0 for c in rgb)


# Element colors. Backgrounds stay dim (all channels <= 0.5) so a simple
# nearest-color threshold never confuses an element with the backdrop.
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": _q((0.90, 0.15, 0.10)),
    "blue": _q((0.15, 0.30, 0.90)),
    "green": _q((0.10, 0.80, 0.25)),
    "yellow": _q((0.95, 0.85, 0.10)),
    "magenta": _q((0.85, 0.15, 0.80)),
    "cyan": _q((0.10, 0.80, 0.85)),
    "amber": _q((0.95, 0.55, 0.10)),
    "steel": _q((0.92, 0.92, 0.95)),  # gripper
    "slate": _q((0.35, 0.35, 0.38)),  # occluder bar
}

EFFECTOR_COLOR_NAME = "steel"
OCCLUDER_COLOR_NAME = "slate"

SHAPE_KINDS = ("disc", "square", "triangle", "bar")


class ConfigurationError(ValueError):
    """Raised when a scene cannot be instantiated as configured."""


@dataclasses.dataclass(frozen=True)
class ShapeSpec:
    """One rigid colored element: analytic shape, palette color, size.

    size is the radius for discs, the half side for squares, the
    circumradius for triangles, and the half width for bars.
    """

    kind: str
    color: str
    size: float

    def __post_init__(self) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape kind {self.kind!r}")
        if self.color not in PALETTE:
            raise ConfigurationError(f"unknown palette color {self.color!r}")
        if not (0.5 <= self.size <= 20.0):
            raise ConfigurationError(f"shape size {self.size} out of range")

    @property
    def rgb(self) -> tuple[float, float, float]:
        return PALETTE[self.color]


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    """Full deterministic description of one episode's scene.

    rng_seed drives layout sampling only; dynamics are deterministic.
    """

    task_id: str
    target_spec: ShapeSpec
    distractor_specs: tuple[ShapeSpec, ...] = ()
    background_id: int = 0
    dynamic_distractors: bool = False
    occluder_spec: Optional[ShapeSpec] = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.task_id or not all(
            c.isalnum() or c == "_" for c in self.task_id
        ):
            raise ConfigurationError(
                f"task_id must be a nonempty [A-Za-z0-9_]+ string, got {self.task_id!r}"
            )
        colors = [self.target_spec.color] + [d.color for d in self.distractor_specs]
        if len(set(colors)) != len(colors):
            raise ConfigurationError("target and distractors must have distinct colors")
        if EFFECTOR_COLOR_NAME in colors or OCCLUDER_COLOR_NAME in colors:
            raise ConfigurationError(
                "element colors may not reuse the gripper or occluder color"
            )
        if self.background_id < 0 or self.background_id >= len(BACKGROUNDS):
            raise ConfigurationError(f"background_id {self.background_id} out of range")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["distractor_specs"] = [dataclasses.asdict(s) for s in self.distractor_specs]
        d["occluder_spec"] = (
            dataclasses.asdict(self.occluder_spec) if self.occluder_spec else None
        )
        return d

    @staticmethod
    def from_json(d: dict) -> "SceneConfig":
        return SceneConfig(
            task_id=d["task_id"],
            target_spec=ShapeSpec(**d["target_spec"]),
            distractor_specs=tuple(ShapeSpec(**s) for s in d["distractor_specs"]),
            background_id=d["background_id"],
            dynamic_distractors=d["dynamic_distractors"],
            occluder_spec=ShapeSpec(**d["occluder_spec"]) if d["occluder_spec"] else None,
            rng_seed=d["rng_seed"],
        )


# Procedural backdrops, evaluated on world coordinates so every view sees the
# same pattern through its own warp. Each entry: (freq_x, freq_y, phase_x,
# phase_y, color_a, color_b). Ids 0..2 are the "training" looks; 3+ differ in
# hue and scale for the novel-scene suite.
BACKGROUNDS: tuple[tuple[float, float, float, float, tuple, tuple], ...] = (
    (0.22, 0.17, 0.3, 1.1, _q((0.17, 0.15, 0.20)), _q((0.27, 0.25, 0.31))),
    (0.15, 0.26, 1.7, 0.4, _q((0.24, 0.19, 0.14)), _q((0.33, 0.28, 0.22))),
    (0.27, 0.12, 0.9, 2.3, _q((0.13, 0.18, 0.26)), _q((0.21, 0.27, 0.35))),
    (0.45, 0.38, 0.2, 0.7, _q((0.42, 0.38, 0.13)), _q((0.16, 0.33, 0.28))),
    (0.09, 0.52, 2.9, 1.9, _q((0.38, 0.16, 0.17)), _q((0.12, 0.30, 0.38))),
    (0.60, 0.08, 0.5, 2.6, _q((0.10, 0.36, 0.33)), _q((0.35, 0.27, 0.40))),
)


def background_rgb(world_xy: np.ndarray, background_id: int) -> np.ndarray:
    """Two-tone procedural pattern sampled at world points (..., 2)."""
    fx, fy, px, py, ca, cb = BACKGROUNDS[background_id]
    x = world_xy[..., 0]
    y = world_xy[..., 1]
    v = np.sin(fx * x + px) * np.sin(fy * y + py)
    out = np.where(
        (v > 0.0)[..., None],
        np.asarray(ca, dtype=np.float32),
        np.asarray(cb, dtype=np.float32),
    )
    return out.astype(np.float32)


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    """Registry entry binding a language description to scene elements."""

    task_id: str
    description: str
    target_spec: ShapeSpec
    distractor_specs: tuple[ShapeSpec, ...]


TASKS: dict[str, TaskSpec] = {
    t.task_id: t
    for t in (
        TaskSpec(
            "pick_red",
            "pick up the red disc",
            ShapeSpec("disc", "red", 6.5),
            (ShapeSpec("square", "blue", 5.5), ShapeSpec("disc", "green", 5.0)),
        ),
        TaskSpec(
            "pick_green",
            "pick up the green disc",
            ShapeSpec("disc", "green", 6.5),
            (ShapeSpec("square", "blue", 5.5), ShapeSpec("triangle", "magenta", 6.0)),
        ),
        TaskSpec(
            "pick_amber",
            "pick up the amber disc",
            ShapeSpec("disc", "amber", 6.5),
            (ShapeSpec("square", "blue", 5.5), ShapeSpec("disc", "green", 5.0)),
        ),
        TaskSpec(
            "pick_cyan",
            "pick up the cyan square",
            ShapeSpec("square", "cyan", 5.5),
            (ShapeSpec("disc", "yellow", 5.0), ShapeSpec("triangle", "magenta", 6.0)),
        ),
    )
}


def make_scene_config(
    task_id: str,
    rng_seed: int,
    *,
    background_id: int = 0,
    dynamic_distractors: bool = False,
    occluded: bool = False,
) -> SceneConfig:
    """Build a SceneConfig for a registered task."""
    if task_id not in TASKS:
        raise ConfigurationError(
            f"unknown task {task_id!r}; known tasks: {sorted(TASKS)}"
        )
    spec = TASKS[task_id]
    occ = ShapeSpec("bar", OCCLUDER_COLOR_NAME, 7.0) if occluded else None
    return SceneConfig(
        task_id=task_id,
        target_spec=spec.target_spec,
        distractor_specs=spec.distractor_specs,
        background_id=background_id,
        dynamic_distractors=dynamic_distractors,
        occluder_spec=occ,
        rng_seed=rng_seed,
    )


# Placement margins, world units. Elements stay inside all camera frusta.
_PLACE_LO, _PLACE_HI = 14.0, 50.0
_MIN_TARGET_HOME_DIST = 16.0
_MIN_ELEMENT_GAP = 11.5
_MAX_PLACEMENT_TRIES = 200

# Dynamic distractors bounce inside this box.
DYN_LO, DYN_HI = 6.0, 58.0
_DYN_SPEED = 1.8


@dataclasses.dataclass(frozen=True)
class SceneLayout:
    """Sampled element placement for one episode."""

    target_xy: tuple[float, float]
    distractor_xy: tuple[tuple[float, float], ...]
    distractor_vel: tuple[tuple[float, float], ...]
    occluder_xy: Optional[tuple[float, float]]
    home_jitter: tuple[float, ...]  # added to the nominal home joint vector


def sample_layout(config: SceneConfig, home_xy: tuple[float, float]) -> SceneLayout:
    """Sample a valid layout with the config's seed.

    Raises ConfigurationError when the placement constraints cannot be
    satisfied (e.g. oversized elements leave no open slot, or every draw
    overlaps the robot spawn).
    """
    rng = np.random.default_rng(config.rng_seed)
    home = np.asarray(home_xy)

    target = None
    for _ in range(_MAX_PLACEMENT_TRIES):
        cand = rng.uniform(_PLACE_LO, _PLACE_HI, 2)
        if (
            np.linalg.norm(cand - home) >= _MIN_TARGET_HOME_DIST
            and _PLACE_LO <= cand[0] <= _PLACE_HI - config.target_spec.size
        ):
            target = cand
            break
    if target is None:
        raise ConfigurationError(
            "could not place target away from the robot spawn; "
            "element sizes or margins leave no valid slot"
        )

    placed = [target]
    distractors: list[np.ndarray] = []
    for _ in config.distractor_specs:
        spot = None
        for _ in range(_MAX_PLACEMENT_TRIES):
            cand = rng.uniform(_PLACE_LO, _PLACE_HI, 2)
            if all(np.linalg.norm(cand - p) >= _MIN_ELEMENT_GAP for p in placed) and (
                np.linalg.norm(cand - home) >= 8.0
            ):
                spot = cand
                break
        if spot is None:
            raise ConfigurationError("could not place distractor without overlap")
        placed.append(spot)
        distractors.append(spot)

    if config.dynamic_distractors:
        vels = []
        for _ in distractors:
            ang = rng.uniform(0.0, 2.0 * np.pi)
            vels.append((_DYN_SPEED * np.cos(ang), _DYN_SPEED * np.sin(ang)))
        vel = tuple((float(a), float(b)) for a, b in vels)
    else:
        vel = tuple((0.0, 0.0) for _ in distractors)

    occ = None
    if config.occluder_spec is not None:
        # A bar parked over the target's upper half.
        occ = (float(target[0]), float(target[1]) - 4.5)

    jitter = tuple(float(v) for v in rng.uniform(-0.08, 0.08, 7))
    return SceneLayout(
        target_xy=(float(target[0]), float(target[1])),
        distractor_xy=tuple((float(p[0]), float(p[1])) for p in distractors),
        distractor_vel=vel,
        occluder_xy=occ,
        home_jitter=jitter,
    )
