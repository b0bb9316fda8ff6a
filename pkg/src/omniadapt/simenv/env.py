"""Planar pick-and-lift environment with a 7-dof arm and 6-dof hand.

The arm state is an abstract joint vector q in R^7; a fixed linear map
takes it to the gripper's world position (x, y, z). The hand state is six
finger values in [0, 1] whose mean is the aperture. Per-tick action deltas
are clipped to +/-0.2 componentwise. Grasping latches when the gripper is
close to the target in the plane, low enough, and sufficiently closed; the
target then rides along until the lift height is reached.

Example:
    env = ManipulationEnv()
    obs = env.reset(make_scene_config("pick_red", rng_seed=3))
    obs = env.step(Action(np.zeros(7), np.zeros(6)))
"""
from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from . import render, views
from .scene import ConfigurationError, SceneConfig, SceneLayout, sample_layout

ARM_DOF = 7
HAND_DOF = 6
STATE_DIM = ARM_DOF + HAND_DOF

ACTION_CLIP = 0.2
JOINT_LIMIT = 3.0

# Gripper position is an affine function of the arm joints: p = A q + b.
# The scale puts typical transit steps just above the motion-energy
# threshold used when thinning demonstrations.
FK_A = 8.0 * np.array(
    [
        [1.00, 0.00, 0.30, 0.60, 0.00, 0.20, 0.15],
        [0.00, 1.00, 0.30, 0.00, 0.60, -0.20, 0.15],
        [0.20, -0.20, 1.00, 0.30, 0.30, 0.60, 0.00],
    ],
    dtype=np.float64,
)
FK_B = np.array([32.0, 32.0, 0.0], dtype=np.float64)
FK_PINV = np.linalg.pinv(FK_A)

HOME_POSITION = np.array([32.0, 13.0, 12.0], dtype=np.float64)
HOME_Q = FK_PINV @ (HOME_POSITION - FK_B)
HOME_THETA = 0.9  # fingers start mostly open

GRASP_RADIUS = 3.0
TARGET_RADIUS = 4.0  # "targeted" subgoal distance
GRASP_MAX_Z = 1.5
LIFT_Z = 10.0
GRASP_APERTURE = 0.3
MAX_TICKS = 200

MOTION_ENERGY_TRIGGER = 0.1


class StateError(RuntimeError):
    """Raised when the environment is driven out of protocol order."""


def forward_kinematics(q_arm: np.ndarray) -> np.ndarray:
    """World position (x, y, z) of the gripper for arm joints q."""
    return FK_A @ np.asarray(q_arm, dtype=np.float64) + FK_B


@dataclasses.dataclass
class RobotState:
    """Proprioceptive state: arm joints, finger values, grasp latch."""

    q_arm: np.ndarray
    theta_hand: np.ndarray
    holding: bool = False

    def __post_init__(self) -> None:
        self.q_arm = np.asarray(self.q_arm, dtype=np.float64).copy()
        self.theta_hand = np.asarray(self.theta_hand, dtype=np.float64).copy()
        if self.q_arm.shape != (ARM_DOF,):
            raise ValueError(f"q_arm must have shape ({ARM_DOF},)")
        if self.theta_hand.shape != (HAND_DOF,):
            raise ValueError(f"theta_hand must have shape ({HAND_DOF},)")

    @property
    def aperture(self) -> float:
        return float(self.theta_hand.mean())

    @property
    def position(self) -> np.ndarray:
        return forward_kinematics(self.q_arm)

    def vector(self) -> np.ndarray:
        """Flat 13-float proprioception vector [q_arm, theta_hand]."""
        return np.concatenate([self.q_arm, self.theta_hand])

    def copy(self) -> "RobotState":
        return RobotState(self.q_arm.copy(), self.theta_hand.copy(), self.holding)


@dataclasses.dataclass(frozen=True)
class Action:
    """Per-tick deltas for arm joints and finger values."""

    delta_q_arm: np.ndarray
    delta_theta_hand: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "delta_q_arm", np.asarray(self.delta_q_arm, dtype=np.float64)
        )
        object.__setattr__(
            self, "delta_theta_hand", np.asarray(self.delta_theta_hand, dtype=np.float64)
        )
        if self.delta_q_arm.shape != (ARM_DOF,):
            raise ValueError(f"delta_q_arm must have shape ({ARM_DOF},)")
        if self.delta_theta_hand.shape != (HAND_DOF,):
            raise ValueError(f"delta_theta_hand must have shape ({HAND_DOF},)")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.delta_q_arm, self.delta_theta_hand])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Action":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (STATE_DIM,):
            raise ValueError(f"action vector must have shape ({STATE_DIM},)")
        return Action(v[:ARM_DOF], v[ARM_DOF:])

    def clipped(self) -> tuple["Action", bool]:
        """Clip to the per-component limit; report whether anything moved."""
        q = np.clip(self.delta_q_arm, -ACTION_CLIP, ACTION_CLIP)
        t = np.clip(self.delta_theta_hand, -ACTION_CLIP, ACTION_CLIP)
        changed = bool(
            np.any(q != self.delta_q_arm) or np.any(t != self.delta_theta_hand)
        )
        return Action(q, t), changed


@dataclasses.dataclass
class Observation:
    """One tick's camera images, ground-truth masks, and state echo."""

    images: dict[str, np.ndarray]
    state: RobotState
    timestep: int
    gt_masks: dict[str, dict[str, np.ndarray]]


def motion_energy(prev: RobotState, cur: RobotState) -> float:
    """Squared joint-space displacement between two states."""
    dq = cur.q_arm - prev.q_arm
    dt = cur.theta_hand - prev.theta_hand
    return float(dq @ dq + dt @ dt)


class ManipulationEnv:
    """Deterministic planar pick-and-lift task with three cameras."""

    def __init__(self) -> None:
        self._config: Optional[SceneConfig] = None
        self._layout: Optional[SceneLayout] = None
        self._state: Optional[RobotState] = None
        self._target_xy: Optional[np.ndarray] = None
        self._distractor_xy: list[np.ndarray] = []
        self._distractor_vel: list[np.ndarray] = []
        self._tick = 0
        self._subgoals = {"targeted": False, "grasped": False, "lifted": False}
        self.last_step_info: dict = {}

    # ------------------------------------------------------------------
    # Protocol
    # ------------------------------------------------------------------

    @property
    def config(self) -> SceneConfig:
        if self._config is None:
            raise StateError("reset() has not been called")
        return self._config

    @property
    def layout(self) -> SceneLayout:
        if self._layout is None:
            raise StateError("reset() has not been called")
        return self._layout

    @property
    def state(self) -> RobotState:
        if self._state is None:
            raise StateError("reset() has not been called")
        return self._state.copy()

    @property
    def tick(self) -> int:
        return self._tick

    @property
    def subgoals(self) -> dict[str, bool]:
        return dict(self._subgoals)

    @property
    def target_xy(self) -> np.ndarray:
        if self._target_xy is None:
            raise StateError("reset() has not been called")
        return self._target_xy.copy()

    def reset(self, config: SceneConfig) -> Observation:
        """Instantiate the scene and return the first observation."""
        home_xy = (float(HOME_POSITION[0]), float(HOME_POSITION[1]))
        layout = sample_layout(config, home_xy)
        self._config = config
        self._layout = layout
        q0 = HOME_Q + np.asarray(layout.home_jitter)
        self._state = RobotState(
            q_arm=q0, theta_hand=np.full(HAND_DOF, HOME_THETA), holding=False
        )
        self._target_xy = np.asarray(layout.target_xy, dtype=np.float64)
        self._distractor_xy = [np.asarray(p, dtype=np.float64) for p in layout.distractor_xy]
        self._distractor_vel = [np.asarray(v, dtype=np.float64) for v in layout.distractor_vel]
        self._tick = 0
        self._subgoals = {"targeted": False, "grasped": False, "lifted": False}
        self.last_step_info = {}
        self._update_subgoals()
        return self._observe()

    def step(self, action: Action) -> Observation:
        """Advance one tick; deltas are clipped to the per-component limit."""
        if self._state is None:
            raise StateError("step() before reset()")
        if self._tick >= MAX_TICKS:
            raise StateError(f"episode exceeded the {MAX_TICKS}-tick cap")
        act, was_clipped = action.clipped()
        self.last_step_info = {"clipped": was_clipped}

        s = self._state
        s.q_arm = np.clip(s.q_arm + act.delta_q_arm, -JOINT_LIMIT, JOINT_LIMIT)
        s.theta_hand = np.clip(s.theta_hand + act.delta_theta_hand, 0.0, 1.0)

        if self._config.dynamic_distractors:
            from .scene import DYN_HI, DYN_LO

            for p, v in zip(self._distractor_xy, self._distractor_vel):
                p += v
                for k in range(2):
                    if p[k] < DYN_LO:
                        p[k] = 2.0 * DYN_LO - p[k]
                        v[k] = -v[k]
                    elif p[k] > DYN_HI:
                        p[k] = 2.0 * DYN_HI - p[k]
                        v[k] = -v[k]

        pos = s.position
        if not s.holding:
            close_enough = (
                np.linalg.norm(pos[:2] - self._target_xy) <= GRASP_RADIUS
                and pos[2] <= GRASP_MAX_Z
                and s.aperture < GRASP_APERTURE
            )
            if close_enough:
                s.holding = True
        if s.holding:
            self._target_xy = pos[:2].copy()

        self._tick += 1
        self._update_subgoals()
        return self._observe()

    # ------------------------------------------------------------------
    # Internals
    # ------------------------------------------------------------------

    def _update_subgoals(self) -> None:
        pos = self._state.position
        if np.linalg.norm(pos[:2] - self._target_xy) <= TARGET_RADIUS:
            self._subgoals["targeted"] = True
        if self._state.holding:
            self._subgoals["grasped"] = True
            if pos[2] >= LIFT_Z:
                self._subgoals["lifted"] = True

    def _observe(self) -> Observation:
        pos = self._state.position
        images, id_maps = render.render_views(
            self._config,
            self._layout,
            (float(self._target_xy[0]), float(self._target_xy[1])),
            tuple((float(p[0]), float(p[1])) for p in self._distractor_xy),
            (float(pos[0]), float(pos[1])),
            self._state.aperture,
        )
        return Observation(
            images=images,
            state=self._state.copy(),
            timestep=self._tick,
            gt_masks=render.gt_masks_from_ids(id_maps),
        )

    def view_warps(self) -> list[list[np.ndarray]]:
        """Pixel-to-pixel homographies between all view pairs."""
        return views.all_view_warps()
