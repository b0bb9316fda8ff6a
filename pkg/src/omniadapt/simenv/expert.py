"""Scripted proportional expert: reach, close, lift.

The expert inverts the linear gripper kinematics with the pseudoinverse and
chases the target with a speed-clipped proportional law, closes the hand
once hovering over the target, and raises the gripper after the grasp
latches. It is a pure function of (state, scene layout), so replays are
deterministic.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .env import (
    ACTION_CLIP,
    ARM_DOF,
    FK_PINV,
    GRASP_MAX_Z,
    HAND_DOF,
    LIFT_Z,
    Action,
    RobotState,
    forward_kinematics,
)
from .scene import SceneLayout

# Reachable workspace the expert will agree to chase targets in.
REACH_LO, REACH_HI = 6.0, 58.0

_KP = 0.55
_V_MAX = 3.2  # per-tick gripper speed cap, world units
_CLOSE_DIST = 1.2
_GRASP_Z = 1.0
_THETA_OPEN = 0.9
_THETA_CLOSED = 0.10
_LIFT_TARGET = LIFT_Z + 1.5


class ScriptedExpert:
    """Deterministic demonstration policy for the pick-and-lift task."""

    def __init__(self, layout: SceneLayout) -> None:
        self._layout = layout
        self.failed = False
        self.failure_reason: Optional[str] = None

    def __call__(self, state: RobotState) -> Action:
        target = np.asarray(self._layout.target_xy, dtype=np.float64)
        if not (
            REACH_LO <= target[0] <= REACH_HI and REACH_LO <= target[1] <= REACH_HI
        ):
            self.failed = True
            self.failure_reason = (
                f"target at {tuple(target)} is outside the reachable workspace"
            )
            return Action(np.zeros(ARM_DOF), np.zeros(HAND_DOF))

        pos = forward_kinematics(state.q_arm)
        if state.holding:
            goal = np.array([pos[0], pos[1], _LIFT_TARGET])
            dtheta = np.zeros(HAND_DOF)
        else:
            dist_xy = float(np.linalg.norm(target - pos[:2]))
            goal = np.array([target[0], target[1], _GRASP_Z])
            if dist_xy <= _CLOSE_DIST and pos[2] <= GRASP_MAX_Z:
                dtheta = _KP * (_THETA_CLOSED - state.theta_hand)
            else:
                dtheta = 0.4 * (_THETA_OPEN - state.theta_hand)

        dp = _KP * (goal - pos)
        speed = float(np.linalg.norm(dp))
        if speed > _V_MAX:
            dp *= _V_MAX / speed
        dq = FK_PINV @ dp

        dq = np.clip(dq, -ACTION_CLIP, ACTION_CLIP)
        dtheta = np.clip(dtheta, -ACTION_CLIP, ACTION_CLIP)
        return Action(dq, dtheta)
