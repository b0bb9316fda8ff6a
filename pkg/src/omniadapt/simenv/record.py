"""Demonstration recording with motion-energy thinning.

A frame is kept when the squared joint-space displacement since the LAST
KEPT frame exceeds the trigger, so consecutive retained states always
differ by more than the threshold and near-still stretches are dropped.
The stored action at each kept frame is the expert's per-tick command at
that state (never a composed multi-tick delta, which could violate the
per-component clip).
"""
from __future__ import annotations

from .env import (
    MAX_TICKS,
    MOTION_ENERGY_TRIGGER,
    ManipulationEnv,
    motion_energy,
)
from .episode import Episode
from .expert import ScriptedExpert
from .scene import SceneConfig


class ExpertFailure(RuntimeError):
    """The scripted expert could not complete the episode."""


def thin_by_motion(states, trigger: float = MOTION_ENERGY_TRIGGER) -> list[int]:
    """Indices kept by the motion rule, replayed over a full state sequence.

    Index 0 is always kept; index t is kept when its energy relative to the
    last kept state exceeds the trigger. The online recorder applies the
    same rule tick by tick, so this replay must reproduce its choices.
    """
    if not states:
        return []
    kept = [0]
    last = states[0]
    for t, s in enumerate(states[1:], start=1):
        if motion_energy(last, s) > trigger:
            kept.append(t)
            last = s
    return kept


def record_demonstration(
    config: SceneConfig,
    *,
    trigger: float = MOTION_ENERGY_TRIGGER,
    max_ticks: int = MAX_TICKS,
    env: ManipulationEnv | None = None,
) -> Episode:
    """Roll out the scripted expert and keep motion-selected frames."""
    env = env or ManipulationEnv()
    obs = env.reset(config)
    expert = ScriptedExpert(env.layout)

    kept_frames = [obs]
    kept_masks = [obs.gt_masks]
    kept_goals = [env.subgoals]
    kept_ticks = [0]
    kept_action_idx: list[int] = [0]
    tick_actions = []
    last_kept_state = obs.state

    for t in range(max_ticks):
        action = expert(obs.state)
        if expert.failed:
            raise ExpertFailure(expert.failure_reason or "expert failed")
        tick_actions.append(action)
        obs = env.step(action)
        if motion_energy(last_kept_state, obs.state) > trigger:
            kept_frames.append(obs)
            kept_masks.append(obs.gt_masks)
            kept_goals.append(env.subgoals)
            kept_ticks.append(obs.timestep)
            kept_action_idx.append(obs.timestep)
            last_kept_state = obs.state
            if env.subgoals["lifted"]:
                break

    if not env.subgoals["lifted"]:
        raise ExpertFailure(
            f"expert did not lift the target within {max_ticks} ticks "
            f"(seed {config.rng_seed})"
        )

    actions = [tick_actions[i] for i in kept_action_idx[:-1]]
    return Episode(
        scene=config,
        frames=kept_frames,
        actions=actions,
        masks=kept_masks,
        view_warps=env.view_warps(),
        subgoal_log=kept_goals,
        timesteps=kept_ticks,
    )
