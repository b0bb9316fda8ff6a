"""Planar multi-camera pick-and-lift simulator with a scripted expert."""

from .env import (
    ACTION_CLIP,
    ARM_DOF,
    HAND_DOF,
    MAX_TICKS,
    MOTION_ENERGY_TRIGGER,
    STATE_DIM,
    Action,
    ManipulationEnv,
    Observation,
    RobotState,
    StateError,
    forward_kinematics,
    motion_energy,
)
from .episode import Episode, episode_dirs, load_episode, save_episode
from .expert import ScriptedExpert
from .record import ExpertFailure, record_demonstration, thin_by_motion
from .scene import (
    BACKGROUNDS,
    IMAGE_SIZE,
    PALETTE,
    TASKS,
    ConfigurationError,
    SceneConfig,
    SceneLayout,
    ShapeSpec,
    TaskSpec,
    make_scene_config,
)
from .views import NUM_VIEWS, VIEW_NAMES, all_view_warps, view_warp, world_grid

__all__ = [
    "ACTION_CLIP",
    "ARM_DOF",
    "Action",
    "BACKGROUNDS",
    "ConfigurationError",
    "Episode",
    "ExpertFailure",
    "HAND_DOF",
    "IMAGE_SIZE",
    "MAX_TICKS",
    "MOTION_ENERGY_TRIGGER",
    "ManipulationEnv",
    "NUM_VIEWS",
    "Observation",
    "PALETTE",
    "RobotState",
    "STATE_DIM",
    "SceneConfig",
    "SceneLayout",
    "ScriptedExpert",
    "ShapeSpec",
    "StateError",
    "TASKS",
    "TaskSpec",
    "VIEW_NAMES",
    "all_view_warps",
    "episode_dirs",
    "forward_kinematics",
    "load_episode",
    "make_scene_config",
    "motion_energy",
    "record_demonstration",
    "save_episode",
    "thin_by_motion",
    "view_warp",
    "world_grid",
]
