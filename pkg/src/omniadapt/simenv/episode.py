"""Episode container and its on-disk layout.

episodes/<task_id>/<ep_idx>/
    meta.json                scene config, view warps, subgoal log, tick ids
    frames/<view>/<t>.png    retained RGB frames, 8-bit
    masks/<view>/<t>.png     label masks: 0 bg, 128 effector, 255 target
    states.csv               timestep + 13 joint floats per retained frame
    actions.csv              timestep + 13 delta floats, one row per frame
                             except the last

Rendered colors are exact 8-bit levels, so the PNG round-trip reproduces
the in-memory frames bit-for-bit.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .env import ARM_DOF, HAND_DOF, Action, Observation, RobotState
from .scene import SceneConfig
from .views import VIEW_NAMES

MASK_BG, MASK_EFFECTOR, MASK_TARGET = 0, 128, 255


@dataclasses.dataclass
class Episode:
    """One recorded demonstration after motion-energy thinning."""

    scene: SceneConfig
    frames: list[Observation]
    actions: list[Action]
    masks: list[dict[str, dict[str, np.ndarray]]]
    view_warps: list[list[np.ndarray]]
    subgoal_log: list[dict[str, bool]]
    timesteps: list[int]

    def __post_init__(self) -> None:
        if len(self.actions) != len(self.frames) - 1:
            raise ValueError(
                f"need len(actions) == len(frames) - 1, got "
                f"{len(self.actions)} vs {len(self.frames)}"
            )
        if len(self.masks) != len(self.frames):
            raise ValueError("need one mask set per frame")
        if len(self.subgoal_log) != len(self.frames):
            raise ValueError("need one subgoal row per frame")
        if len(self.timesteps) != len(self.frames):
            raise ValueError("need one source tick per frame")

    def __len__(self) -> int:
        return len(self.frames)


def _float_row(vals: np.ndarray) -> list[str]:
    return [repr(float(v)) for v in vals]


def save_episode(episode: Episode, ep_dir: str | Path) -> Path:
    """Write the episode under ep_dir (created if needed)."""
    ep_dir = Path(ep_dir)
    ep_dir.mkdir(parents=True, exist_ok=True)

    meta = {
        "scene": episode.scene.to_json(),
        "views": list(VIEW_NAMES),
        "warps": [[w.tolist() for w in row] for row in episode.view_warps],
        "subgoal_log": episode.subgoal_log,
        "timesteps": episode.timesteps,
        "num_frames": len(episode.frames),
    }
    (ep_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    for view in VIEW_NAMES:
        fdir = ep_dir / "frames" / view
        mdir = ep_dir / "masks" / view
        fdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        for t, (obs, masks) in enumerate(zip(episode.frames, episode.masks)):
            img = np.round(obs.images[view] * 255.0).astype(np.uint8)
            Image.fromarray(img).save(fdir / f"{t}.png")
            m = masks[view]
            lab = np.zeros(img.shape[:2], dtype=np.uint8)
            lab[m["effector"]] = MASK_EFFECTOR
            lab[m["target"]] = MASK_TARGET
            Image.fromarray(lab).save(mdir / f"{t}.png")

    with open(ep_dir / "states.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["timestep"]
            + [f"q{i}" for i in range(ARM_DOF)]
            + [f"theta{i}" for i in range(HAND_DOF)]
        )
        for tick, obs in zip(episode.timesteps, episode.frames):
            w.writerow([tick] + _float_row(obs.state.vector()))

    with open(ep_dir / "actions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["timestep"]
            + [f"dq{i}" for i in range(ARM_DOF)]
            + [f"dtheta{i}" for i in range(HAND_DOF)]
        )
        for tick, act in zip(episode.timesteps[:-1], episode.actions):
            w.writerow([tick] + _float_row(act.vector()))

    return ep_dir


def load_episode(ep_dir: str | Path) -> Episode:
    """Reconstruct an Episode from disk."""
    ep_dir = Path(ep_dir)
    meta = json.loads((ep_dir / "meta.json").read_text())
    scene = SceneConfig.from_json(meta["scene"])
    warps = [
        [np.asarray(w, dtype=np.float64) for w in row] for row in meta["warps"]
    ]
    timesteps = [int(t) for t in meta["timesteps"]]
    n = int(meta["num_frames"])

    states: list[np.ndarray] = []
    with open(ep_dir / "states.csv", newline="") as f:
        rows = list(csv.reader(f))
    for row in rows[1:]:
        states.append(np.array([float(v) for v in row[1:]], dtype=np.float64))
    if len(states) != n:
        raise ValueError(f"states.csv has {len(states)} rows, expected {n}")

    actions: list[Action] = []
    with open(ep_dir / "actions.csv", newline="") as f:
        rows = list(csv.reader(f))
    for row in rows[1:]:
        actions.append(Action.from_vector(np.array([float(v) for v in row[1:]])))

    frames: list[Observation] = []
    masks: list[dict[str, dict[str, np.ndarray]]] = []
    for t in range(n):
        images: dict[str, np.ndarray] = {}
        mask_t: dict[str, dict[str, np.ndarray]] = {}
        for view in meta["views"]:
            arr = np.asarray(Image.open(ep_dir / "frames" / view / f"{t}.png"))
            images[view] = (arr.astype(np.float32) / 255.0).astype(np.float32)
            lab = np.asarray(Image.open(ep_dir / "masks" / view / f"{t}.png"))
            mask_t[view] = {
                "target": lab == MASK_TARGET,
                "effector": lab == MASK_EFFECTOR,
            }
        sv = states[t]
        state = RobotState(sv[:ARM_DOF], sv[ARM_DOF:], holding=False)
        frames.append(
            Observation(images=images, state=state, timestep=timesteps[t],
                        gt_masks=mask_t)
        )
        masks.append(mask_t)

    return Episode(
        scene=scene,
        frames=frames,
        actions=actions,
        masks=masks,
        view_warps=warps,
        subgoal_log=[dict(r) for r in meta["subgoal_log"]],
        timesteps=timesteps,
    )


def episode_dirs(root: str | Path) -> list[Path]:
    """All episode directories under a collection root, sorted."""
    root = Path(root)
    out = sorted(p.parent for p in root.glob("*/*/meta.json"))
    if not out and (root / "meta.json").exists():
        out = [root]
    return out
