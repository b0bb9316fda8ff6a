"""Behavior cloning on recorded demonstrations.

The loss scores a predicted action chunk against the expert's next T
actions with exponentially decayed per-step weights plus a penalty on the
predicted velocity (forward differences), matching how the chunks are
consumed at rollout: early rows are executed first, late rows mostly get
revised by newer chunks.

Training is plain mini-batch gradient descent with a cosine step-size
schedule by default — momentum-free updates keep runs bit-reproducible
under a fixed seed and single-threaded math.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .perception import MASKING_MODES
from .policy import STATE_DIM, ActionChunk, ArchConfig, VisuomotorPolicy
from .simenv import TASKS

log = logging.getLogger(__name__)


class DatasetError(RuntimeError):
    """Raised when ingestion produces no usable samples."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last finite-epoch checkpoint was saved."""

    def __init__(self, message: str, checkpoint: Path):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters and ablation switches."""

    task_id: str
    chunk_T: int = 20
    decay: float = 0.95
    vel_weight: float = 0.2
    lr: float = 0.01
    batch_size: int = 16
    epochs: int = 30
    freeze_convs: bool = False
    seed: int = 0
    masking: str = "background"
    use_channel_attention: bool = True
    use_spatial_attention: bool = True
    dabn: bool = True
    literal_dabn: bool = False
    squared_l2: bool = False
    optimizer: str = "gd"

    def __post_init__(self) -> None:
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.vel_weight < 0.0:
            raise ValueError(f"vel_weight must be >= 0, got {self.vel_weight}")
        if self.chunk_T < 1:
            raise ValueError(f"chunk_T must be >= 1, got {self.chunk_T}")
        if self.masking not in MASKING_MODES:
            raise ValueError(f"masking must be one of {MASKING_MODES}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"optimizer must be 'gd' or 'adam', got {self.optimizer!r}")

    def arch(self) -> ArchConfig:
        return ArchConfig(
            chunk=self.chunk_T,
            use_channel_attention=self.use_channel_attention,
            use_spatial_attention=self.use_spatial_attention,
            dabn=self.dabn,
            routing=self.dabn,
            literal_variance_eps=self.literal_dabn,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# Chunk loss
# ---------------------------------------------------------------------------


def _row_norm(x: torch.Tensor, squared: bool) -> torch.Tensor:
    """Euclidean norm over the last axis with a zero-safe gradient.

    sqrt has no gradient at 0, so zero rows are routed around the sqrt and
    contribute exactly 0 with zero gradient.
    """
    sq = x.square().sum(-1)
    if squared:
        return sq
    pos = sq > 0
    return torch.where(pos, sq, torch.ones_like(sq)).sqrt() * pos


def chunk_loss(
    pred,
    gt,
    *,
    decay: float = 0.95,
    vel_weight: float = 0.2,
    mask: torch.Tensor | None = None,
    squared: bool = False,
    chunk_T: int | None = None,
) -> torch.Tensor:
    """Decay-weighted action-matching plus predicted-velocity penalty.

    Step k of T (1-based) carries weight decay^(T-k), so the final row has
    weight exactly 1 and consecutive weights differ by the decay factor.
    The velocity term penalizes forward differences of the prediction; the
    first row has no predecessor and contributes zero velocity. Rows where
    mask == 0 (tail padding) are excluded from both terms. Batched inputs
    (B, T, D) return the mean per-sample loss.
    """
    if isinstance(pred, ActionChunk):
        pred = torch.as_tensor(pred.tau)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if pred.dim() not in (2, 3):
        raise ValueError(f"expected (T, D) or (B, T, D), got {tuple(pred.shape)}")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must be in (0, 1], got {decay}")
    if vel_weight < 0.0:
        raise ValueError(f"vel_weight must be >= 0, got {vel_weight}")
    t = pred.shape[-2]
    if chunk_T is not None and t != chunk_T:
        raise ValueError(f"expected {chunk_T} rows, got {t}")

    weights = torch.as_tensor(
        [decay ** (t - 1 - j) for j in range(t)], dtype=pred.dtype
    )
    res = _row_norm(pred - gt, squared)
    vel = pred[..., 1:, :] - pred[..., :-1, :]
    veln = torch.cat(
        [torch.zeros_like(res[..., :1]), _row_norm(vel, squared)], dim=-1
    )
    per_step = weights * (res + vel_weight * veln)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=pred.dtype)
        if mask.shape != pred.shape[:-1]:
            raise ValueError(
                f"mask shape {tuple(mask.shape)} does not match rows {tuple(pred.shape[:-1])}"
            )
        per_step = per_step * mask
    total = per_step.sum(-1)
    return total.mean() if total.dim() else total


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ChunkDataset:
    """Stacked training samples from preprocessed demonstrations."""

    frames: np.ndarray        # (N, V, H, W, 3) uint8, masked pixels
    states: np.ndarray        # (N, 13) float32
    chunks: np.ndarray        # (N, T, 13) float32 expert actions
    masks: np.ndarray         # (N, T) float32 per-row loss weights
    task_id: str
    episodes: int
    skipped_gate: int
    skipped_corrupt: int

    def __len__(self) -> int:
        return self.frames.shape[0]

    def batch(self, idx: np.ndarray) -> tuple[torch.Tensor, ...]:
        """Index a batch and convert to network inputs."""
        f = torch.from_numpy(
            self.frames[idx].astype(np.float32) / 255.0
        ).permute(0, 1, 4, 2, 3).contiguous()
        return (
            f,
            torch.from_numpy(self.states[idx]),
            torch.from_numpy(self.chunks[idx]),
            torch.from_numpy(self.masks[idx]),
        )


def _load_processed_frame(ep_dir: Path, views: list[str], t: int) -> np.ndarray:
    imgs = []
    for view in views:
        p = ep_dir / "masked_frames" / view / f"{t}.png"
        arr = np.asarray(Image.open(p))
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"{p} is not an RGB image")
        imgs.append(arr)
    return np.stack(imgs)


def _read_csv_floats(path: Path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float32)


def build_dataset(episode_dirs, config: TrainConfig) -> ChunkDataset:
    """One sample per retained frame that has a follow-up action.

    The sample at frame i pairs the masked views and state at i with the
    next T expert actions; episodes shorter than i+T repeat the final
    action as supervised targets, teaching the policy to hold its last
    command once a demonstration's motion is exhausted. (Leaving those
    rows unsupervised lets untrained predictions bleed into the blended
    action near the end of a rollout.) Frames that failed the cross-view
    consistency gate, and frames whose files are unreadable, are skipped
    with logged counts.
    """
    t_len = config.chunk_T
    frames, states, chunks, masks = [], [], [], []
    n_gate = n_corrupt = n_eps = 0
    task_id: str | None = None

    for ep_dir in episode_dirs:
        ep_dir = Path(ep_dir)
        meta = json.loads((ep_dir / "meta.json").read_text())
        ep_task = meta["scene"]["task_id"]
        if task_id is None:
            task_id = ep_task
        elif ep_task != task_id:
            raise DatasetError(
                f"mixed tasks in dataset: {task_id!r} and {ep_task!r} ({ep_dir})"
            )
        pre_path = ep_dir / "preprocess.json"
        if not pre_path.is_file():
            raise DatasetError(f"{ep_dir} has no preprocess.json; run preprocess first")
        pre = json.loads(pre_path.read_text())
        if pre["mode"] != config.masking:
            raise DatasetError(
                f"{ep_dir} was preprocessed with mode {pre['mode']!r}, "
                f"config wants {config.masking!r}"
            )
        st = _read_csv_floats(ep_dir / "states.csv")
        ac = _read_csv_floats(ep_dir / "actions.csv")
        n = st.shape[0]
        if ac.shape[0] != n - 1 or st.shape[1] != STATE_DIM:
            raise DatasetError(f"{ep_dir}: inconsistent state/action tables")
        passed = pre["passed"]
        n_eps += 1

        for i in range(n - 1):
            if not passed[i]:
                n_gate += 1
                continue
            try:
                img = _load_processed_frame(ep_dir, meta["views"], i)
            except Exception as exc:  # unreadable or malformed file
                log.warning("skipping %s frame %d: %s", ep_dir, i, exc)
                n_corrupt += 1
                continue
            rows = np.empty((t_len, STATE_DIM), dtype=np.float32)
            for j in range(t_len):
                rows[j] = ac[min(i + j, n - 2)]
            frames.append(img)
            states.append(st[i])
            chunks.append(rows)
            masks.append(np.ones(t_len, dtype=np.float32))

    if not frames:
        raise DatasetError(
            f"no usable samples ({n_gate} gate-skipped, {n_corrupt} unreadable)"
        )
    if n_gate or n_corrupt:
        log.info("dataset: %d samples, %d gate-skipped, %d unreadable",
                 len(frames), n_gate, n_corrupt)
    return ChunkDataset(
        frames=np.stack(frames),
        states=np.stack(states),
        chunks=np.stack(chunks),
        masks=np.stack(masks),
        task_id=task_id,
        episodes=n_eps,
        skipped_gate=n_gate,
        skipped_corrupt=n_corrupt,
    )


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _train_loop(
    policy: VisuomotorPolicy,
    params: list[torch.Tensor],
    dataset: ChunkDataset,
    config: TrainConfig,
    out_dir: Path,
) -> Path:
    """Seeded mini-batch loop shared by fit and adapt_to_task."""
    if dataset.task_id != config.task_id:
        raise ValueError(
            f"dataset covers task {dataset.task_id!r}, config wants {config.task_id!r}"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.lr)
    else:
        opt = torch.optim.SGD(params, lr=config.lr, momentum=0.0)

    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    rows: list[tuple[int, float, float]] = []
    good = copy.deepcopy(policy.state_dict())
    t_start = time.time()
    step = 0

    def finish(final: bool) -> Path:
        policy.load_state_dict(good)
        # With zero completed updates the task's bank must stay at its
        # registration values, so nothing is routed into it.
        written = [config.task_id] if step > 0 else None
        save_checkpoint(policy, out_dir, materialize_tasks=written)
        (out_dir / "train_config.json").write_text(
            json.dumps(config.to_json(), indent=2, sort_keys=True)
        )
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "mean_loss", "wall_seconds"])
            for ep, ml, ws in rows:
                w.writerow([ep, repr(ml), repr(ws)])
        return out_dir

    policy.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            f, s, gt, m = dataset.batch(idx)
            lr_t = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for group in opt.param_groups:
                group["lr"] = lr_t
            opt.zero_grad()
            try:
                pred = policy(f, s, config.task_id, update_stats=True)
                loss = chunk_loss(
                    pred, gt, decay=config.decay, vel_weight=config.vel_weight,
                    mask=m, squared=config.squared_l2,
                )
                finite = bool(torch.isfinite(loss))
            except FloatingPointError:
                # parameters already blew up on a previous update
                finite = False
            if not finite:
                finish(final=False)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}; "
                    f"last finite-epoch checkpoint saved to {out_dir}",
                    out_dir,
                )
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        rows.append((epoch, float(np.mean(losses)), time.time() - t_start))
        state = policy.state_dict()
        if all(torch.isfinite(v).all() for v in state.values()):
            good = copy.deepcopy(state)
    return finish(final=True)


def fit(dataset: ChunkDataset, config: TrainConfig, out_dir: str | Path) -> Path:
    """Train a fresh policy on one task and write its checkpoint.

    Seed-deterministic: the seed fixes initialization and batch order, and
    the default momentum-free updates make reruns bit-identical in
    single-threaded mode.
    """
    torch.manual_seed(config.seed)
    policy = VisuomotorPolicy(config.arch())
    policy.register_task(config.task_id)
    if config.freeze_convs:
        for p in policy.backbone.conv_parameters():
            p.requires_grad_(False)
    params = [p for p in policy.parameters() if p.requires_grad]
    return _train_loop(policy, params, dataset, config, Path(out_dir))


def adapt_to_task(
    base_checkpoint: str | Path,
    dataset: ChunkDataset,
    config: TrainConfig,
    out_dir: str | Path,
) -> Path:
    """Specialize a trained policy to a new task.

    Only the new task's norm bank, its embedding, and the router move;
    convolution, attention, fusion, and decoder weights are bit-identical
    to the base checkpoint, as are every other task's banks.
    """
    if config.task_id not in TASKS:
        raise ValueError(
            f"unknown task {config.task_id!r}; known: {sorted(TASKS)}"
        )
    torch.manual_seed(config.seed)
    policy = load_checkpoint(base_checkpoint)
    if config.task_id not in policy.tasks():
        policy.register_task(config.task_id)
    policy.freeze_for_adaptation(config.task_id)
    params = [p for p in policy.parameters() if p.requires_grad]
    return _train_loop(policy, params, dataset, config, Path(out_dir))
