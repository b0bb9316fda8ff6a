"""Multi-view visuomotor policy: fuse tokens, decode an action chunk.

Per-view feature maps become patch tokens (shared linear projection plus
learned view and 2D-position embeddings); the embedded proprioceptive state
is appended as one extra token. A small transformer decoder with learned
chunk queries cross-attends over the token sequence and emits T future
actions in one shot. At rollout, overlapping chunks are blended with
exponentially decayed weights by chunk age.
"""
from __future__ import annotations

import dataclasses
import json

import numpy as np
import torch
from torch import nn

from .attention import CBAM, stack_views
from .backbone import (
    BN_EPS,
    BN_MOMENTUM,
    EMBED_DIM,
    AffineRouter,
    ResidualBackbone,
    _check_task_id,
    set_freeze,
)

STATE_DIM = 13
STATIC_TASK = "_shared"  # bank used when per-task normalization is disabled


@dataclasses.dataclass(frozen=True)
class ArchConfig:
    """Everything needed to rebuild the network skeleton."""

    views: int = 3
    image_size: int = 64
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    d_model: int = 128
    heads: int = 4
    decoder_layers: int = 3
    feedforward: int = 256
    chunk: int = 20
    reduction: int = 8
    spatial_kernel: int = 7
    use_channel_attention: bool = True
    use_spatial_attention: bool = True
    dabn: bool = True
    routing: bool = True
    literal_variance_eps: bool = False
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    smoothing_decay: float = 0.1

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @staticmethod
    def from_json(d: dict) -> "ArchConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return ArchConfig(**d)


class ProprioEncoder(nn.Module):
    """13-d joint state to a d_model token."""

    def __init__(self, d_model: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(STATE_DIM, hidden), nn.ReLU(), nn.Linear(hidden, d_model)
        )

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        if state.shape[-1] != STATE_DIM:
            raise ValueError(f"expected {STATE_DIM}-d state, got {state.shape[-1]}")
        return self.net(state)


class TokenFuser(nn.Module):
    """Flatten stacked view features into one token sequence.

    Token order: view 0's positions row-major, then view 1, ..., with the
    proprioceptive token appended last. Sequence length is N*H*W + 1.
    """

    def __init__(self, feat_channels: int, d_model: int, views: int, positions: int):
        super().__init__()
        self.proj = nn.Linear(feat_channels, d_model)
        self.view_embed = nn.Parameter(torch.randn(views, d_model) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(positions, d_model) * 0.02)
        self.state_slot = nn.Parameter(torch.randn(d_model) * 0.02)

    def forward(self, stacked: torch.Tensor, state_tok: torch.Tensor) -> torch.Tensor:
        if stacked.dim() != 5:
            raise ValueError(f"expected (B, N, C, H, W), got {tuple(stacked.shape)}")
        b, n, c, h, w = stacked.shape
        if n != self.view_embed.shape[0]:
            raise ValueError(f"expected {self.view_embed.shape[0]} views, got {n}")
        if h * w != self.pos_embed.shape[0]:
            raise ValueError(f"expected {self.pos_embed.shape[0]} positions, got {h * w}")
        toks = stacked.flatten(3).permute(0, 1, 3, 2)  # (B, N, P, C)
        toks = self.proj(toks)
        toks = toks + self.view_embed[None, :, None, :] + self.pos_embed[None, None, :, :]
        toks = toks.reshape(b, n * h * w, -1)
        state_tok = state_tok + self.state_slot
        return torch.cat([toks, state_tok[:, None, :]], dim=1)


class ChunkDecoder(nn.Module):
    """T learned queries cross-attend over fused tokens; linear action head.

    The transformer runs sequence-first on contiguous tensors: attention's
    input projection picks a different CPU kernel for strided inputs when
    its weights are frozen, and seq-first keeps the bits identical whether
    the decoder is frozen (inference from a checkpoint) or trainable.
    """

    def __init__(self, d_model: int, heads: int, layers: int, feedforward: int,
                 chunk: int):
        super().__init__()
        self.chunk = chunk
        self.queries = nn.Parameter(torch.randn(chunk, d_model) * 0.02)
        layer = nn.TransformerDecoderLayer(
            d_model, heads, feedforward, dropout=0.0, norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, layers)
        self.head = nn.Linear(d_model, STATE_DIM)

    def forward(self, memory: torch.Tensor) -> torch.Tensor:
        if memory.dim() != 3:
            raise ValueError(f"expected (B, S, D) memory, got {tuple(memory.shape)}")
        b = memory.shape[0]
        q = self.queries[:, None, :].expand(-1, b, -1).contiguous()
        mem = memory.transpose(0, 1).contiguous()
        h = self.decoder(q, mem).transpose(0, 1)
        out = self.head(h)
        if not torch.isfinite(out).all():
            raise _diagnose_nonfinite(self, q, mem)
        return out


def _diagnose_nonfinite(dec: ChunkDecoder, q: torch.Tensor, memory: torch.Tensor):
    """Locate the first decoder layer that produced non-finite values."""
    if not torch.isfinite(memory).all():
        return FloatingPointError("non-finite values entered the decoder memory")
    h = q
    with torch.no_grad():
        for i, layer in enumerate(dec.decoder.layers):
            h = layer(h, memory)
            if not torch.isfinite(h).all():
                return FloatingPointError(f"non-finite activations after decoder layer {i}")
    return FloatingPointError("non-finite values in the action head")


class VisuomotorPolicy(nn.Module):
    """Backbone + attention + fusion + chunk decoder, multi-task aware."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        self.backbone = ResidualBackbone(
            in_channels=config.in_channels,
            widths=config.widths,
            eps=config.bn_eps,
            momentum=config.bn_momentum,
            literal_variance_eps=config.literal_variance_eps,
        )
        self.cbam = CBAM(
            self.backbone.out_channels,
            config.reduction,
            config.spatial_kernel,
            use_channel=config.use_channel_attention,
            use_spatial=config.use_spatial_attention,
        )
        # Stage widths after the first each halve the map once.
        positions = (config.image_size // 2 ** (len(config.widths) - 1)) ** 2
        self.fuser = TokenFuser(
            self.backbone.out_channels, config.d_model, config.views, positions
        )
        self.proprio = ProprioEncoder(config.d_model)
        self.decoder = ChunkDecoder(
            config.d_model, config.heads, config.decoder_layers,
            config.feedforward, config.chunk,
        )
        self.embeddings = nn.ParameterDict()
        if config.dabn and config.routing:
            self.router = AffineRouter(self.backbone.bn_channel_sizes)
        else:
            self.router = None
        if not config.dabn:
            # Single shared bank; starts at identity stats like any new task.
            self.backbone.register_task(STATIC_TASK)

    # ------------------------------------------------------------------
    # Task management
    # ------------------------------------------------------------------

    def register_task(self, task: str, init_from: str | None = None) -> None:
        """Create a task's norm bank and embedding (optionally warm started)."""
        _check_task_id(task)
        if task in self.embeddings:
            raise ValueError(f"task {task!r} already registered")
        if self.config.dabn:
            self.backbone.register_task(task, init_from)
        if init_from is not None:
            e = self.embeddings[init_from].detach().clone()
        else:
            e = torch.randn(EMBED_DIM) * 0.1
        self.embeddings[task] = nn.Parameter(e)

    def tasks(self) -> list[str]:
        return list(self.embeddings.keys())

    def _norm_task(self, task: str) -> str:
        if task not in self.embeddings:
            raise KeyError(f"task {task!r} is not registered; known: {self.tasks()}")
        return task if self.config.dabn else STATIC_TASK

    def _affine_fn(self, task: str, use_router: bool):
        if not (use_router and self.router is not None and self.config.dabn):
            return None
        routed = [
            self.router(self.embeddings[task], i)
            for i in range(self.backbone.num_bn_layers)
        ]
        return lambda i: routed[i]

    # ------------------------------------------------------------------
    # Forward paths
    # ------------------------------------------------------------------

    def extract_features(
        self,
        frames: torch.Tensor,
        task: str,
        *,
        update_stats: bool = False,
        use_router: bool | None = None,
    ) -> torch.Tensor:
        """(B, N, 3, H, W) frames to attended (B, N, C, H', W') features.

        The router synthesizes the norm affine during training (so the
        embedding learns); eval reads the materialized bank.
        """
        if frames.dim() != 5 or frames.shape[1] != self.config.views:
            raise ValueError(
                f"expected (B, {self.config.views}, 3, H, W), got {tuple(frames.shape)}"
            )
        if use_router is None:
            use_router = self.training
        bank_task = self._norm_task(task)
        affine_fn = self._affine_fn(task, use_router)
        b, n = frames.shape[:2]
        flat = frames.reshape(b * n, *frames.shape[2:])
        feats = self.backbone(
            flat, bank_task, update_stats=update_stats, affine_fn=affine_fn
        )
        feats = self.cbam(feats)
        per_view = feats.reshape(b, n, *feats.shape[1:])
        return per_view

    def fuse(self, per_view: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        """Stacked view features + raw state to the fused token sequence."""
        return self.fuser(per_view, self.proprio(state))

    def predict_chunk(self, fused: torch.Tensor) -> torch.Tensor:
        """Fused tokens to T future actions, shape (B, T, 13)."""
        return self.decoder(fused)

    def forward(
        self,
        frames: torch.Tensor,
        state: torch.Tensor,
        task: str,
        *,
        update_stats: bool = False,
        use_router: bool | None = None,
    ) -> torch.Tensor:
        per_view = self.extract_features(
            frames, task, update_stats=update_stats, use_router=use_router
        )
        views = [per_view[:, i] for i in range(per_view.shape[1])]
        fused = self.fuse(stack_views(views), state)
        return self.predict_chunk(fused)

    # ------------------------------------------------------------------
    # Bank materialization and freezing
    # ------------------------------------------------------------------

    def materialize_banks(self, tasks: list[str] | None = None) -> None:
        """Write routed affine values into the named tasks' norm banks.

        Checkpoints carry concrete per-task parameters, so loading for
        eval never needs the router. Only tasks whose routing was trained
        should be materialized: rewriting an untouched task's bank from a
        router that has since drifted would silently change its behavior.
        None materializes every task. No-op without routing.
        """
        if self.router is None or not self.config.dabn:
            return
        with torch.no_grad():
            for task in self.tasks() if tasks is None else tasks:
                for i, bn in enumerate(self.backbone.bn_layers):
                    gamma, beta = self.router(self.embeddings[task], i)
                    bn.gamma[task].copy_(gamma)
                    bn.beta[task].copy_(beta)

    def adaptation_parameters(self, task: str) -> list[torch.Tensor]:
        """Parameters allowed to move when adapting to one task."""
        params: list[torch.Tensor] = [self.embeddings[task]]
        if self.config.dabn:
            params.extend(self.backbone.bn_parameters(task))
        if self.router is not None:
            params.extend(self.router.parameters())
        return params

    def freeze_for_adaptation(self, task: str) -> None:
        """Freeze everything except the task's norm bank, embedding, router."""
        set_freeze(self, True)
        for p in self.adaptation_parameters(task):
            p.requires_grad_(True)


# ---------------------------------------------------------------------------
# Temporal smoothing of overlapping chunks
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ActionChunk:
    """One decoded chunk: rows cover ticks t0 .. t0 + T - 1."""

    tau: np.ndarray  # (T, 13)
    t0: int

    def covers(self, t: int) -> bool:
        return self.t0 <= t < self.t0 + self.tau.shape[0]


def smooth_trajectory(chunks: list[ActionChunk], t: int, decay: float = 0.1
                      ) -> np.ndarray:
    """Blend the rows of all chunks covering tick t.

    Each chunk contributes its row for t with weight exp(-decay * age),
    age being how many ticks ago the chunk was issued.
    """
    rows = []
    weights = []
    for ch in chunks:
        if ch.covers(t):
            age = t - ch.t0
            rows.append(ch.tau[age])
            weights.append(np.exp(-decay * age))
    if not rows:
        raise ValueError(f"no chunk covers tick {t}")
    w = np.asarray(weights)
    return (np.stack(rows) * w[:, None]).sum(axis=0) / w.sum()


class ChunkBuffer:
    """Rolling store of live chunks for rollout-time smoothing."""

    def __init__(self, decay: float = 0.1):
        self.decay = decay
        self._chunks: list[ActionChunk] = []

    def push(self, chunk: ActionChunk) -> None:
        self._chunks.append(chunk)

    def action_at(self, t: int) -> np.ndarray:
        self._chunks = [c for c in self._chunks if c.t0 + c.tau.shape[0] > t]
        return smooth_trajectory(self._chunks, t, self.decay)
