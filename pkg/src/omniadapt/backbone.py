"""Residual CNN backbone with per-task dynamic batch normalization.

Every norm layer keeps a bank of parameters per registered task: affine
gain/shift plus running mean/std, updated by an exponential moving average
while training. A small router MLP can synthesize the affine pair from a
64-d task embedding instead; training runs through the router so gradients
reach the embedding, and the routed values are written back into the bank
before checkpointing. Task banks are disjoint by construction: touching one
task's parameters cannot perturb another's.
"""
from __future__ import annotations

import dataclasses
import re

import torch
from torch import nn

TASK_ID_RE = re.compile(r"^[A-Za-z0-9_]+$")

EMBED_DIM = 64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_task_id(task: str) -> str:
    if not TASK_ID_RE.match(task):
        raise ValueError(f"task id must match [A-Za-z0-9_]+, got {task!r}")
    return task


@dataclasses.dataclass
class BNParamSet:
    """One task's parameters for one norm layer."""

    gamma: torch.Tensor  # (C,)
    beta: torch.Tensor   # (C,)
    mu: torch.Tensor     # (C,) running mean
    sigma: torch.Tensor  # (C,) running std
    eps: float = BN_EPS


def dabn_forward(
    x: torch.Tensor,
    params: BNParamSet,
    training: bool,
    *,
    update_stats: bool | None = None,
    momentum: float = BN_MOMENTUM,
    literal_variance_eps: bool = False,
    affine_override: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Normalize a feature map with a task's parameter set.

    Training mode normalizes by batch statistics and (when update_stats,
    which defaults to `training`) folds them into the running mean/std with
    the usual exponential moving average. Eval mode normalizes by the
    stored statistics. literal_variance_eps divides by (var + eps) instead
    of sqrt(var + eps).
    """
    if x.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
    c = params.gamma.shape[0]
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, params have {c}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in normalization input")
    if update_stats is None:
        update_stats = training

    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError("batch statistics need more than one value per channel")
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        if update_stats:
            with torch.no_grad():
                var_u = var.detach() * (n / (n - 1))
                new_var = (1.0 - momentum) * params.sigma**2 + momentum * var_u
                params.mu.mul_(1.0 - momentum).add_(momentum * mean.detach())
                params.sigma.copy_(torch.sqrt(new_var))
    else:
        mean = params.mu
        var = params.sigma**2

    denom = (var + params.eps) if literal_variance_eps else torch.sqrt(var + params.eps)
    x_hat = (x - mean.view(1, -1, 1, 1)) / denom.view(1, -1, 1, 1)
    if affine_override is not None:
        gamma, beta = affine_override
    else:
        gamma, beta = params.gamma, params.beta
    return gamma.view(1, -1, 1, 1) * x_hat + beta.view(1, -1, 1, 1)


class DynamicBatchNorm2d(nn.Module):
    """Norm layer holding a per-task bank of affine params and statistics."""

    def __init__(self, channels: int, *, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM, literal_variance_eps: bool = False):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.literal_variance_eps = literal_variance_eps
        self.gamma = nn.ParameterDict()
        self.beta = nn.ParameterDict()
        self.layer_index = -1  # assigned by the backbone

    def tasks(self) -> list[str]:
        return list(self.gamma.keys())

    def register_task(self, task: str, init_from: str | None = None) -> None:
        _check_task_id(task)
        if task in self.gamma:
            raise ValueError(f"task {task!r} already registered")
        if init_from is not None:
            if init_from not in self.gamma:
                raise ValueError(f"unknown source task {init_from!r}")
            g = self.gamma[init_from].detach().clone()
            b = self.beta[init_from].detach().clone()
            mu = getattr(self, f"mu_{init_from}").clone()
            sigma = getattr(self, f"sigma_{init_from}").clone()
        else:
            g = torch.ones(self.channels)
            b = torch.zeros(self.channels)
            mu = torch.zeros(self.channels)
            sigma = torch.ones(self.channels)
        self.gamma[task] = nn.Parameter(g)
        self.beta[task] = nn.Parameter(b)
        self.register_buffer(f"mu_{task}", mu)
        self.register_buffer(f"sigma_{task}", sigma)

    def params_for(self, task: str) -> BNParamSet:
        if task not in self.gamma:
            raise KeyError(f"task {task!r} not registered with this layer")
        return BNParamSet(
            gamma=self.gamma[task],
            beta=self.beta[task],
            mu=getattr(self, f"mu_{task}"),
            sigma=getattr(self, f"sigma_{task}"),
            eps=self.eps,
        )

    def forward(
        self,
        x: torch.Tensor,
        task: str,
        *,
        update_stats: bool = False,
        affine_override: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        return dabn_forward(
            x,
            self.params_for(task),
            self.training,
            update_stats=update_stats and self.training,
            momentum=self.momentum,
            literal_variance_eps=self.literal_variance_eps,
            affine_override=affine_override,
        )


class AffineRouter(nn.Module):
    """Maps a task embedding to per-layer affine pairs (gain, shift).

    One two-layer MLP per norm layer; the final bias starts at gain 1 and
    shift 0 with near-zero weights, so routing begins as the identity
    affine and drifts as the embedding trains.
    """

    def __init__(self, channel_sizes: list[int], embed_dim: int = EMBED_DIM,
                 hidden: int = 128):
        super().__init__()
        self.embed_dim = embed_dim
        self.blocks = nn.ModuleList()
        for c in channel_sizes:
            final = nn.Linear(hidden, 2 * c)
            with torch.no_grad():
                final.weight.normal_(0.0, 0.01)
                final.bias.copy_(torch.cat([torch.ones(c), torch.zeros(c)]))
            self.blocks.append(
                nn.Sequential(nn.Linear(embed_dim, hidden), nn.ReLU(), final)
            )

    def forward(self, embedding: torch.Tensor, layer: int
                ) -> tuple[torch.Tensor, torch.Tensor]:
        if embedding.shape != (self.embed_dim,):
            raise ValueError(f"embedding must have shape ({self.embed_dim},)")
        out = self.blocks[layer](embedding)
        c = out.shape[0] // 2
        return out[:c], out[c:]


def route_bn_params(router: AffineRouter, embedding: torch.Tensor,
                    num_layers: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """All layers' routed affine pairs for one embedding."""
    return [router(embedding, i) for i in range(num_layers)]


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, bn_factory):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = bn_factory(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = bn_factory(c_out)
        if stride != 1 or c_in != c_out:
            self.conv_sc = nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False)
            self.bn_sc = bn_factory(c_out)
        else:
            self.conv_sc = None
            self.bn_sc = None

    def forward(self, x: torch.Tensor, run_bn) -> torch.Tensor:
        h = torch.relu(run_bn(self.bn1, self.conv1(x)))
        h = run_bn(self.bn2, self.conv2(h))
        s = run_bn(self.bn_sc, self.conv_sc(x)) if self.conv_sc is not None else x
        return torch.relu(h + s)


class ResidualBackbone(nn.Module):
    """Four residual stages over a conv stem; 64x64x3 in, 128x8x8 out."""

    def __init__(self, *, in_channels: int = 3, widths=(16, 32, 64, 128),
                 eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                 literal_variance_eps: bool = False):
        super().__init__()
        self.bn_layers: list[DynamicBatchNorm2d] = []

        def bn_factory(c: int) -> DynamicBatchNorm2d:
            bn = DynamicBatchNorm2d(
                c, eps=eps, momentum=momentum,
                literal_variance_eps=literal_variance_eps,
            )
            bn.layer_index = len(self.bn_layers)
            self.bn_layers.append(bn)
            return bn

        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        self.stem_bn = bn_factory(widths[0])
        blocks = []
        c_prev = widths[0]
        for i, c in enumerate(widths):
            blocks.append(_ResBlock(c_prev, c, stride=1 if i == 0 else 2, bn_factory=bn_factory))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = widths[-1]
        self.num_bn_layers = len(self.bn_layers)
        self.bn_channel_sizes = [bn.channels for bn in self.bn_layers]

    def register_task(self, task: str, init_from: str | None = None) -> None:
        for bn in self.bn_layers:
            bn.register_task(task, init_from)

    def tasks(self) -> list[str]:
        return self.bn_layers[0].tasks() if self.bn_layers else []

    def forward(
        self,
        x: torch.Tensor,
        task: str,
        *,
        update_stats: bool = False,
        affine_fn=None,
    ) -> torch.Tensor:
        def run_bn(bn: DynamicBatchNorm2d, h: torch.Tensor) -> torch.Tensor:
            ov = affine_fn(bn.layer_index) if affine_fn is not None else None
            return bn(h, task, update_stats=update_stats, affine_override=ov)

        h = torch.relu(run_bn(self.stem_bn, self.stem(x)))
        for blk in self.blocks:
            h = blk(h, run_bn)
        return h

    def conv_parameters(self):
        """Parameters of the convolution kernels (the freezable part)."""
        for name, p in self.named_parameters():
            if "gamma" not in name and "beta" not in name:
                yield p

    def bn_parameters(self, task: str):
        """Affine parameters of one task's bank, every layer."""
        for bn in self.bn_layers:
            yield bn.gamma[task]
            yield bn.beta[task]


def set_freeze(module: nn.Module, frozen: bool) -> None:
    """Toggle requires_grad for every parameter under a module."""
    for p in module.parameters():
        p.requires_grad_(not frozen)
