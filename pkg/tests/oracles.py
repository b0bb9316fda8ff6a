"""Hand-rolled numerical oracles shared across test modules.

The gradient oracle is central finite differences in float64, written
independently of autograd so the two routes can disagree.
"""
import math
import time

import numpy as np
import torch

from omniadapt.attention import CBAM
from omniadapt.backbone import AffineRouter, BNParamSet, dabn_forward, route_bn_params
from omniadapt.policy import ArchConfig, VisuomotorPolicy


def central_fd(fn, tensors, coords, h=1e-5):
    """d fn / d tensors[ti].flat[idx] for every (ti, idx), by central differences.

    fn must be a closure over `tensors` returning a scalar tensor; entries
    are perturbed in place and restored.
    """
    grads = []
    for ti, idx in coords:
        flat = tensors[ti].detach().reshape(-1)
        orig = flat[idx].item()
        step = h * max(1.0, abs(orig))
        with torch.no_grad():
            flat[idx] = orig + step
            lp = fn().item()
            flat[idx] = orig - step
            lm = fn().item()
            flat[idx] = orig
        grads.append((lp - lm) / (2 * step))
    return np.array(grads)


def rel_err(fd, an, floor=1e-6):
    """Relative error with a denominator floor.

    The floor absorbs central-difference round-off on near-dead coordinates
    (noise scale eps * |loss| / h ~ 1e-10, far below the floor), while any
    real gradient defect on a live coordinate still shows up at full size.
    """
    return np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)


def fd_vs_autograd(fn, tensors, per_tensor=None, seed=0, h=1e-5):
    """Max relative error between autograd and central differences.

    Checks every coordinate when per_tensor is None, else a seeded sample
    of per_tensor coordinates from each tensor.
    """
    an = torch.autograd.grad(fn(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    coords = []
    for ti, t in enumerate(tensors):
        if per_tensor is None:
            coords.extend((ti, i) for i in range(t.numel()))
        else:
            for idx in rng.choice(t.numel(), size=min(per_tensor, t.numel()),
                                  replace=False):
                coords.append((ti, int(idx)))
    fd = central_fd(fn, tensors, coords, h=h)
    an_sel = np.array([
        an[ti].reshape(-1)[idx].item() if an[ti] is not None else 0.0
        for ti, idx in coords
    ])
    return rel_err(fd, an_sel).max()


def chunk_loss_by_hand(pred, gt, decay=0.95, vel_weight=0.2, mask=None,
                       squared=False):
    """Explicit per-term loop over the chunk-loss definition.

    Python floats throughout; k runs 1..T with weight decay^(T-k); the
    velocity term is the norm of pred[k] - pred[k-1], zero at k=1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    t = pred.shape[0]
    total = 0.0
    for k in range(1, t + 1):
        if mask is not None and not mask[k - 1]:
            continue
        w = decay ** (t - k)
        res = pred[k - 1] - gt[k - 1]
        res_term = float(res @ res)
        if not squared:
            res_term = math.sqrt(res_term)
        if k == 1:
            vel_term = 0.0
        else:
            vel = pred[k - 1] - pred[k - 2]
            vel_term = float(vel @ vel)
            if not squared:
                vel_term = math.sqrt(vel_term)
        total += w * (res_term + vel_weight * vel_term)
    return total


def run_gradient_suite():
    """Four float64 gradient checks on miniature shapes.

    Returns {"dabn_train", "dabn_eval", "router", "cbam", "pipeline",
    "seconds"}: max relative errors per check plus total wall time.
    """
    t0 = time.time()
    out = {}

    # Normalization, training-mode batch statistics and eval-mode stored stats.
    torch.manual_seed(0)
    g = (torch.randn(4, dtype=torch.float64) * 0.5 + 1.0).requires_grad_(True)
    b = (torch.randn(4, dtype=torch.float64) * 0.3).requires_grad_(True)
    x = torch.randn(3, 4, 5, 5, dtype=torch.float64).requires_grad_(True)
    mu = torch.randn(4, dtype=torch.float64)
    sigma = torch.rand(4, dtype=torch.float64) + 0.5
    w = torch.randn(3, 4, 5, 5, dtype=torch.float64)

    def loss_train():
        p = BNParamSet(gamma=g, beta=b, mu=mu, sigma=sigma)
        return (dabn_forward(x, p, training=True, update_stats=False) * w).sum()

    def loss_eval():
        p = BNParamSet(gamma=g, beta=b, mu=mu, sigma=sigma)
        return (dabn_forward(x, p, training=False) * w).sum()

    out["dabn_train"] = fd_vs_autograd(loss_train, [g, b, x])
    out["dabn_eval"] = fd_vs_autograd(loss_eval, [g, b, x])

    # Router: every coordinate of the embedding and both MLPs.
    torch.manual_seed(1)
    router = AffineRouter([3, 5], embed_dim=8, hidden=16).double()
    emb = torch.randn(8, dtype=torch.float64).requires_grad_(True)
    ws = [torch.randn(3, dtype=torch.float64), torch.randn(3, dtype=torch.float64),
          torch.randn(5, dtype=torch.float64), torch.randn(5, dtype=torch.float64)]

    def loss_router():
        pairs = route_bn_params(router, emb, 2)
        return ((pairs[0][0] * ws[0]).sum() + (pairs[0][1] * ws[1]).sum()
                + (pairs[1][0] * ws[2]).sum() + (pairs[1][1] * ws[3]).sum())

    out["router"] = fd_vs_autograd(loss_router, [emb] + list(router.parameters()))

    # Attention block: every coordinate.
    torch.manual_seed(2)
    cbam = CBAM(8, reduction=4, kernel_size=3).double()
    xc = torch.randn(2, 8, 6, 6, dtype=torch.float64).requires_grad_(True)
    wc = torch.randn(2, 8, 6, 6, dtype=torch.float64)

    def loss_cbam():
        return (cbam(xc) * wc).sum()

    out["cbam"] = fd_vs_autograd(loss_cbam, [xc] + list(cbam.parameters()))

    # Full fused pipeline on a miniature config, sampled coordinates.
    torch.manual_seed(3)
    cfg = ArchConfig(views=2, image_size=16, widths=(4, 8), d_model=16, heads=2,
                     decoder_layers=1, feedforward=32, chunk=3, reduction=4,
                     spatial_kernel=3)
    pol = VisuomotorPolicy(cfg)
    pol.register_task("t")
    pol = pol.double()
    pol.train()
    frames = torch.rand(2, 2, 3, 16, 16, dtype=torch.float64)
    state = torch.rand(2, 13, dtype=torch.float64)
    wp = torch.randn(2, 3, 13, dtype=torch.float64)

    def loss_pipe():
        return (pol(frames, state, "t", update_stats=False, use_router=True) * wp).sum()

    out["pipeline"] = fd_vs_autograd(
        loss_pipe, [p for p in pol.parameters() if p.requires_grad], per_tensor=3
    )
    out["seconds"] = time.time() - t0
    return out
