"""Checkpoint directory format.

A checkpoint is a directory of flat little-endian float32 blobs plus two
JSON files:

    arch.json        network skeleton, task list, and per-file manifests
                     (ordered [key, shape] pairs describing each blob)
    conv.bin         backbone convolution kernels
    bn_<task>.bin    one per task: every norm layer's gain/shift/mean/std
    router.bin       affine-router MLPs (absent when routing is off)
    cbam.bin         channel/spatial attention parameters
    fuse.bin         token projection and view/position embeddings
    pro_mlp.bin      proprioceptive state encoder
    decoder.bin      chunk queries, transformer decoder, action head
    embeddings.json  task embedding vectors

Blob order follows the module tree, recorded explicitly in the manifest,
so identical parameters always serialize to identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .backbone import EMBED_DIM
from .policy import ArchConfig, VisuomotorPolicy

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    """Raised when a checkpoint directory is malformed or inconsistent."""


def _bank_file_keys(state: dict, bank_tasks: list[str]) -> dict[str, list[str]]:
    """Map each bank task to its norm-parameter state keys, in tree order."""
    per_task: dict[str, list[str]] = {t: [] for t in bank_tasks}
    for key in state:
        if not key.startswith("backbone."):
            continue
        leaf = key.rsplit(".", 1)[-1]
        parts = key.split(".")
        for t in bank_tasks:
            if (len(parts) >= 2 and parts[-2] in ("gamma", "beta") and parts[-1] == t) \
                    or leaf in (f"mu_{t}", f"sigma_{t}"):
                per_task[t].append(key)
                break
    return per_task


def _classify(state: dict, bank_tasks: list[str]) -> dict[str, list[str]]:
    """Bucket state keys into checkpoint files."""
    bank_keys = _bank_file_keys(state, bank_tasks)
    claimed = {k for keys in bank_keys.values() for k in keys}
    files: dict[str, list[str]] = {f"bn_{t}": keys for t, keys in bank_keys.items()}
    prefix_map = [
        ("backbone.", "conv"),
        ("router.", "router"),
        ("cbam.", "cbam"),
        ("fuser.", "fuse"),
        ("proprio.", "pro_mlp"),
        ("decoder.", "decoder"),
        ("embeddings.", None),  # stored in embeddings.json
    ]
    for key in state:
        if key in claimed:
            continue
        for prefix, fname in prefix_map:
            if key.startswith(prefix):
                if fname is not None:
                    files.setdefault(fname, []).append(key)
                break
        else:
            raise CheckpointError(f"state key {key!r} fits no checkpoint file")
    return files


def save_checkpoint(
    policy: VisuomotorPolicy,
    path: str | Path,
    materialize_tasks: list[str] | None = None,
) -> Path:
    """Write a policy to a checkpoint directory (created if needed).

    materialize_tasks names the tasks whose routed affine values are
    written into their banks first (the tasks that were just trained);
    saved banks are always concrete, so loading never needs the router to
    run the network. Tasks not named keep their stored bank bit-for-bit.
    """
    if materialize_tasks:
        policy.materialize_banks(materialize_tasks)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu() for k, v in policy.state_dict().items()}
    bank_tasks = policy.backbone.tasks()
    files = _classify(state, bank_tasks)

    manifest: dict[str, list] = {}
    for fname, keys in files.items():
        blob = np.concatenate(
            [state[k].numpy().astype(_F32).ravel() for k in keys]
        ) if keys else np.empty(0, dtype=_F32)
        blob.astype(_F32).tofile(out / f"{fname}.bin")
        manifest[fname] = [[k, list(state[k].shape)] for k in keys]

    arch = {
        "version": FORMAT_VERSION,
        "config": policy.config.to_json(),
        "tasks": policy.tasks(),
        "manifest": manifest,
    }
    (out / "arch.json").write_text(json.dumps(arch, indent=2, sort_keys=True))

    emb = {
        "dim": EMBED_DIM,
        "values": {
            t: [float(v) for v in policy.embeddings[t].detach().tolist()]
            for t in policy.tasks()
        },
    }
    (out / "embeddings.json").write_text(json.dumps(emb, indent=2, sort_keys=True))
    return out


def load_checkpoint(path: str | Path) -> VisuomotorPolicy:
    """Rebuild a policy from a checkpoint directory.

    Every manifest entry must match a state key and consume exactly the
    bytes in its blob; the rebuilt policy is returned in eval mode with
    gradients disabled.
    """
    root = Path(path)
    arch_path = root / "arch.json"
    if not arch_path.is_file():
        raise CheckpointError(f"{root} is not a checkpoint (missing arch.json)")
    arch = json.loads(arch_path.read_text())
    if arch.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {arch.get('version')!r}")

    config = ArchConfig.from_json(arch["config"])
    policy = VisuomotorPolicy(config)
    for task in arch["tasks"]:
        policy.register_task(task)

    state: dict[str, torch.Tensor] = {}
    for fname, entries in arch["manifest"].items():
        blob_path = root / f"{fname}.bin"
        if not blob_path.is_file():
            raise CheckpointError(f"missing blob {blob_path.name}")
        blob = np.fromfile(blob_path, dtype=_F32)
        off = 0
        for key, shape in entries:
            n = int(np.prod(shape)) if shape else 1
            if off + n > blob.size:
                raise CheckpointError(f"{blob_path.name} is truncated at {key!r}")
            state[key] = torch.from_numpy(
                blob[off:off + n].reshape(shape).copy()
            )
            off += n
        if off != blob.size:
            raise CheckpointError(
                f"{blob_path.name} has {blob.size - off} unexpected trailing floats"
            )

    emb = json.loads((root / "embeddings.json").read_text())
    for task in arch["tasks"]:
        if task not in emb["values"]:
            raise CheckpointError(f"embeddings.json lacks task {task!r}")
        state[f"embeddings.{task}"] = torch.tensor(
            emb["values"][task], dtype=torch.float32
        )

    policy.load_state_dict(state, strict=True)
    policy.eval()
    for p in policy.parameters():
        p.requires_grad_(False)
    return policy
