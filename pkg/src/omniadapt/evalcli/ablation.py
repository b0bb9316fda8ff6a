"""Variant-matrix orchestration: collect once, train per variant, evaluate.

Each variant is the base training configuration plus a few switch
overrides (masking mode, attention gates, per-task normalization on/off).
Trained checkpoints are cached under a hash of the exact serialized
variant configuration, so reruns and shared variants pay the training
cost once; a hash directory whose stored configuration differs from the
requested one aborts rather than silently reusing the wrong weights.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path

from ..simenv import ExpertFailure, TASKS, load_episode, make_scene_config, record_demonstration, save_episode
from ..perception import MASKING_MODES, preprocess_episode
from ..training import TrainConfig, build_dataset, fit
from .suites import EvalSuite, Report, SUITE_NAMES, run_suite

log = logging.getLogger(__name__)


class CacheCollisionError(RuntimeError):
    """A cache entry's stored configuration differs from the requested one."""


@dataclasses.dataclass(frozen=True)
class Variant:
    """One row of the comparison matrix: a label plus config overrides."""

    label: str
    overrides: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("variant label must be non-empty")
        legal = {f.name for f in dataclasses.fields(TrainConfig)} - {"task_id"}
        bad = set(self.overrides) - legal
        if bad:
            raise ValueError(f"unknown TrainConfig overrides: {sorted(bad)}")


@dataclasses.dataclass(frozen=True)
class AblationPlan:
    """Everything one comparison run needs: data budget, configs, suites."""

    task_id: str
    demos: int = 40
    collect_seed: int = 0
    train: dict = dataclasses.field(default_factory=dict)
    variants: tuple[Variant, ...] = ()
    suites: tuple[str, ...] = SUITE_NAMES
    n_trials: int = 20
    eval_seed: int = 0
    max_steps: int = 80

    def __post_init__(self) -> None:
        if self.task_id not in TASKS:
            raise ValueError(f"unknown task {self.task_id!r}; known: {sorted(TASKS)}")
        if self.demos < 1:
            raise ValueError("demos must be >= 1")
        if not self.variants:
            raise ValueError("at least one variant is required")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate variant labels: {labels}")
        for s in self.suites:
            if s not in SUITE_NAMES:
                raise ValueError(f"unknown suite {s!r}; known: {SUITE_NAMES}")

    def variant_config(self, variant: Variant) -> TrainConfig:
        merged = dict(self.train)
        merged.update(variant.overrides)
        return TrainConfig(task_id=self.task_id, **merged)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "demos": self.demos,
            "collect_seed": self.collect_seed,
            "train": dict(self.train),
            "variants": [
                {"label": v.label, "overrides": dict(v.overrides)}
                for v in self.variants
            ],
            "suites": list(self.suites),
            "n_trials": self.n_trials,
            "eval_seed": self.eval_seed,
            "max_steps": self.max_steps,
        }

    @staticmethod
    def from_json(d: dict) -> "AblationPlan":
        d = dict(d)
        d["variants"] = tuple(
            Variant(label=v["label"], overrides=dict(v.get("overrides", {})))
            for v in d.get("variants", [])
        )
        d["suites"] = tuple(d.get("suites", SUITE_NAMES))
        return AblationPlan(**d)


def collect_demos(task_id: str, demos: int, data_root: str | Path,
                  seed: int = 0) -> list[Path]:
    """Record scripted demonstrations until `demos` succeed.

    Seeds count up from `seed`; a seed whose scene the expert cannot solve
    (target sampled out of reach) is skipped deterministically. Existing
    episode directories are reused, so collection is incremental.
    """
    raw = Path(data_root) / "raw" / task_id
    out: list[Path] = []
    s = seed
    attempts = 0
    while len(out) < demos:
        if attempts > demos * 20 + 100:
            raise ExpertFailure(
                f"could not collect {demos} demos after {attempts} attempts"
            )
        attempts += 1
        ep_dir = raw / str(s)
        if (ep_dir / "meta.json").is_file():
            out.append(ep_dir)
            s += 1
            continue
        try:
            ep = record_demonstration(make_scene_config(task_id, rng_seed=s))
        except ExpertFailure as exc:
            log.info("seed %d skipped: %s", s, exc)
            s += 1
            continue
        save_episode(ep, ep_dir)
        out.append(ep_dir)
        s += 1
    return out


def preprocess_demos(raw_dirs: list[Path], mode: str, data_root: str | Path,
                     task_id: str) -> list[Path]:
    """Write masked copies of raw episodes for one masking mode."""
    if mode not in MASKING_MODES:
        raise ValueError(f"masking must be one of {MASKING_MODES}, got {mode!r}")
    out: list[Path] = []
    for raw_dir in raw_dirs:
        dst = Path(data_root) / mode / task_id / raw_dir.name
        if not (dst / "preprocess.json").is_file():
            ep = load_episode(raw_dir)
            save_episode(ep, dst)
            preprocess_episode(ep, mode=mode, out_dir=dst)
        out.append(dst)
    return out


def variant_identity(plan: AblationPlan, variant: Variant) -> tuple[str, bytes]:
    """Canonical config bytes for one trained model, and their digest."""
    cfg = plan.variant_config(variant)
    payload = {
        "data": {
            "task_id": plan.task_id,
            "demos": plan.demos,
            "collect_seed": plan.collect_seed,
        },
        "train": cfg.to_json(),
    }
    blob = json.dumps(payload, indent=2, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest(), blob


def ensure_checkpoint(plan: AblationPlan, variant: Variant,
                      data_root: str | Path, cache_dir: str | Path) -> tuple[Path, str]:
    """Train this variant unless an identically-configured model is cached."""
    digest, blob = variant_identity(plan, variant)
    entry = Path(cache_dir) / digest[:16]
    cfg_file = entry / "config.json"
    ck_dir = entry / "checkpoint"
    if cfg_file.is_file():
        stored = cfg_file.read_bytes()
        if stored != blob:
            raise CacheCollisionError(
                f"cache entry {entry} holds a different configuration for "
                f"digest {digest[:16]}"
            )
        if (ck_dir / "arch.json").is_file():
            log.info("variant %r: reusing cached checkpoint %s", variant.label, ck_dir)
            return ck_dir, digest

    cfg = plan.variant_config(variant)
    raw_dirs = collect_demos(plan.task_id, plan.demos, data_root, plan.collect_seed)
    ep_dirs = preprocess_demos(raw_dirs, cfg.masking, data_root, plan.task_id)
    dataset = build_dataset(ep_dirs, cfg)
    log.info("variant %r: training on %d samples", variant.label, len(dataset))
    fit(dataset, cfg, ck_dir)
    entry.mkdir(parents=True, exist_ok=True)
    cfg_file.write_bytes(blob)
    return ck_dir, digest


def run_ablation(plan: AblationPlan, data_root: str | Path,
                 cache_dir: str | Path) -> list[Report]:
    """Train (or reuse) every variant and evaluate it under every suite."""
    reports: list[Report] = []
    for variant in plan.variants:
        ck_dir, digest = ensure_checkpoint(plan, variant, data_root, cache_dir)
        for suite_name in plan.suites:
            suite = EvalSuite(suite_name, n_trials=plan.n_trials,
                              seed=plan.eval_seed, max_steps=plan.max_steps)
            reports.append(
                run_suite(ck_dir, suite, task_id=plan.task_id,
                          variant=variant.label, config_hash=digest)
            )
    return reports
