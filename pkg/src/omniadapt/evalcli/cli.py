"""Command-line front end: collect, preprocess, train, adapt, eval, ablate, report.

Exit codes: 0 success, 2 configuration problem (bad flags, malformed or
inconsistent config/data), 3 runtime failure (training divergence, expert
failure, unreadable checkpoints). The dataset root defaults to the
OMNIADAPT_DATA environment variable, then ./data. The JSON schemas for
--config are documented in docs/config.md.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from ..checkpoint import CheckpointError
from ..perception import MASKING_MODES, UnsupportedTaskError
from ..simenv import ConfigurationError, ExpertFailure, TASKS
from ..training import (
    DatasetError,
    TrainConfig,
    TrainingDiverged,
    adapt_to_task,
    build_dataset,
    fit,
)
from .ablation import (
    AblationPlan,
    CacheCollisionError,
    collect_demos,
    preprocess_demos,
    run_ablation,
)
from .report import emit_report
from .suites import EXPERT, SUITE_NAMES, EvalSuite, Report, run_suite

log = logging.getLogger("omniadapt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_CONFIG_ERRORS = (
    ValueError,
    KeyError,
    TypeError,
    json.JSONDecodeError,
    FileNotFoundError,
    NotADirectoryError,
    ConfigurationError,
    DatasetError,
    UnsupportedTaskError,
)
_RUNTIME_ERRORS = (
    TrainingDiverged,
    ExpertFailure,
    CheckpointError,
    CacheCollisionError,
    OSError,
)


def _data_root(args) -> Path:
    if args.data:
        return Path(args.data)
    return Path(os.environ.get("OMNIADAPT_DATA", "data"))


def _load_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--config", help="JSON config file (see docs/config.md)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset root (default: $OMNIADAPT_DATA or ./data)")
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded math and sequential trials for bit-stable runs",
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="omniadapt",
        description="Masked multi-view imitation learning pipeline.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="record scripted demonstrations")
    _add_common(p)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--n", type=int, default=40, help="episodes to record")

    p = sub.add_parser("preprocess", help="track, gate, and mask recorded episodes")
    _add_common(p)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--mode", default="background", choices=MASKING_MODES)

    p = sub.add_parser("train", help="behavior-clone a policy on one task")
    _add_common(p)

    p = sub.add_parser("adapt", help="specialize a trained policy to a new task")
    _add_common(p)
    p.add_argument("--base", required=True, help="base checkpoint directory")

    p = sub.add_parser("eval", help="run evaluation suites on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--expert", action="store_true",
                   help="evaluate the scripted demonstrator instead")
    p.add_argument("--task", choices=sorted(TASKS),
                   help="task to evaluate (default: the checkpoint's task)")
    p.add_argument("--suites", default=",".join(SUITE_NAMES),
                   help="comma-separated suite names")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--max-steps", type=int, default=80)

    p = sub.add_parser("ablate", help="train and compare a variant matrix")
    _add_common(p)
    p.add_argument("--cache", help="checkpoint cache directory (default OUT/cache)")

    p = sub.add_parser("report", help="re-emit tables and charts from reports.json")
    _add_common(p)
    p.add_argument("--reports", required=True, help="reports.json from a previous run")
    return ap


def _require(args, flag: str):
    v = getattr(args, flag)
    if not v:
        raise ValueError(f"--{flag} is required for this command")
    return v


def _cmd_collect(args) -> int:
    dirs = collect_demos(args.task, args.n, _data_root(args), args.seed)
    print(f"collected {len(dirs)} episodes under {dirs[0].parent}")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    root = _data_root(args)
    raw = sorted((root / "raw" / args.task).iterdir()) if (root / "raw" / args.task).is_dir() else []
    raw = [d for d in raw if (d / "meta.json").is_file()]
    if not raw:
        raise DatasetError(f"no recorded episodes under {root / 'raw' / args.task}")
    out = preprocess_demos(raw, args.mode, root, args.task)
    print(f"preprocessed {len(out)} episodes into {out[0].parent}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = _load_json(_require(args, "config"))
    return TrainConfig.from_json(cfg)


def _episode_dirs_for(cfg: TrainConfig, root: Path) -> list[Path]:
    base = root / cfg.masking / cfg.task_id
    if not base.is_dir():
        raise DatasetError(
            f"no preprocessed episodes under {base}; run collect and preprocess"
        )
    dirs = sorted(d for d in base.iterdir() if (d / "preprocess.json").is_file())
    if not dirs:
        raise DatasetError(f"no preprocessed episodes under {base}")
    return dirs


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(_require(args, "out"))
    dataset = build_dataset(_episode_dirs_for(cfg, _data_root(args)), cfg)
    ck = fit(dataset, cfg, out)
    print(f"trained {cfg.task_id} on {len(dataset)} samples -> {ck}")
    return EXIT_OK


def _cmd_adapt(args) -> int:
    cfg = _train_config(args)
    out = Path(_require(args, "out"))
    dataset = build_dataset(_episode_dirs_for(cfg, _data_root(args)), cfg)
    ck = adapt_to_task(args.base, dataset, cfg, out)
    print(f"adapted to {cfg.task_id} on {len(dataset)} samples -> {ck}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if bool(args.expert) == bool(args.checkpoint):
        raise ValueError("pass exactly one of --checkpoint or --expert")
    names = [s.strip() for s in args.suites.split(",") if s.strip()]
    for n in names:
        if n not in SUITE_NAMES:
            raise ValueError(f"unknown suite {n!r}; known: {SUITE_NAMES}")
    if args.expert:
        source = EXPERT
        task_id = _require(args, "task")
        variant, config_hash = "expert", ""
    else:
        source = args.checkpoint
        task_id = args.task
        variant = Path(args.checkpoint).name or "model"
        config_hash = ""
        tc = Path(args.checkpoint) / "train_config.json"
        if tc.is_file():
            config_hash = hashlib.sha256(tc.read_bytes()).hexdigest()
    reports: list[Report] = []
    for name in names:
        suite = EvalSuite(name, n_trials=args.trials, seed=args.seed,
                          max_steps=args.max_steps)
        rep = run_suite(source, suite, task_id=task_id, variant=variant,
                        config_hash=config_hash)
        reports.append(rep)
        print(f"{rep.variant} / {name}: success {rep.count('success')}/{rep.n_trials}"
              f" picked {rep.count('picked')}/{rep.n_trials}"
              f" targeted {rep.count('targeted')}/{rep.n_trials}")
    files = emit_report(reports, Path(_require(args, "out")))
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    plan = AblationPlan.from_json(_load_json(_require(args, "config")))
    out = Path(_require(args, "out"))
    cache = Path(args.cache) if args.cache else out / "cache"
    reports = run_ablation(plan, _data_root(args), cache)
    for rep in reports:
        print(f"{rep.variant} / {rep.suite}: "
              f"success {rep.count('success')}/{rep.n_trials}")
    files = emit_report(reports, out)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    payload = _load_json(args.reports)
    if not isinstance(payload, list):
        raise ValueError(f"{args.reports} does not hold a report list")
    reports = [Report.from_json(d) for d in payload]
    files = emit_report(reports, Path(_require(args, "out")))
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "collect": _cmd_collect,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, 0 on --help; pass its code through
        return int(exc.code or 0)
    if args.deterministic:
        import torch

        torch.set_num_threads(1)
    try:
        return _COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        # includes FileNotFoundError, which must not fall into the broad
        # OSError bucket below
        log.error("%s", exc)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
