"""Closed-loop evaluation suites, ablation runs, and report emission."""

from .ablation import AblationPlan, CacheCollisionError, Variant, run_ablation
from .report import emit_report
from .suites import (
    EXPERT,
    SUITE_NAMES,
    EvalSuite,
    Report,
    TrialResult,
    rollout,
    run_suite,
)

__all__ = [
    "AblationPlan",
    "CacheCollisionError",
    "EXPERT",
    "EvalSuite",
    "Report",
    "SUITE_NAMES",
    "TrialResult",
    "Variant",
    "emit_report",
    "rollout",
    "run_suite",
]
