"""Merge rates and savings reports.

``p = total steps / unique steps`` for one search space, ``q`` the same over
several studies sharing a compat key.  Unique steps come from inserting every
trial into a fresh plan, so two trials share a step exactly when their
canonical hp value prefixes agree up to it.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from .errors import ComparisonError, ConfigError
from .hpseq import TrialConfig
from .plan import plan_from_configs


@dataclass(frozen=True)
class MergeCount:
    total: int
    unique: int

    @property
    def rate(self) -> Fraction:
        return Fraction(self.total, self.unique) if self.unique else Fraction(1)

    def __add__(self, other: "MergeCount") -> "MergeCount":
        return MergeCount(self.total + other.total, self.unique + other.unique)


@dataclass(frozen=True)
class MergeReport:
    total: int
    unique: int
    per_study: dict[str, MergeCount] = field(default_factory=dict)
    executed: MergeCount | None = None

    @property
    def p(self) -> Fraction:
        return MergeCount(self.total, self.unique).rate

    @property
    def q(self) -> Fraction:
        return self.p

    def to_json(self, steps_per_iteration: int = 1) -> dict[str, Any]:
        spi = steps_per_iteration

        def block(c: MergeCount) -> dict[str, Any]:
            return {
                "total_steps": c.total,
                "unique_steps": c.unique,
                "total_iterations": _fmt(Fraction(c.total, spi)),
                "unique_iterations": _fmt(Fraction(c.unique, spi)),
                "rate": _fmt(c.rate),
                "rate_float": float(c.rate),
            }

        out = block(MergeCount(self.total, self.unique))
        if self.per_study:
            out["studies"] = {k: block(v) for k, v in sorted(self.per_study.items())}
        if self.executed is not None:
            out["executed"] = block(self.executed)
        return out


def _fmt(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def merge_count(configs: Iterable[TrialConfig]) -> MergeCount:
    configs = list(configs)
    if not configs:
        raise ConfigError("merge rate needs at least one trial")
    plan = plan_from_configs(configs)
    return MergeCount(plan.total_steps(), plan.unique_steps())


def merge_rate(configs: Iterable[TrialConfig]) -> Fraction:
    """Total over unique training steps, each trial counted at its full length."""
    return merge_count(configs).rate


def _check_keys(spaces: Sequence[Sequence[TrialConfig]], keys: Sequence[str] | None) -> None:
    if keys is not None:
        if len(keys) != len(spaces):
            raise ConfigError("need one compat key per study")
        if len(set(keys)) > 1:
            raise ConfigError(f"studies have different compat keys: {sorted(set(keys))}")
    hp_sets = {c.hp_set for space in spaces for c in space}
    if len(hp_sets) > 1:
        raise ConfigError("studies use different hp sets and cannot share a plan")


def kwise_merge_rate(spaces: Sequence[Sequence[TrialConfig]], keys: Sequence[str] | None = None) -> Fraction:
    """Merge rate of the union of several studies' trials."""
    _check_keys(spaces, keys)
    return merge_rate(c for space in spaces for c in space)


def merge_report(studies: Mapping[str, Sequence[TrialConfig]], keys: Mapping[str, str] | None = None) -> MergeReport:
    """Per-study counts plus the union over all studies (which must share a key)."""
    names = sorted(studies)
    _check_keys([studies[n] for n in names], [keys[n] for n in names] if keys else None)
    per = {n: merge_count(studies[n]) for n in names}
    union = merge_count(c for n in names for c in studies[n])
    return MergeReport(union.total, union.unique, per)


# ---------------------------------------------------------------- savings


def savings_report(stage: Mapping[str, Any], trial: Mapping[str, Any]) -> dict[str, Any]:
    """Compare a STAGE-mode and a TRIAL-mode run summary of the same workload."""
    if stage.get("mode") != "stage" or trial.get("mode") != "trial":
        raise ComparisonError("expected one stage-mode and one trial-mode summary")
    for k in ("seed", "fingerprint"):
        if stage.get(k) != trial.get(k):
            raise ComparisonError(f"summaries differ in {k}: {stage.get(k)!r} vs {trial.get(k)!r}")
    if not stage["busy_us"] or not stage["end_to_end_us"]:
        raise ComparisonError("stage-mode run did no work")
    gpu = Fraction(trial["busy_us"], stage["busy_us"])
    e2e = Fraction(trial["end_to_end_us"], stage["end_to_end_us"])
    executed = Fraction(stage["merge_rate_executed"])
    return {
        "gpu_hours_stage": stage["gpu_hours"],
        "gpu_hours_trial": trial["gpu_hours"],
        "gpu_hour_ratio": _fmt(gpu),
        "gpu_hour_ratio_float": float(gpu),
        "end_to_end_stage_s": stage["end_to_end_s"],
        "end_to_end_trial_s": trial["end_to_end_s"],
        "end_to_end_ratio": _fmt(e2e),
        "end_to_end_ratio_float": float(e2e),
        "merge_rate_executed": _fmt(executed),
        "merge_rate_executed_float": float(executed),
    }


def report_csv(report: Mapping[str, Any]) -> str:
    lines = ["metric,value"]
    for k in sorted(report):
        lines.append(f"{k},{report[k]}")
    return "\n".join(lines) + "\n"


def bar_data(report: Mapping[str, Any], label: str = "run") -> str:
    """gnuplot data block: label, GPU-hours (trial, stage), end-to-end hours (trial, stage)."""
    row = [
        label,
        f"{report['gpu_hours_trial']:.6f}",
        f"{report['gpu_hours_stage']:.6f}",
        f"{report['end_to_end_trial_s'] / 3600:.6f}",
        f"{report['end_to_end_stage_s'] / 3600:.6f}",
    ]
    return "# label gpu_h_trial gpu_h_stage e2e_h_trial e2e_h_stage\n" + " ".join(row) + "\n"


def render(report: Mapping[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
