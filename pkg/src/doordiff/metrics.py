"""Force-safety metrics over episode traces and comparison reports.

Definitions (normative for every report this package emits):

- SuR: successful episodes / total episodes.  Success is re-derived from
  the trace angles and grasp flags, not trusted from the termination tag.
- Per-plan-state attribution: the harmful force charged to a plan state is
  the maximum per-tick harmful magnitude over the ticks that executed it.
  Only states that actually ran carry an attribution; states beyond the
  executed window never touched the door.
- SaR-95 at threshold f: the fraction of successful episodes whose
  attributed states are at least 95% strictly below f newtons.  SaR-80 is
  the 80% analogue.  Thresholds default to (5, 10, 15, 20) N.  With zero
  successful episodes the rate is undefined and reported as None ("n/a" in
  tables), never as 0.
- AHF: mean per-tick harmful magnitude pooled over every tick of every
  trace, failures included up to their termination.  Sums use exact
  rounding (math.fsum), so the streaming value equals a naive recount of
  the concatenated tick list bit for bit.

CSV schema v1: one comment line "# doordiff-report v1", then a header row
  planner,pool,episodes,successes,SuR,AHF,SaR95@<f>N...,SaR80@<f>N...
with one row per report and "n/a" for undefined rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from doordiff.runtime import EpisodeTrace
from doordiff.world import check_success

DEFAULT_THRESHOLDS = (5.0, 10.0, 15.0, 20.0)

REPORT_VERSION = 1


class MetricError(ValueError):
    """Raised for empty inputs or inconsistent report construction."""


def _grasp_flags(trace: EpisodeTrace) -> np.ndarray:
    flags = np.ones(trace.n_ticks, dtype=bool)
    if trace.termination == "grasp_lost" and trace.n_ticks:
        flags[-1] = False
    return flags


def trace_success(trace: EpisodeTrace) -> bool:
    return check_success(trace.scene, trace.angles, _grasp_flags(trace))


def success_rate(traces) -> float:
    traces = list(traces)
    if not traces:
        raise MetricError("success_rate needs at least one trace")
    return sum(trace_success(t) for t in traces) / len(traces)


def state_attributions(trace: EpisodeTrace) -> np.ndarray:
    """Per-executed-plan-state maximum harmful force, in execution order."""
    if trace.n_ticks == 0:
        return np.zeros(0)
    # (plan, state) pairs arrive sorted; group boundaries are where either
    # index changes
    keys = trace.plan_indices * (trace.state_indices.max() + 1) + trace.state_indices
    boundaries = np.flatnonzero(np.diff(keys)) + 1
    return np.array([
        seg.max() for seg in np.split(trace.harmful, boundaries)
    ])


def _is_relaxed_safe(attributions: np.ndarray, threshold: float, percent: int) -> bool:
    n = len(attributions)
    if n == 0:
        return True
    below = int(np.count_nonzero(attributions < threshold))
    # integer comparison: below/n >= percent/100 without float division
    return 100 * below >= percent * n


def safety_rates(traces, threshold: float):
    """(SaR-95, SaR-80) at one threshold; (None, None) without successes."""
    traces = list(traces)
    if not traces:
        raise MetricError("safety_rates needs at least one trace")
    num_success = 0
    num_safe = 0
    num_sub_safe = 0
    for trace in traces:
        if not trace_success(trace):
            continue
        num_success += 1
        attr = state_attributions(trace)
        num_safe += _is_relaxed_safe(attr, threshold, 95)
        num_sub_safe += _is_relaxed_safe(attr, threshold, 80)
    if num_success == 0:
        return None, None
    return num_safe / num_success, num_sub_safe / num_success


def average_harmful_force(traces):
    """Pooled per-tick mean harmful force; None when no ticks exist."""
    traces = list(traces)
    if not traces:
        raise MetricError("average_harmful_force needs at least one trace")
    total = 0.0
    count = 0
    parts = []
    for trace in traces:
        parts.append(math.fsum(trace.harmful))
        count += trace.n_ticks
    total = math.fsum(parts)
    if count == 0:
        return None
    return total / count


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricReport:
    """One planner/pool/condition cell of the comparison table."""

    planner: str
    pool: str
    episodes: int
    num_success: int
    success_ratio: float
    ahf: float | None
    thresholds: tuple
    num_safe: tuple
    num_sub_safe: tuple
    sar95: tuple
    sar80: tuple

    def __post_init__(self):
        n = len(self.thresholds)
        if not (len(self.num_safe) == len(self.num_sub_safe)
                == len(self.sar95) == len(self.sar80) == n):
            raise MetricError("per-threshold tuples must match the thresholds")
        if not 0 <= self.num_success <= self.episodes:
            raise MetricError("num_success must lie in [0, episodes]")
        if not 0.0 <= self.success_ratio <= 1.0:
            raise MetricError("SuR out of range")
        for safe, sub, s95, s80 in zip(self.num_safe, self.num_sub_safe,
                                       self.sar95, self.sar80):
            if not safe <= sub <= self.num_success:
                raise MetricError("require num_safe <= num_sub_safe <= num_success")
            for rate in (s95, s80):
                if rate is not None and not 0.0 <= rate <= 1.0:
                    raise MetricError("safety rate out of range")

    def to_dict(self) -> dict:
        return {
            "planner": self.planner, "pool": self.pool,
            "episodes": self.episodes, "num_success": self.num_success,
            "success_ratio": self.success_ratio, "ahf": self.ahf,
            "thresholds": list(self.thresholds),
            "num_safe": list(self.num_safe),
            "num_sub_safe": list(self.num_sub_safe),
            "sar95": list(self.sar95), "sar80": list(self.sar80),
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricReport":
        return MetricReport(
            planner=d["planner"], pool=d["pool"], episodes=d["episodes"],
            num_success=d["num_success"], success_ratio=d["success_ratio"],
            ahf=d["ahf"], thresholds=tuple(d["thresholds"]),
            num_safe=tuple(d["num_safe"]),
            num_sub_safe=tuple(d["num_sub_safe"]),
            sar95=tuple(d["sar95"]), sar80=tuple(d["sar80"]),
        )


def build_report(planner: str, pool: str, traces,
                 thresholds=DEFAULT_THRESHOLDS) -> MetricReport:
    traces = list(traces)
    if not traces:
        raise MetricError("build_report needs at least one trace")
    successes = [trace_success(t) for t in traces]
    num_success = int(sum(successes))
    attrs = [state_attributions(t) for t, ok in zip(traces, successes) if ok]
    num_safe, num_sub_safe, sar95, sar80 = [], [], [], []
    for f in thresholds:
        safe = sum(_is_relaxed_safe(a, f, 95) for a in attrs)
        sub = sum(_is_relaxed_safe(a, f, 80) for a in attrs)
        num_safe.append(int(safe))
        num_sub_safe.append(int(sub))
        if num_success == 0:
            sar95.append(None)
            sar80.append(None)
        else:
            sar95.append(safe / num_success)
            sar80.append(sub / num_success)
    return MetricReport(
        planner=planner, pool=pool, episodes=len(traces),
        num_success=num_success,
        success_ratio=num_success / len(traces),
        ahf=average_harmful_force(traces),
        thresholds=tuple(float(f) for f in thresholds),
        num_safe=tuple(num_safe), num_sub_safe=tuple(num_sub_safe),
        sar95=tuple(sar95), sar80=tuple(sar80),
    )


def _fmt_threshold(f: float) -> str:
    return f"{f:g}N"


def _fmt_rate(rate) -> str:
    return "n/a" if rate is None else f"{100.0 * rate:.2f}"


def _fmt_force(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _check_same_thresholds(reports):
    reports = list(reports)
    if not reports:
        raise MetricError("no reports to emit")
    thresholds = reports[0].thresholds
    for r in reports[1:]:
        if r.thresholds != thresholds:
            raise MetricError("reports mix different threshold sets")
    return reports, thresholds


def report_csv(reports) -> str:
    """Comparison table as CSV; schema documented in the module docstring."""
    reports, thresholds = _check_same_thresholds(reports)
    columns = ["planner", "pool", "episodes", "successes", "SuR", "AHF"]
    columns += [f"SaR95@{_fmt_threshold(f)}" for f in thresholds]
    columns += [f"SaR80@{_fmt_threshold(f)}" for f in thresholds]
    lines = [f"# doordiff-report v{REPORT_VERSION}", ",".join(columns)]
    for r in reports:
        row = [r.planner, r.pool, str(r.episodes), str(r.num_success),
               _fmt_rate(r.success_ratio), _fmt_force(r.ahf)]
        row += [_fmt_rate(x) for x in r.sar95]
        row += [_fmt_rate(x) for x in r.sar80]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_text(reports) -> str:
    """Human-readable comparison table (percentages, newtons)."""
    reports, thresholds = _check_same_thresholds(reports)
    header = ["planner", "pool", "n", "SuR%", "AHF(N)"]
    header += [f"SaR95@{_fmt_threshold(f)}" for f in thresholds]
    header += [f"SaR80@{_fmt_threshold(f)}" for f in thresholds]
    rows = [header]
    for r in reports:
        row = [r.planner, r.pool, str(r.episodes),
               _fmt_rate(r.success_ratio), _fmt_force(r.ahf)]
        row += [_fmt_rate(x) for x in r.sar95]
        row += [_fmt_rate(x) for x in r.sar80]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
