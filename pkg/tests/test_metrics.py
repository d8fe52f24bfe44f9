"""Tests for the force-safety metrics against naive recount oracles."""

import math

import numpy as np
import pytest

from doordiff.dataset import sample_scene
from doordiff.metrics import (
    MetricError,
    MetricReport,
    average_harmful_force,
    build_report,
    report_csv,
    report_text,
    safety_rates,
    state_attributions,
    success_rate,
    trace_success,
)
from doordiff.runtime import EpisodeTrace, OraclePlanner, evaluate_fleet, read_trace, write_trace
from doordiff.world import SceneConfig

SCENE = SceneConfig()


def make_trace(angles, harmful, plan_indices, state_indices,
               termination="timeout", scene=SCENE):
    angles = np.asarray(angles, dtype=np.float64)
    n = len(angles)
    return EpisodeTrace(
        scene=scene,
        times=scene.dt * np.arange(1, n + 1),
        angles=angles,
        omegas=np.zeros(n),
        ee_positions=np.zeros((n, 2)),
        commands=np.zeros((n, 2)),
        forces_raw=np.zeros((n, 2)),
        effective=np.zeros(n),
        harmful=np.asarray(harmful, dtype=np.float64),
        plan_indices=np.asarray(plan_indices, dtype=np.int64),
        state_indices=np.asarray(state_indices, dtype=np.int64),
        termination=termination,
    )


def success_trace(n_states=10, harmful_per_state=None, ticks_per_state=3):
    """A trace whose angle crosses the success threshold on the last tick."""
    n = n_states * ticks_per_state
    angles = np.linspace(0.0, SCENE.success_angle, n)
    angles[-1] = SCENE.success_angle
    if harmful_per_state is None:
        harmful_per_state = np.zeros(n_states)
    harmful = np.repeat(np.asarray(harmful_per_state, dtype=np.float64),
                        ticks_per_state)
    plan = np.repeat(np.arange(n_states) // 8, ticks_per_state)
    state = np.repeat(np.arange(n_states) % 8, ticks_per_state)
    return make_trace(angles, harmful, plan, state, termination="success")


def failed_trace(n=12, harmful=None):
    if harmful is None:
        harmful = np.zeros(n)
    return make_trace(np.linspace(0, 0.1, n), harmful,
                      np.zeros(n, dtype=int), np.arange(n) // 3)


# ---------------------------------------------------------------------------
# naive recount oracles


def naive_success(trace):
    crossing = None
    for i, a in enumerate(trace.angles):
        if a >= trace.scene.success_angle:
            crossing = i
            break
    if crossing is None:
        return False
    if trace.termination == "grasp_lost" and crossing == trace.n_ticks - 1:
        return False
    return True


def naive_attributions(trace):
    best = {}
    order = []
    for p, s, h in zip(trace.plan_indices, trace.state_indices, trace.harmful):
        key = (int(p), int(s))
        if key not in best:
            best[key] = h
            order.append(key)
        else:
            best[key] = max(best[key], h)
    return [best[k] for k in order]


def naive_safety_rates(traces, f):
    num_success = num_safe = num_sub = 0
    for t in traces:
        if not naive_success(t):
            continue
        num_success += 1
        attr = naive_attributions(t)
        below = sum(1 for a in attr if a < f)
        n = len(attr)
        if n == 0 or 100 * below >= 95 * n:
            num_safe += 1
        if n == 0 or 100 * below >= 80 * n:
            num_sub += 1
    if num_success == 0:
        return None, None
    return num_safe / num_success, num_sub / num_success


def naive_ahf(traces):
    ticks = []
    for t in traces:
        ticks.extend(float(h) for h in t.harmful)
    if not ticks:
        return None
    return math.fsum(ticks) / len(ticks)


# ---------------------------------------------------------------------------
# basic examples


def test_success_rate_examples():
    assert success_rate([failed_trace() for _ in range(10)]) == 0.0
    assert success_rate([success_trace() for _ in range(4)]) == 1.0
    assert success_rate([success_trace(), success_trace(), success_trace(),
                         failed_trace()]) == 0.75
    with pytest.raises(MetricError):
        success_rate([])


def test_success_ignores_grasp_loss_after_crossing():
    trace = success_trace()
    assert trace_success(trace)
    # same angles, but grasp broke on the final (crossing) tick
    broken = make_trace(trace.angles, trace.harmful, trace.plan_indices,
                        trace.state_indices, termination="grasp_lost")
    assert not trace_success(broken)


def test_safety_rates_all_zero_force():
    assert safety_rates([success_trace()], 5.0) == (1.0, 1.0)


def test_safety_rates_between_thresholds():
    # exactly 90% of states below f: fails the 95% bar, passes the 80% bar
    per_state = np.zeros(10)
    per_state[0] = 12.0
    trace = success_trace(n_states=10, harmful_per_state=per_state)
    assert safety_rates([trace], 10.0) == (0.0, 1.0)


def test_safety_rates_formula():
    clean = [success_trace() for _ in range(3)]
    dirty = success_trace(n_states=10, harmful_per_state=np.full(10, 50.0))
    s95, s80 = safety_rates(clean + [dirty], 10.0)
    assert s95 == 0.75
    assert s80 == 0.75


def test_safety_rates_strict_inequality():
    per_state = np.full(10, 10.0)  # exactly at the threshold: unsafe
    trace = success_trace(n_states=10, harmful_per_state=per_state)
    assert safety_rates([trace], 10.0) == (0.0, 0.0)
    assert safety_rates([trace], 10.0 + 1e-9) == (1.0, 1.0)


def test_safety_rates_undefined_without_successes():
    assert safety_rates([failed_trace()], 10.0) == (None, None)


def test_ahf_examples():
    assert average_harmful_force([success_trace()]) == 0.0
    a = make_trace([0.0], [2.0], [0], [0])
    b = make_trace([0.0], [4.0], [0], [0])
    assert average_harmful_force([a, b]) == 3.0
    with pytest.raises(MetricError):
        average_harmful_force([])


def test_state_attributions_max_over_ticks():
    harmful = [1.0, 5.0, 2.0, 0.5, 0.25, 7.0]
    plan = [0, 0, 0, 0, 1, 1]
    state = [0, 0, 1, 1, 0, 0]
    trace = make_trace(np.zeros(6), harmful, plan, state)
    assert np.array_equal(state_attributions(trace), [5.0, 2.0, 7.0])


# ---------------------------------------------------------------------------
# randomized brute-force equivalence


def random_corpus(rng, n_traces=40):
    traces = []
    for _ in range(n_traces):
        n_states = int(rng.integers(1, 30))
        ticks_per = int(rng.integers(1, 5))
        n = n_states * ticks_per
        angles = np.cumsum(rng.uniform(0, 0.012, size=n))
        harmful = rng.exponential(6.0, size=n)
        plan = np.repeat(np.arange(n_states) // 8, ticks_per)
        state = np.repeat(np.arange(n_states) % 8, ticks_per)
        crossed = angles[-1] >= SCENE.success_angle
        term = "success" if crossed else rng.choice(["timeout", "grasp_lost"])
        traces.append(make_trace(angles, harmful, plan, state, termination=term))
    return traces


def test_metrics_match_naive_recount_exactly():
    rng = np.random.default_rng(50)
    for _ in range(5):
        traces = random_corpus(rng)
        assert success_rate(traces) == sum(map(naive_success, traces)) / len(traces)
        assert average_harmful_force(traces) == naive_ahf(traces)
        for trace in traces:
            assert np.array_equal(state_attributions(trace),
                                  naive_attributions(trace))
        for f in (0.5, 2.0, 5.0, 10.0, 15.0, 20.0, 100.0):
            assert safety_rates(traces, f) == naive_safety_rates(traces, f)


def test_monotone_in_threshold_and_dominance():
    rng = np.random.default_rng(51)
    traces = random_corpus(rng, n_traces=60)
    grid = np.linspace(0.1, 60.0, 40)
    prev95 = prev80 = -1.0
    for f in grid:
        s95, s80 = safety_rates(traces, f)
        assert s95 is not None
        assert s80 >= s95
        assert s95 >= prev95 and s80 >= prev80
        prev95, prev80 = s95, s80


# ---------------------------------------------------------------------------
# reports


def test_build_report_invariants():
    rng = np.random.default_rng(52)
    traces = random_corpus(rng)
    report = build_report("oracle", "seen", traces)
    assert report.episodes == len(traces)
    assert 0.0 <= report.success_ratio <= 1.0
    for safe, sub in zip(report.num_safe, report.num_sub_safe):
        assert safe <= sub <= report.num_success
    for s95, s80 in zip(report.sar95, report.sar80):
        assert 0.0 <= s95 <= 1.0 and s95 <= s80 <= 1.0
    assert report == MetricReport.from_dict(report.to_dict())


def test_report_validation():
    with pytest.raises(MetricError):
        MetricReport(planner="x", pool="p", episodes=2, num_success=3,
                     success_ratio=1.5, ahf=0.0, thresholds=(5.0,),
                     num_safe=(0,), num_sub_safe=(0,), sar95=(0.0,), sar80=(0.0,))
    with pytest.raises(MetricError):
        build_report("x", "p", [])


def test_report_emission_and_round_trip(tmp_path):
    rng = np.random.default_rng(53)
    scenes = [sample_scene(rng, pool="seen") for _ in range(5)]
    traces = evaluate_fleet(scenes, OraclePlanner(), np.random.default_rng(0))
    report = build_report("oracle", "seen", traces)
    csv_text = report_csv([report])
    assert csv_text.startswith("# doordiff-report v1\n")
    assert "SaR95@5N" in csv_text and "SaR80@20N" in csv_text
    table = report_text([report])
    assert "oracle" in table and "SuR%" in table

    # re-reading traces from disk reproduces the report bit for bit
    reread = []
    for i, trace in enumerate(traces):
        path = tmp_path / f"trace_{i}.jsonl"
        write_trace(trace, path)
        reread.append(read_trace(path))
    report2 = build_report("oracle", "seen", reread)
    assert report2 == report
    assert report_csv([report2]) == csv_text


def test_report_undefined_rates_render_na():
    traces = [failed_trace() for _ in range(3)]
    report = build_report("static", "seen", traces)
    assert report.sar95 == (None,) * 4
    assert "n/a" in report_csv([report])
    assert "n/a" in report_text([report])


def test_reports_with_mixed_thresholds_rejected():
    a = build_report("x", "p", [success_trace()], thresholds=(5.0, 10.0))
    b = build_report("x", "p", [success_trace()], thresholds=(5.0, 15.0))
    with pytest.raises(MetricError):
        report_csv([a, b])
    with pytest.raises(MetricError):
        report_csv([])
