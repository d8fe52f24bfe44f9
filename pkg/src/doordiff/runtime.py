"""Closed-loop execution: receding-horizon replanning, inverse dynamics,
disturbance injection, and episode traces.

A rollout alternates planning and execution.  At each replan boundary the
executor observes the scene, bundles the observation with the current
end-effector position and the force measured on the last executed tick,
asks the planner for a fresh state sequence, and tracks ``replan_every``
of its states through the impedance controller, starting from the state
nearest the end effector.  A window ends early when the measured force
jumps away from the reading the plan was conditioned on, so contact
changes replan promptly instead of waiting out the window.  Every physics
tick lands in the trace; the benchmark module consumes nothing else.

Trace file (normative): line 1 is a JSON header
  {"v": 1, "kind": "trace", "scene": {...}, "termination": "...",
   "diagnostic": "..."}
and every following line is one tick,
  [time, angle, omega, ee_x, ee_y, cmd_x, cmd_y, fx, fy,
   effective, harmful, plan_index, state_index]
with the same lossless decimal float formatting as the dataset files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from doordiff.dataset import (
    NoiseLevels,
    ObservationStream,
    scene_from_dict,
    scene_to_dict,
    default_angle_step,
)
from doordiff.diffusion import DiffusionPlanner, NumericError, StatePlan
from doordiff.world import DoorState, SceneConfig, _step_scalars, handle_position, oracle_plan


class PlannerFailure(RuntimeError):
    """Raised by a planner that cannot produce a finite plan."""


class TraceError(ValueError):
    """Raised for malformed trace files; messages name the line."""


TRACE_VERSION = 1

TERMINATIONS = ("success", "timeout", "grasp_lost", "planner_failure")


# ---------------------------------------------------------------------------
# planners


@dataclass(frozen=True)
class PlanRequest:
    """Everything the executor knows at a replan boundary.

    Planners take what they are entitled to: the oracle reads the true
    scene and angle, learned planners read only the noisy observation,
    the end-effector position, and the latest contact force.
    """

    scene: SceneConfig
    angle: float
    observation: object
    current_state: tuple[float, float]
    force: tuple[float, float]


class OraclePlanner:
    """Ground-truth arc follower; the upper baseline and data-check tool."""

    def __init__(self, horizon: int = 32, angle_step: float | None = None):
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        self.horizon = horizon
        self.angle_step = angle_step

    def plan(self, request: PlanRequest, rng: np.random.Generator) -> np.ndarray:
        step = self.angle_step
        if step is None:
            step = default_angle_step(request.scene, self.horizon)
        return oracle_plan(request.scene, request.angle, self.horizon, step)


class DiffusionPolicy:
    """Wraps a DiffusionPlanner as a rollout planner.

    The same object serves both per-episode planning and fleet-batched
    planning; sampling failures surface as PlannerFailure.
    """

    def __init__(self, planner: DiffusionPlanner, use_ema: bool = True):
        self.planner = planner
        self.use_ema = use_ema
        self.horizon = planner.config.horizon

    def _conditions(self, requests):
        obs = np.array([r.observation.to_vector() for r in requests])
        cur = np.array([r.current_state for r in requests])
        frc = np.array([r.force for r in requests])
        return self.planner.make_conditions(obs, cur, frc)

    def plan(self, request: PlanRequest, rng: np.random.Generator) -> np.ndarray:
        return self.plan_batch([request], rng)[0]

    def plan_batch(self, requests, rng: np.random.Generator) -> np.ndarray:
        cond = self._conditions(requests)
        try:
            out: StatePlan = self.planner.sample(cond, rng, use_ema=self.use_ema)
        except NumericError as e:
            raise PlannerFailure(str(e)) from None
        states = out.states
        if len(requests) == 1:
            states = states.reshape((1,) + states.shape[-2:])
        return states


# ---------------------------------------------------------------------------
# disturbances


@dataclass(frozen=True)
class DisturbanceSpec:
    """Periodic impulsive positional disturbance.

    Every ``round(1 / (frequency * dt))`` ticks a fresh random unit
    direction is drawn and the command setpoint is offset by ``deviation``
    along it for ``duration_ticks`` ticks (a None duration holds the offset
    until the next impulse).  Directions derive from ``seed`` and the
    impulse index, so the offset is a pure function of the tick.
    """

    frequency: float = 1.5
    deviation: float = 0.03
    seed: int = 0
    duration_ticks: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.frequency) and self.frequency > 0):
            raise ValueError(f"frequency must be > 0, got {self.frequency}")
        if not (math.isfinite(self.deviation) and self.deviation >= 0):
            raise ValueError(f"deviation must be >= 0, got {self.deviation}")
        if self.duration_ticks is not None and self.duration_ticks < 1:
            raise ValueError(f"duration_ticks must be >= 1, got {self.duration_ticks}")

    def interval_ticks(self, dt: float) -> int:
        return max(int(round(1.0 / (self.frequency * dt))), 1)


def disturbance_offset(spec: DisturbanceSpec | None, tick: int, dt: float) -> np.ndarray:
    """Offset applied to the executed command at ``tick`` (0-based)."""
    if spec is None or spec.deviation == 0.0:
        return np.zeros(2)
    every = spec.interval_ticks(dt)
    index = tick // every
    within = tick - index * every
    duration = every if spec.duration_ticks is None else spec.duration_ticks
    if within >= duration:
        return np.zeros(2)
    theta = np.random.default_rng((spec.seed, index)).uniform(0.0, 2.0 * math.pi)
    return spec.deviation * np.array([math.cos(theta), math.sin(theta)])


# ---------------------------------------------------------------------------
# inverse dynamics


def inverse_dynamics(plan, tick_within_plan: int, physics_per_plan_state: int,
                     *, dt: float = 0.01, anchor=None):
    """Command position and velocity for one tick of plan tracking.

    The tracked path interpolates linearly from state to state, spending
    ``physics_per_plan_state`` ticks per segment; the segment into state 0
    starts at ``anchor`` (state 0 itself when no anchor is given, which
    makes the first segment a hold).  The command at the last tick of
    segment j is exactly plan state j; the velocity is the per-tick finite
    difference of that path.
    """
    states = plan.states if isinstance(plan, StatePlan) else np.asarray(plan)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError(f"plan must be a non-empty (L, 2) array, got shape {states.shape}")
    if tick_within_plan < 0 or physics_per_plan_state < 1:
        raise ValueError("tick_within_plan must be >= 0 and physics_per_plan_state >= 1")
    j = tick_within_plan // physics_per_plan_state
    if j >= len(states):
        raise ValueError(f"tick {tick_within_plan} runs past the {len(states)}-state plan")
    start = np.asarray(anchor, dtype=np.float64) if j == 0 and anchor is not None else states[max(j - 1, 0)]
    end = states[j]
    frac = ((tick_within_plan % physics_per_plan_state) + 1) / physics_per_plan_state
    seg_time = physics_per_plan_state * dt
    position = start + (end - start) * frac
    velocity = (end - start) / seg_time
    return position, velocity


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class EpisodeTrace:
    """One closed-loop episode, stored column-wise over physics ticks."""

    scene: SceneConfig
    times: np.ndarray
    angles: np.ndarray
    omegas: np.ndarray
    ee_positions: np.ndarray     # (N, 2)
    commands: np.ndarray         # (N, 2) setpoint before disturbance
    forces_raw: np.ndarray       # (N, 2)
    effective: np.ndarray
    harmful: np.ndarray
    plan_indices: np.ndarray
    state_indices: np.ndarray
    termination: str
    diagnostic: str = ""

    def __post_init__(self):
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")

    @property
    def n_ticks(self) -> int:
        return len(self.times)

    @property
    def success(self) -> bool:
        return self.termination == "success"


class _TraceRecorder:
    """Accumulates tick columns during a rollout."""

    def __init__(self, scene: SceneConfig):
        self.scene = scene
        self.rows = []

    def add(self, time, angle, omega, ee, cmd, fx, fy, effective, harmful,
            plan_index, state_index):
        self.rows.append((time, angle, omega, ee[0], ee[1], cmd[0], cmd[1],
                          fx, fy, effective, harmful, plan_index, state_index))

    def finish(self, termination: str, diagnostic: str = "") -> EpisodeTrace:
        if self.rows:
            cols = np.array(self.rows, dtype=np.float64).T
        else:
            cols = np.zeros((13, 0))
        return EpisodeTrace(
            scene=self.scene,
            times=cols[0],
            angles=cols[1],
            omegas=cols[2],
            ee_positions=cols[3:5].T.copy(),
            commands=cols[5:7].T.copy(),
            forces_raw=cols[7:9].T.copy(),
            effective=cols[9],
            harmful=cols[10],
            plan_indices=cols[11].astype(np.int64),
            state_indices=cols[12].astype(np.int64),
            termination=termination,
            diagnostic=diagnostic,
        )


# ---------------------------------------------------------------------------
# rollout


class _EpisodeState:
    """Mutable per-episode bookkeeping shared by single and fleet rollouts."""

    def __init__(self, scene: SceneConfig, rng: np.random.Generator,
                 noise: NoiseLevels, disturbance: DisturbanceSpec | None):
        self.scene = scene
        self.stream = ObservationStream(scene, rng, noise)
        self.disturbance = disturbance
        self.angle = 0.0
        self.omega = 0.0
        ee = handle_position(scene, 0.0)
        self.ee = (float(ee[0]), float(ee[1]))
        self.force = (0.0, 0.0)
        self.tick = 0
        self.max_ticks = int(round(scene.episode_time_budget / scene.dt))
        self.recorder = _TraceRecorder(scene)
        self.plan_index = -1
        self.trace: EpisodeTrace | None = None

    def request(self) -> PlanRequest:
        obs = self.stream.observe(DoorState(self.angle, self.omega))
        return PlanRequest(scene=self.scene, angle=self.angle, observation=obs,
                           current_state=self.ee, force=self.force)

    def execute_window(self, states: np.ndarray, replan_every: int,
                       physics_per_plan_state: int,
                       force_replan_threshold: float | None = 10.0) -> None:
        """Track replan_every plan states; sets .trace when the episode ends.

        Execution starts at the plan state nearest the end effector: the
        planner's bearing estimate may place its sequence slightly ahead of
        or behind the true position, and starting at the nearest state
        keeps the executed window phase-aligned with the door instead of
        with that estimate.  The window also ends early once the measured
        force has moved more than force_replan_threshold newtons away from
        the reading the plan was conditioned on (never before two full
        states, so replans stay bounded); the next window then plans
        against fresh tactile input.
        """
        scene = self.scene
        dt = scene.dt
        if not np.all(np.isfinite(states)):
            self.trace = self.recorder.finish(
                "planner_failure", "non-finite states in sampled plan")
            return
        self.plan_index += 1
        anchor = np.array(self.ee)
        f0x, f0y = self.force
        search = states[: min(len(states), 2 * replan_every)]
        j0 = int(np.argmin(np.sum((search - anchor) ** 2, axis=1)))
        states = states[j0:]
        window = min(replan_every, len(states))
        settle = 2 * physics_per_plan_state - 1
        for tau in range(window * physics_per_plan_state):
            j = tau // physics_per_plan_state
            cmd, vel = inverse_dynamics(states, tau, physics_per_plan_state,
                                        dt=dt, anchor=anchor)
            dist = disturbance_offset(self.disturbance, self.tick, dt)
            (self.angle, self.omega, fx, fy, effective, harmful,
             hx, hy, grasp) = _step_scalars(
                scene, self.angle, self.omega, cmd[0], cmd[1], vel[0], vel[1],
                dist[0], dist[1])
            self.tick += 1
            self.force = (fx, fy)
            self.ee = (hx, hy)
            self.recorder.add(self.tick * dt, self.angle, self.omega,
                              (hx, hy), cmd, fx, fy, effective, harmful,
                              self.plan_index, j0 + j)
            if not grasp:
                self.trace = self.recorder.finish("grasp_lost")
                return
            if self.angle >= scene.success_angle:
                self.trace = self.recorder.finish("success")
                return
            if self.tick >= self.max_ticks:
                self.trace = self.recorder.finish("timeout")
                return
            if (force_replan_threshold is not None and tau >= settle
                    and math.hypot(fx - f0x, fy - f0y) > force_replan_threshold):
                return

    def fail(self, diagnostic: str) -> None:
        self.trace = self.recorder.finish("planner_failure", diagnostic)


def rollout(scene: SceneConfig, planner, rng: np.random.Generator, *,
            replan_every: int = 8, physics_per_plan_state: int = 8,
            disturbance: DisturbanceSpec | None = None,
            noise: NoiseLevels = NoiseLevels(),
            force_replan_threshold: float | None = 10.0) -> EpisodeTrace:
    """Run one closed-loop episode and return its full trace.

    The condition at each replan uses the force measured on the last
    executed tick of the previous window (zero before any motion).  A
    window normally covers replan_every states but ends early when the
    measured force jumps more than force_replan_threshold newtons away
    from its value at the boundary (None disables this), so sudden
    contact changes reach the planner without waiting out the window.
    """
    if replan_every < 1:
        raise ValueError(f"replan_every must be >= 1, got {replan_every}")
    ep = _EpisodeState(scene, rng, noise, disturbance)
    while ep.trace is None:
        try:
            states = np.asarray(planner.plan(ep.request(), rng), dtype=np.float64)
        except PlannerFailure as e:
            ep.fail(str(e))
            break
        ep.execute_window(states, replan_every, physics_per_plan_state,
                          force_replan_threshold)
    return ep.trace


def evaluate_fleet(scenes, planner, rng: np.random.Generator, *,
                   replan_every: int = 8, physics_per_plan_state: int = 8,
                   disturbance: DisturbanceSpec | None = None,
                   noise: NoiseLevels = NoiseLevels(),
                   force_replan_threshold: float | None = 10.0) -> list[EpisodeTrace]:
    """Roll out one episode per scene, batching planner calls in lockstep.

    Episodes advance together one replan window at a time; all active
    episodes share each batched planner call, which keeps diffusion
    sampling throughput high.  Results are deterministic given the rng but
    do not bit-match per-episode rollout() calls, whose noise streams
    differ.  Each episode gets its own observation stream seeded from the
    master rng and, when a disturbance is given, its own direction seed.
    """
    scenes = list(scenes)
    episodes = []
    for i, scene in enumerate(scenes):
        ep_rng = np.random.default_rng(rng.integers(0, 2**63))
        spec = None
        if disturbance is not None:
            spec = replace(disturbance, seed=disturbance.seed * 1000003 + i)
        episodes.append(_EpisodeState(scene, ep_rng, noise, spec))

    batched = hasattr(planner, "plan_batch")
    while True:
        active = [ep for ep in episodes if ep.trace is None]
        if not active:
            break
        if batched:
            requests = [ep.request() for ep in active]
            try:
                plans = planner.plan_batch(requests, rng)
            except PlannerFailure as e:
                for ep in active:
                    ep.fail(str(e))
                break
            for ep, states in zip(active, plans):
                ep.execute_window(np.asarray(states, dtype=np.float64),
                                  replan_every, physics_per_plan_state,
                                  force_replan_threshold)
        else:
            for ep in active:
                try:
                    states = np.asarray(planner.plan(ep.request(), rng),
                                        dtype=np.float64)
                except PlannerFailure as e:
                    ep.fail(str(e))
                    continue
                ep.execute_window(states, replan_every, physics_per_plan_state,
                                  force_replan_threshold)
    return [ep.trace for ep in episodes]


# ---------------------------------------------------------------------------
# trace files


def write_trace(trace: EpisodeTrace, path) -> None:
    header = {
        "v": TRACE_VERSION,
        "kind": "trace",
        "scene": scene_to_dict(trace.scene),
        "termination": trace.termination,
        "diagnostic": trace.diagnostic,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i in range(trace.n_ticks):
            row = [
                float(trace.times[i]), float(trace.angles[i]), float(trace.omegas[i]),
                float(trace.ee_positions[i, 0]), float(trace.ee_positions[i, 1]),
                float(trace.commands[i, 0]), float(trace.commands[i, 1]),
                float(trace.forces_raw[i, 0]), float(trace.forces_raw[i, 1]),
                float(trace.effective[i]), float(trace.harmful[i]),
                int(trace.plan_indices[i]), int(trace.state_indices[i]),
            ]
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_trace(path) -> EpisodeTrace:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TraceError("line 1: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise TraceError(f"line 1: invalid JSON ({e})") from None
    if not isinstance(header, dict) or header.get("kind") != "trace":
        raise TraceError("line 1: not a trace header")
    if header.get("v") != TRACE_VERSION:
        raise TraceError(f"line 1: unsupported trace version {header.get('v')!r}")
    rows = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceError(f"line {number}: invalid JSON ({e})") from None
        if not isinstance(row, list) or len(row) != 13:
            raise TraceError(f"line {number}: expected 13 tick fields")
        rows.append(row)
    try:
        scene = scene_from_dict(header["scene"])
        termination = header["termination"]
        diagnostic = header.get("diagnostic", "")
    except (KeyError, TypeError) as e:
        raise TraceError(f"line 1: schema violation ({e})") from None
    cols = np.array(rows, dtype=np.float64).T if rows else np.zeros((13, 0))
    try:
        return EpisodeTrace(
            scene=scene,
            times=cols[0], angles=cols[1], omegas=cols[2],
            ee_positions=cols[3:5].T.copy(), commands=cols[5:7].T.copy(),
            forces_raw=cols[7:9].T.copy(), effective=cols[9], harmful=cols[10],
            plan_indices=cols[11].astype(np.int64),
            state_indices=cols[12].astype(np.int64),
            termination=termination, diagnostic=diagnostic,
        )
    except ValueError as e:
        raise TraceError(f"line 1: {e}") from None
