"""Scenario sampling, noisy observations, expert demonstrations, and the
line-delimited episode file format.

An episode's vision estimates are produced by ObservationStream: the hinge
and radius offsets are drawn once per episode (a miscalibrated camera
extrinsic stays miscalibrated for the whole run) while the bearing estimate
gets fresh jitter every frame.  The demonstration expert servoes along the
arc its own vision implies, so the recorded contact forces carry exactly
the information needed to undo the vision bias; labels always come from the
true geometry.

File format (normative): one episode per line; each line is a JSON object
  {"v": 1, "scene": {...}, "termination": "...", "steps": [...]}
with scene fields in SceneConfig declaration order and each step
  {"observation": {"hinge_estimate": [x, y], "radius_estimate": r,
                   "angle_estimate": a, "opening_sign": s},
   "current_state": [x, y], "force_feedback": [fx, fy],
   "label_states": [[x, y], ...]}.
All numbers are decimal text produced by repr-style shortest round-trip
formatting, so read(write(x)) is bit-exact.  A scene pool is the same file
with empty step lists.  The manifest is a JSON sidecar with counts, ranges,
noise levels, and normalization statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from doordiff.diffusion import Normalizer, nominal_arc
from doordiff.world import DoorState, SceneConfig, _step_scalars, handle_position, oracle_plan

# A full opening spans about this many plan horizons; the label spacing
# success_angle / (OPENING_PLANS * L) follows from it.  Two horizons keeps
# the waypoint advance rate comfortably ahead of hinge stiction stalls
# while still forcing several replans per opening.
OPENING_PLANS = 2

# Declared workspace half-width, meters.  Position normalization is pinned
# to this box rather than to the training data envelope so that geometry
# outside the training ranges stays representable by the planner (its
# output clamp sits at 1.5 in normalized units).
WORKSPACE_HALF = 1.6

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Raised for malformed dataset files; messages name the record."""


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class NoiseLevels:
    """Standard deviations of the vision estimates."""

    hinge: float = 0.01
    radius: float = 0.01
    angle: float = 0.02

    def __post_init__(self):
        for name in ("hinge", "radius", "angle"):
            if getattr(self, name) < 0:
                raise ValueError(f"noise level {name} must be >= 0")


@dataclass(frozen=True)
class Observation:
    """Noisy scene descriptor standing in for a visual front end.

    angle_estimate is the world-frame bearing of the handle as seen from
    the hinge; together with the hinge and radius estimates it pins down
    the believed arc and the believed position on it.
    """

    hinge_estimate: tuple[float, float]
    radius_estimate: float
    angle_estimate: float
    opening_sign: float

    def __post_init__(self):
        values = (*self.hinge_estimate, self.radius_estimate,
                  self.angle_estimate, self.opening_sign)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("observation fields must be finite")
        if self.radius_estimate <= 0:
            raise ValueError(f"radius_estimate must be > 0, got {self.radius_estimate}")

    def to_vector(self) -> np.ndarray:
        """Normative order: hinge_x, hinge_y, radius, angle, opening_sign."""
        return np.array([
            self.hinge_estimate[0], self.hinge_estimate[1],
            self.radius_estimate, self.angle_estimate, self.opening_sign,
        ])


def observe(scene: SceneConfig, door_state: DoorState, rng: np.random.Generator,
            noise: NoiseLevels = NoiseLevels()) -> Observation:
    """True values plus independent Gaussian noise, fresh each call."""
    bearing = scene.initial_angle + scene.opening_sign * door_state.angle
    hx = scene.hinge_position[0] + noise.hinge * rng.standard_normal()
    hy = scene.hinge_position[1] + noise.hinge * rng.standard_normal()
    radius = scene.door_radius + noise.radius * rng.standard_normal()
    return Observation(
        hinge_estimate=(hx, hy),
        radius_estimate=max(radius, 0.05),
        angle_estimate=bearing + noise.angle * rng.standard_normal(),
        opening_sign=float(scene.opening_sign),
    )


class ObservationStream:
    """Vision estimates for one episode: frozen hinge/radius offsets plus
    per-frame bearing jitter."""

    def __init__(self, scene: SceneConfig, rng: np.random.Generator,
                 noise: NoiseLevels = NoiseLevels()):
        self._scene = scene
        self._rng = rng
        self._noise = noise
        self.hinge_estimate = (
            scene.hinge_position[0] + noise.hinge * rng.standard_normal(),
            scene.hinge_position[1] + noise.hinge * rng.standard_normal(),
        )
        self.radius_estimate = max(
            scene.door_radius + noise.radius * rng.standard_normal(), 0.05
        )

    def observe(self, door_state: DoorState) -> Observation:
        scene = self._scene
        bearing = scene.initial_angle + scene.opening_sign * door_state.angle
        return Observation(
            hinge_estimate=self.hinge_estimate,
            radius_estimate=self.radius_estimate,
            angle_estimate=bearing + self._noise.angle * self._rng.standard_normal(),
            opening_sign=float(scene.opening_sign),
        )


# ---------------------------------------------------------------------------
# scene sampling


def _pair(lo: float, hi: float) -> tuple[float, float]:
    return (float(lo), float(hi))


@dataclass(frozen=True)
class SceneRanges:
    """Per-field (low, high) sampling ranges for scene randomization."""

    door_radius: tuple[float, float]
    hinge_x: tuple[float, float]
    hinge_y: tuple[float, float] = (-0.25, 0.25)
    initial_angle: tuple[float, float] = (-0.4363323129985824, 0.4363323129985824)
    opening_sign: tuple[float, float] = (-1.0, 1.0)
    controller_stiffness: tuple[float, float] = (300.0, 1200.0)
    controller_damping: tuple[float, float] = (10.0, 60.0)
    hinge_damping: tuple[float, float] = (0.5, 3.0)
    hinge_friction: tuple[float, float] = (0.0, 1.5)
    door_inertia: tuple[float, float] = (2.0, 10.0)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"range {f.name} must be finite")
            if lo > hi:
                raise ValueError(f"range {f.name} has min {lo} > max {hi}")

    @staticmethod
    def seen() -> "SceneRanges":
        return SceneRanges(door_radius=(0.5, 0.9), hinge_x=(-0.25, 0.05))

    @staticmethod
    def unseen() -> "SceneRanges":
        # door radius and hinge offset deliberately outside the seen pool
        return SceneRanges(door_radius=(1.0, 1.1), hinge_x=(0.12, 0.25))

    def to_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "SceneRanges":
        return SceneRanges(**{k: _pair(*v) for k, v in d.items()})


def sample_scene(rng: np.random.Generator, ranges: SceneRanges | None = None,
                 pool: str = "seen") -> SceneConfig:
    """Draw one scene; fields are sampled in declaration order."""
    if ranges is None:
        if pool not in ("seen", "unseen"):
            raise ValueError(f"pool must be 'seen' or 'unseen', got {pool!r}")
        ranges = SceneRanges.seen() if pool == "seen" else SceneRanges.unseen()

    def draw(pair):
        lo, hi = pair
        return lo if lo == hi else float(rng.uniform(lo, hi))

    sign_lo, sign_hi = ranges.opening_sign
    if sign_lo == sign_hi:
        sign = int(sign_lo)
    else:
        sign = int(rng.choice([sign_lo, sign_hi]))
    return SceneConfig(
        hinge_position=(draw(ranges.hinge_x), draw(ranges.hinge_y)),
        door_radius=draw(ranges.door_radius),
        initial_angle=draw(ranges.initial_angle),
        opening_sign=sign,
        door_inertia=draw(ranges.door_inertia),
        hinge_damping=draw(ranges.hinge_damping),
        hinge_friction=draw(ranges.hinge_friction),
        controller_stiffness=draw(ranges.controller_stiffness),
        controller_damping=draw(ranges.controller_damping),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def sample_scene_pool(count: int, rng: np.random.Generator,
                      ranges: SceneRanges | None = None,
                      pool: str = "seen") -> list[SceneConfig]:
    return [sample_scene(rng, ranges, pool) for _ in range(count)]


# ---------------------------------------------------------------------------
# demonstrations


@dataclass(frozen=True)
class DemoStep:
    observation: Observation
    current_state: tuple[float, float]
    force_feedback: tuple[float, float]
    label_states: np.ndarray  # (L, 2) world-frame arc waypoints


@dataclass(frozen=True)
class Demonstration:
    scene: SceneConfig
    steps: tuple[DemoStep, ...]
    termination: str = "success"


def default_angle_step(scene: SceneConfig, horizon: int) -> float:
    """Plan-state spacing: a full opening spans OPENING_PLANS horizons."""
    return scene.success_angle / (OPENING_PLANS * horizon)


def generate_demo(scene: SceneConfig, horizon: int, controller_rate: int,
                  rng: np.random.Generator, *,
                  noise: NoiseLevels = NoiseLevels(),
                  record_every: int = 4,
                  angle_step: float | None = None,
                  waypoint_margin: float = 1.25) -> Demonstration:
    """Roll out the vision-servo expert and record training examples.

    The expert commits to the arc implied by its episode's vision estimates
    (hinge, radius, and one anchor bearing) and tracks it open loop: one
    believed waypoint per planning tick, linearly interpolated over
    ``controller_rate`` physics ticks.  Every ``record_every`` planning
    ticks it records the current observation, end-effector position, raw
    contact force, and the next ``horizon`` waypoints of the true arc.
    Ends at success, the time budget, or a broken grasp.

    On top of the believed waypoints the expert wanders by a slow, smoothed
    exploration dither whose amplitude matches its own visual uncertainty
    (zero when observations are exact).  The dither spreads the recorded
    contact force independently of the believed-arc error, so a planner
    regressing corrections onto force learns a deliberately conservative
    gain: one that stays contractive in closed loop even for the stiffest
    grasp in the scene distribution, where the same geometric error
    produces several times more force.  It also exposes the off-arc
    command states that a replanning executor actually visits.
    """
    if controller_rate < 1 or record_every < 1:
        raise ValueError("controller_rate and record_every must be >= 1")
    if angle_step is None:
        angle_step = default_angle_step(scene, horizon)

    stream = ObservationStream(scene, rng, noise)
    anchor = stream.observe(DoorState(0.0, 0.0)).angle_estimate
    n_way = int(math.ceil(scene.success_angle * waypoint_margin / angle_step))
    bearings = anchor + scene.opening_sign * angle_step * np.arange(n_way + 1)
    way_x = stream.hinge_estimate[0] + stream.radius_estimate * np.cos(bearings)
    way_y = stream.hinge_estimate[1] + stream.radius_estimate * np.sin(bearings)

    # exploration dither: stationary AR(1) per axis, one value per waypoint;
    # amplitude follows the vision uncertainty but stays well inside the
    # grip separation limit
    dither_sigma = min(math.hypot(noise.hinge, noise.radius),
                       0.25 * scene.grasp_break_distance)
    if dither_sigma > 0.0:
        rho = 0.9
        kick = dither_sigma * math.sqrt(1.0 - rho * rho)
        steps_d = rng.standard_normal((n_way + 1, 2))
        dither = np.empty((n_way + 1, 2))
        dither[0] = dither_sigma * steps_d[0]
        for j in range(1, n_way + 1):
            dither[j] = rho * dither[j - 1] + kick * steps_d[j]
        way_x = way_x + dither[:, 0]
        way_y = way_y + dither[:, 1]

    angle, omega = 0.0, 0.0
    hx, hy = handle_position(scene, 0.0)
    fx, fy = 0.0, 0.0
    max_ticks = int(round(scene.episode_time_budget / scene.dt))
    seg_time = controller_rate * scene.dt
    tick = 0
    steps: list[DemoStep] = []
    termination = "stalled"

    for j in range(n_way):
        if j % record_every == 0:
            obs = stream.observe(DoorState(angle, omega))
            labels = oracle_plan(scene, angle, horizon, angle_step)
            steps.append(DemoStep(
                observation=obs,
                current_state=(hx, hy),
                force_feedback=(fx, fy),
                label_states=labels,
            ))
        ax, ay = way_x[j], way_y[j]
        dx, dy = way_x[j + 1] - ax, way_y[j + 1] - ay
        vx, vy = dx / seg_time, dy / seg_time
        broke = False
        for i in range(1, controller_rate + 1):
            frac = i / controller_rate
            cmd_x, cmd_y = ax + dx * frac, ay + dy * frac
            angle, omega, fx, fy, _, _, hx, hy, grasp = _step_scalars(
                scene, angle, omega, cmd_x, cmd_y, vx, vy, 0.0, 0.0
            )
            tick += 1
            if not grasp:
                termination = "grasp_lost"
                broke = True
                break
            if angle >= scene.success_angle:
                termination = "success"
                broke = True
                break
            if tick >= max_ticks:
                termination = "timeout"
                broke = True
                break
        if broke:
            break
    return Demonstration(scene=scene, steps=tuple(steps), termination=termination)


def generate_demos(count: int, rng: np.random.Generator, *,
                   ranges: SceneRanges | None = None, pool: str = "seen",
                   horizon: int = 32, controller_rate: int = 8,
                   noise: NoiseLevels = NoiseLevels(), record_every: int = 4,
                   max_attempts_factor: int = 20) -> tuple[list[Demonstration], int]:
    """Generate demos, discarding and resampling broken-grasp episodes.

    Returns (demos, discarded_count).
    """
    demos: list[Demonstration] = []
    discarded = 0
    attempts = 0
    budget = max_attempts_factor * max(count, 1)
    while len(demos) < count:
        attempts += 1
        if attempts > budget:
            raise RuntimeError(
                f"gave up after {attempts - 1} attempts for {count} demos "
                f"({discarded} grasp breaks)"
            )
        scene = sample_scene(rng, ranges, pool)
        demo = generate_demo(scene, horizon, controller_rate, rng,
                             noise=noise, record_every=record_every)
        if demo.termination == "grasp_lost":
            discarded += 1
            continue
        demos.append(demo)
    return demos, discarded


# ---------------------------------------------------------------------------
# training arrays


def training_arrays(demos: list[Demonstration]):
    """Flatten demo records into training arrays.

    Returns (plans, observations, current_states, forces, groups) where
    groups lists the record indices belonging to each demo, for per-episode
    subsampling during training.
    """
    plans, obs, cur, frc, groups = [], [], [], [], []
    offset = 0
    for demo in demos:
        n = len(demo.steps)
        if n == 0:
            continue
        for s in demo.steps:
            plans.append(s.label_states)
            obs.append(s.observation.to_vector())
            cur.append(s.current_state)
            frc.append(s.force_feedback)
        groups.append(np.arange(offset, offset + n))
        offset += n
    if not plans:
        raise DatasetError("no recorded steps in demonstration list")
    return (np.array(plans), np.array(obs), np.array(cur), np.array(frc), groups)


def fit_normalizer(demos: list[Demonstration]) -> Normalizer:
    plans, obs, cur, frc, _ = training_arrays(demos)
    corners = np.array([[-WORKSPACE_HALF, -WORKSPACE_HALF],
                        [WORKSPACE_HALF, WORKSPACE_HALF]])
    positions = np.concatenate([plans.reshape(-1, 2), cur, corners])
    offsets = plans - nominal_arc(obs, plans.shape[1])
    return Normalizer.fit(positions, obs[:, 2], obs[:, 3], frc, offsets)


# ---------------------------------------------------------------------------
# serialization


def scene_to_dict(scene: SceneConfig) -> dict:
    d = {}
    for f in fields(SceneConfig):
        v = getattr(scene, f.name)
        if isinstance(v, tuple):
            d[f.name] = [float(x) for x in v]
        elif f.name in ("seed", "opening_sign"):
            d[f.name] = int(v)
        else:
            d[f.name] = float(v)
    return d


def scene_from_dict(d: dict) -> SceneConfig:
    kw = dict(d)
    kw["hinge_position"] = tuple(kw["hinge_position"])
    return SceneConfig(**kw)


def _step_to_dict(s: DemoStep) -> dict:
    o = s.observation
    return {
        "observation": {
            "hinge_estimate": [float(o.hinge_estimate[0]), float(o.hinge_estimate[1])],
            "radius_estimate": float(o.radius_estimate),
            "angle_estimate": float(o.angle_estimate),
            "opening_sign": float(o.opening_sign),
        },
        "current_state": [float(s.current_state[0]), float(s.current_state[1])],
        "force_feedback": [float(s.force_feedback[0]), float(s.force_feedback[1])],
        "label_states": [[float(x), float(y)] for x, y in np.asarray(s.label_states)],
    }


def _step_from_dict(d: dict) -> DemoStep:
    o = d["observation"]
    return DemoStep(
        observation=Observation(
            hinge_estimate=(o["hinge_estimate"][0], o["hinge_estimate"][1]),
            radius_estimate=o["radius_estimate"],
            angle_estimate=o["angle_estimate"],
            opening_sign=o["opening_sign"],
        ),
        current_state=(d["current_state"][0], d["current_state"][1]),
        force_feedback=(d["force_feedback"][0], d["force_feedback"][1]),
        label_states=np.array(d["label_states"], dtype=np.float64),
    )


def write_dataset(demos: list[Demonstration], path) -> None:
    with open(path, "w") as fh:
        for demo in demos:
            record = {
                "v": FORMAT_VERSION,
                "scene": scene_to_dict(demo.scene),
                "termination": demo.termination,
                "steps": [_step_to_dict(s) for s in demo.steps],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Demonstration]:
    demos: list[Demonstration] = []
    label_len: int | None = None
    with open(path) as fh:
        for index, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"record {index}: invalid JSON ({e})") from None
            if not isinstance(record, dict) or record.get("v") != FORMAT_VERSION:
                raise DatasetError(
                    f"record {index}: unsupported format version {record.get('v')!r}"
                    if isinstance(record, dict)
                    else f"record {index}: not an object"
                )
            try:
                steps = tuple(_step_from_dict(s) for s in record["steps"])
                demo = Demonstration(
                    scene=scene_from_dict(record["scene"]),
                    steps=steps,
                    termination=record.get("termination", "success"),
                )
            except (KeyError, TypeError, IndexError, ValueError) as e:
                raise DatasetError(f"record {index}: schema violation ({e})") from None
            for s in steps:
                n = len(s.label_states)
                if label_len is None:
                    label_len = n
                elif n != label_len:
                    raise DatasetError(
                        f"record {index}: label length {n} differs from {label_len}"
                    )
            demos.append(demo)
    return demos


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DatasetManifest:
    """Sidecar describing a generated dataset; counts are per split."""

    global_seed: int
    horizon: int
    controller_rate: int
    record_every: int
    counts: dict
    discarded: dict
    noise: dict
    ranges: dict
    normalization: dict
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(**d)


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest {path}: invalid JSON ({e})") from None
    if d.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"manifest {path}: unsupported format version {d.get('format_version')!r}"
        )
    try:
        return DatasetManifest.from_dict(d)
    except TypeError as e:
        raise DatasetError(f"manifest {path}: schema violation ({e})") from None
