"""Planar door world: arc geometry, impedance contact forces, and hinge dynamics.

The door is a rigid panel rotating about a fixed hinge in the plane.  The
end-effector grips the handle at radius ``door_radius`` from the hinge, so as
long as the grasp holds the end-effector is constrained to the handle arc.
A spring-damper controller pulls the handle toward a commanded position;
the force component along the arc tangent does useful work ("effective"),
the component normal to the arc fights the hinge constraint ("harmful").

Angles: the door opening angle ``theta`` measures progress along the opening
direction and is always >= 0 (0 = closed).  The world-frame bearing of the
handle as seen from the hinge is ``initial_angle + opening_sign * theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Velocity magnitudes below this band are eligible for stiction capture.
STICTION_BAND = 1e-4

# Tolerance on |norm(tangent) - 1| accepted by decompose_force.
UNIT_TOLERANCE = 1e-6


class GeometryError(ValueError):
    """Raised for geometrically invalid inputs (non-unit tangent, bad scene)."""


@dataclass(frozen=True)
class SceneConfig:
    """Full parameterization of one door scene.

    Attributes:
        hinge_position: world position of the hinge axis, meters.
        door_radius: hinge-to-handle distance, meters.
        initial_angle: world bearing of the handle when closed, radians.
        opening_sign: +1 (counter-clockwise opening) or -1 (clockwise).
        door_inertia: rotational inertia about the hinge, kg m^2.
        hinge_damping: viscous hinge coefficient, N m s / rad.
        hinge_friction: Coulomb friction torque magnitude, N m.
        controller_stiffness: impedance spring constant, N / m.
        controller_damping: impedance damper constant, N s / m.
        grasp_break_distance: grip separation that ends the grasp, meters.
        success_angle: opening angle that counts as success, radians.
        dt: physics step, seconds.
        episode_time_budget: wall-clock budget of one episode, seconds.
        seed: scene-level random seed recorded with the scene.
    """

    hinge_position: tuple[float, float] = (0.0, 0.0)
    door_radius: float = 0.8
    initial_angle: float = 0.0
    opening_sign: int = 1
    door_inertia: float = 4.0
    hinge_damping: float = 1.5
    hinge_friction: float = 0.5
    controller_stiffness: float = 600.0
    controller_damping: float = 30.0
    grasp_break_distance: float = 0.08
    success_angle: float = math.pi / 6.0
    dt: float = 0.01
    episode_time_budget: float = 12.0
    seed: int = 0

    def __post_init__(self) -> None:
        positive = {
            "door_radius": self.door_radius,
            "door_inertia": self.door_inertia,
            "controller_stiffness": self.controller_stiffness,
            "grasp_break_distance": self.grasp_break_distance,
            "success_angle": self.success_angle,
            "dt": self.dt,
            "episode_time_budget": self.episode_time_budget,
        }
        for name, value in positive.items():
            if not (math.isfinite(value) and value > 0.0):
                raise GeometryError(f"{name} must be finite and > 0, got {value!r}")
        nonnegative = {
            "hinge_damping": self.hinge_damping,
            "hinge_friction": self.hinge_friction,
            "controller_damping": self.controller_damping,
        }
        for name, value in nonnegative.items():
            if not (math.isfinite(value) and value >= 0.0):
                raise GeometryError(f"{name} must be finite and >= 0, got {value!r}")
        if self.opening_sign not in (-1, 1):
            raise GeometryError(f"opening_sign must be +1 or -1, got {self.opening_sign!r}")
        hx, hy = self.hinge_position
        if not (math.isfinite(hx) and math.isfinite(hy) and math.isfinite(self.initial_angle)):
            raise GeometryError("hinge_position and initial_angle must be finite")


@dataclass(frozen=True)
class DoorState:
    """Instantaneous hinge state: opening angle (>= 0) and angular velocity."""

    angle: float = 0.0
    angular_velocity: float = 0.0


@dataclass(frozen=True)
class ForceSample:
    """A contact force split against the local arc frame.

    ``raw`` is the world-frame force vector; ``effective`` is its signed
    component along the arc tangent (positive opens the door); ``harmful``
    is the magnitude of the component normal to the arc.  All fields may be
    batched: ``raw`` of shape (..., 2) yields effective/harmful of shape (...).
    """

    raw: np.ndarray
    effective: float | np.ndarray
    harmful: float | np.ndarray


@dataclass(frozen=True)
class StepResult:
    """Outcome of one physics step."""

    door_state: DoorState
    ee_position: np.ndarray
    force: ForceSample
    grasp_intact: bool


def handle_position(scene: SceneConfig, angle):
    """World position of the handle at opening angle ``angle``.

    ``angle`` may be a scalar or an ndarray; the result has shape
    ``angle.shape + (2,)`` (a plain (2,) vector for scalar input).
    """
    bearing = scene.initial_angle + scene.opening_sign * np.asarray(angle, dtype=np.float64)
    hx, hy = scene.hinge_position
    return np.stack(
        (hx + scene.door_radius * np.cos(bearing), hy + scene.door_radius * np.sin(bearing)),
        axis=-1,
    )


def handle_tangent(scene: SceneConfig, angle):
    """Unit tangent of the handle arc, oriented so positive tangential force
    increases the opening angle.  Scalar or batched like handle_position."""
    bearing = scene.initial_angle + scene.opening_sign * np.asarray(angle, dtype=np.float64)
    s = float(scene.opening_sign)
    return np.stack((-s * np.sin(bearing), s * np.cos(bearing)), axis=-1)


def decompose_force(force, tangent) -> ForceSample:
    """Split a world-frame force against a unit arc tangent.

    Args:
        force: (..., 2) force vector(s), Newtons.
        tangent: (..., 2) unit tangent(s); rejected if any norm deviates from
            1 by more than ``UNIT_TOLERANCE``.

    Returns:
        ForceSample with signed effective and nonnegative harmful components.
        Squared components satisfy effective^2 + harmful^2 = |force|^2.
    """
    force = np.asarray(force, dtype=np.float64)
    tangent = np.asarray(tangent, dtype=np.float64)
    if force.shape[-1:] != (2,) or tangent.shape[-1:] != (2,):
        raise GeometryError(
            f"force and tangent must have trailing dimension 2, got {force.shape} and {tangent.shape}"
        )
    norms = np.sqrt(np.sum(tangent * tangent, axis=-1))
    err = np.max(np.abs(norms - 1.0)) if norms.size else 0.0
    if not np.all(np.isfinite(tangent)) or err > UNIT_TOLERANCE:
        raise GeometryError(f"tangent must be unit length within {UNIT_TOLERANCE}, worst deviation {err!r}")
    effective = np.sum(force * tangent, axis=-1)
    # normal = tangent rotated +90 degrees
    normal_dot = force[..., 1] * tangent[..., 0] - force[..., 0] * tangent[..., 1]
    harmful = np.abs(normal_dot)
    if force.ndim == 1:
        return ForceSample(raw=force, effective=float(effective), harmful=float(harmful))
    return ForceSample(raw=force, effective=effective, harmful=harmful)


def _step_scalars(
    scene: SceneConfig,
    angle: float,
    omega: float,
    cmd_x: float,
    cmd_y: float,
    cmd_vx: float,
    cmd_vy: float,
    dist_x: float,
    dist_y: float,
):
    """Scalar core of one physics step; shared by step() and the rollout loop.

    Returns (new_angle, new_omega, fx, fy, effective, harmful, hx, hy,
    grasp_intact) where (hx, hy) is the handle position at the new angle.
    """
    s = float(scene.opening_sign)
    bearing = scene.initial_angle + s * angle
    cos_b = math.cos(bearing)
    sin_b = math.sin(bearing)
    R = scene.door_radius
    hinge_x, hinge_y = scene.hinge_position
    handle_x = hinge_x + R * cos_b
    handle_y = hinge_y + R * sin_b
    tan_x = -s * sin_b
    tan_y = s * cos_b

    # Impedance force at the current state.
    target_x = cmd_x + dist_x
    target_y = cmd_y + dist_y
    K = scene.controller_stiffness
    D = scene.controller_damping
    fx = K * (target_x - handle_x) + D * (cmd_vx - R * omega * tan_x)
    fy = K * (target_y - handle_y) + D * (cmd_vy - R * omega * tan_y)

    effective = fx * tan_x + fy * tan_y
    harmful = abs(fy * tan_x - fx * tan_y)
    torque = R * effective

    # Coulomb hinge friction with a stiction band near zero velocity.
    net_without_friction = torque - scene.hinge_damping * omega
    if abs(omega) < STICTION_BAND and abs(net_without_friction) <= scene.hinge_friction:
        new_omega = 0.0
    else:
        friction = -math.copysign(scene.hinge_friction, omega) if omega != 0.0 else 0.0
        accel = (net_without_friction + friction) / scene.door_inertia
        new_omega = omega + scene.dt * accel

    # Semi-implicit Euler: position update uses the fresh velocity.
    new_angle = angle + scene.dt * new_omega
    if new_angle < 0.0:
        new_angle = 0.0
        new_omega = 0.0

    new_bearing = scene.initial_angle + s * new_angle
    new_handle_x = hinge_x + R * math.cos(new_bearing)
    new_handle_y = hinge_y + R * math.sin(new_bearing)
    sep_x = target_x - new_handle_x
    sep_y = target_y - new_handle_y
    grasp_intact = math.sqrt(sep_x * sep_x + sep_y * sep_y) <= scene.grasp_break_distance

    return (new_angle, new_omega, fx, fy, effective, harmful, new_handle_x, new_handle_y, grasp_intact)


def step(
    scene: SceneConfig,
    door_state: DoorState,
    command_position,
    command_velocity,
    disturbance_offset=None,
) -> StepResult:
    """Advance the door by one physics step of ``scene.dt`` seconds.

    The spring-damper force is evaluated at the current state, converted to a
    hinge torque through the arc tangent, integrated semi-implicitly, and the
    grasp is re-checked at the new angle.  The reported force sample is the
    one applied during this step (current-state force).
    """
    cmd = np.asarray(command_position, dtype=np.float64)
    vel = np.asarray(command_velocity, dtype=np.float64)
    if disturbance_offset is None:
        dist = np.zeros(2)
    else:
        dist = np.asarray(disturbance_offset, dtype=np.float64)
    values = [door_state.angle, door_state.angular_velocity, cmd[0], cmd[1], vel[0], vel[1], dist[0], dist[1]]
    if not all(math.isfinite(v) for v in values):
        raise GeometryError(f"step inputs must be finite, got angle={door_state.angle!r}, "
                            f"omega={door_state.angular_velocity!r}, command={cmd!r}, "
                            f"velocity={vel!r}, disturbance={dist!r}")

    (new_angle, new_omega, fx, fy, effective, harmful,
     handle_x, handle_y, grasp_intact) = _step_scalars(
        scene, door_state.angle, door_state.angular_velocity,
        cmd[0], cmd[1], vel[0], vel[1], dist[0], dist[1],
    )

    if grasp_intact:
        ee = np.array([handle_x, handle_y])
    else:
        # The grip has separated; the end-effector flies to its setpoint.
        ee = cmd + dist
    force = ForceSample(raw=np.array([fx, fy]), effective=effective, harmful=harmful)
    return StepResult(
        door_state=DoorState(angle=new_angle, angular_velocity=new_omega),
        ee_position=ee,
        force=force,
        grasp_intact=grasp_intact,
    )


def oracle_plan(scene: SceneConfig, angle_now: float, n_states: int, angle_step: float) -> np.ndarray:
    """Ground-truth arc waypoints: handle positions at angle_now + k*angle_step
    for k = 1..n_states.  Returns an (n_states, 2) array."""
    if n_states < 1:
        raise GeometryError(f"n_states must be >= 1, got {n_states}")
    if not math.isfinite(angle_step) or angle_step < 0.0:
        raise GeometryError(f"angle_step must be finite and >= 0, got {angle_step!r}")
    ks = np.arange(1, n_states + 1, dtype=np.float64)
    return handle_position(scene, angle_now + ks * angle_step)


def check_success(scene: SceneConfig, angles, grasp_flags) -> bool:
    """True iff the opening angle reached ``scene.success_angle`` with the
    grasp intact at every step up to and including the crossing."""
    angles = np.asarray(angles, dtype=np.float64)
    grasp = np.asarray(grasp_flags, dtype=bool)
    if angles.shape != grasp.shape:
        raise GeometryError(f"angles and grasp_flags must match, got {angles.shape} and {grasp.shape}")
    reached = np.nonzero(angles >= scene.success_angle)[0]
    if reached.size == 0:
        return False
    first = int(reached[0])
    return bool(np.all(grasp[: first + 1]))
