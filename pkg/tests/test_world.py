"""Geometry and dynamics tests for the door world.

Expected values here are produced by independent oracles implemented inside
this file: plain-math trigonometry for arc positions, central finite
differences for the tangent, and a fine-step reference integrator for the
hinge dynamics.  None of them call back into the implementation under test.
"""

import math

import numpy as np
import pytest

from doordiff.world import (
    DoorState,
    ForceSample,
    GeometryError,
    SceneConfig,
    check_success,
    decompose_force,
    handle_position,
    handle_tangent,
    oracle_plan,
    step,
)


def scalar_arc_oracle(hinge, radius, initial, sign, theta):
    """Independent scalar-trig computation of the handle position."""
    bearing = initial + sign * theta
    return (hinge[0] + radius * math.cos(bearing), hinge[1] + radius * math.sin(bearing))


# ---------------------------------------------------------------------------
# handle_position


def test_handle_position_closed_door():
    scene = SceneConfig(hinge_position=(0.0, 0.0), door_radius=1.0, initial_angle=0.0)
    assert np.allclose(handle_position(scene, 0.0), [1.0, 0.0], atol=1e-15)


def test_handle_position_quarter_turn():
    scene = SceneConfig(hinge_position=(0.0, 0.0), door_radius=1.0, initial_angle=0.0, opening_sign=1)
    assert np.allclose(handle_position(scene, math.pi / 2), [0.0, 1.0], atol=1e-12)


def test_handle_position_against_scalar_oracle():
    hinge, radius, initial, sign, theta = (0.3, -0.2), 0.8, math.pi, -1, 0.7
    expected = scalar_arc_oracle(hinge, radius, initial, sign, theta)
    scene = SceneConfig(hinge_position=hinge, door_radius=radius, initial_angle=initial, opening_sign=sign)
    got = handle_position(scene, theta)
    assert abs(got[0] - expected[0]) < 1e-12
    assert abs(got[1] - expected[1]) < 1e-12


def test_handle_position_batched_matches_scalar():
    scene = SceneConfig(hinge_position=(0.1, 0.4), door_radius=0.9, initial_angle=0.3, opening_sign=-1)
    thetas = np.linspace(0.0, 1.2, 50)
    batched = handle_position(scene, thetas)
    assert batched.shape == (50, 2)
    for i, th in enumerate(thetas):
        assert np.allclose(batched[i], handle_position(scene, float(th)), atol=0.0)


def test_arc_invariance_fuzz():
    # Every handle position sits exactly on the circle of radius R.
    rng = np.random.default_rng(7)
    for _ in range(20):
        scene = SceneConfig(
            hinge_position=(rng.uniform(-1, 1), rng.uniform(-1, 1)),
            door_radius=rng.uniform(0.3, 1.5),
            initial_angle=rng.uniform(-math.pi, math.pi),
            opening_sign=int(rng.choice([-1, 1])),
        )
        thetas = rng.uniform(0.0, 2 * math.pi, size=5000)
        pos = handle_position(scene, thetas)
        dist = np.hypot(pos[:, 0] - scene.hinge_position[0], pos[:, 1] - scene.hinge_position[1])
        assert np.max(np.abs(dist - scene.door_radius)) < 1e-12


# ---------------------------------------------------------------------------
# handle_tangent


def test_tangent_closed_door_points_up():
    scene = SceneConfig(initial_angle=0.0, opening_sign=1)
    assert np.allclose(handle_tangent(scene, 0.0), [0.0, 1.0], atol=1e-15)


def test_tangent_sign_flip():
    scene = SceneConfig(initial_angle=0.0, opening_sign=-1)
    assert np.allclose(handle_tangent(scene, 0.0), [0.0, -1.0], atol=1e-15)


def test_tangent_unit_and_orthogonal_fuzz():
    rng = np.random.default_rng(11)
    scene = SceneConfig(hinge_position=(0.2, -0.6), door_radius=1.1, initial_angle=1.0, opening_sign=-1)
    thetas = rng.uniform(0, 2 * math.pi, size=10000)
    tan = handle_tangent(scene, thetas)
    assert np.max(np.abs(np.hypot(tan[:, 0], tan[:, 1]) - 1.0)) < 1e-12
    radial = handle_position(scene, thetas) - np.array(scene.hinge_position)
    dots = np.sum(tan * radial, axis=-1)
    assert np.max(np.abs(dots)) < 1e-9


def test_tangent_matches_finite_difference():
    # d(handle)/d(theta) normalized, via central differences on the position.
    scene = SceneConfig(hinge_position=(-0.3, 0.5), door_radius=0.7, initial_angle=2.0, opening_sign=-1)
    delta = 1e-7
    for theta in [0.0, 0.4, 1.3, 3.0]:
        plus = handle_position(scene, theta + delta)
        minus = handle_position(scene, theta - delta)
        fd = (plus - minus) / (2 * delta)
        fd = fd / np.hypot(fd[0], fd[1])
        assert np.allclose(handle_tangent(scene, theta), fd, atol=1e-6)


def test_tangent_increases_angle():
    # A force along the tangent must produce positive torque (opening).
    for sign in (1, -1):
        scene = SceneConfig(initial_angle=0.7, opening_sign=sign, hinge_friction=0.0)
        tan = handle_tangent(scene, 0.2)
        state = DoorState(angle=0.2, angular_velocity=0.0)
        cmd = handle_position(scene, 0.2) + 0.01 * tan
        result = step(scene, state, cmd, np.zeros(2))
        assert result.door_state.angular_velocity > 0.0


# ---------------------------------------------------------------------------
# decompose_force


def test_decompose_pure_tangential():
    tangent = np.array([0.0, 1.0])
    sample = decompose_force(np.array([0.0, 3.0]), tangent)
    assert sample.effective == pytest.approx(3.0, abs=1e-15)
    assert sample.harmful == pytest.approx(0.0, abs=1e-15)


def test_decompose_pure_normal():
    tangent = np.array([0.0, 1.0])
    sample = decompose_force(np.array([-2.0, 0.0]), tangent)
    assert sample.effective == pytest.approx(0.0, abs=1e-15)
    assert sample.harmful == pytest.approx(2.0, abs=1e-15)


def test_decompose_oblique():
    tangent = np.array([1.0, 0.0])
    sample = decompose_force(np.array([1.0, 1.0]), tangent)
    assert sample.effective == pytest.approx(1.0, abs=1e-15)
    assert sample.harmful == pytest.approx(1.0, abs=1e-15)


def test_decompose_rejects_non_unit_tangent():
    with pytest.raises(GeometryError):
        decompose_force(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(GeometryError):
        decompose_force(np.array([1.0, 0.0]), np.array([0.999, 0.0]))


def test_decompose_pythagoras_fuzz():
    rng = np.random.default_rng(3)
    n = 200000
    forces = rng.normal(0.0, 20.0, size=(n, 2))
    phis = rng.uniform(0, 2 * math.pi, size=n)
    tangents = np.stack([np.cos(phis), np.sin(phis)], axis=-1)
    sample = decompose_force(forces, tangents)
    assert isinstance(sample, ForceSample)
    lhs = sample.effective**2 + sample.harmful**2
    rhs = np.sum(forces**2, axis=-1)
    rel = np.abs(lhs - rhs) / np.maximum(rhs, 1e-30)
    assert np.max(rel) < 1e-9
    assert np.all(sample.harmful >= 0.0)


# ---------------------------------------------------------------------------
# step


def reference_integrate(scene, angle, omega, command_fn, n_steps, substeps):
    """Independent fine-step reference integrator (same physics, written
    separately): runs the spring-damper + hinge dynamics at dt/substeps."""
    dt = scene.dt / substeps
    s = scene.opening_sign
    K, D, R = scene.controller_stiffness, scene.controller_damping, scene.door_radius
    for i in range(n_steps * substeps):
        bearing = scene.initial_angle + s * angle
        hx = scene.hinge_position[0] + R * math.cos(bearing)
        hy = scene.hinge_position[1] + R * math.sin(bearing)
        tx, ty = -s * math.sin(bearing), s * math.cos(bearing)
        cx, cy = command_fn(angle)
        fx = K * (cx - hx) - D * R * omega * tx
        fy = K * (cy - hy) - D * R * omega * ty
        torque = R * (fx * tx + fy * ty)
        net = torque - scene.hinge_damping * omega
        if abs(omega) < 1e-4 and abs(net) <= scene.hinge_friction:
            omega = 0.0
        else:
            friction = -math.copysign(scene.hinge_friction, omega) if omega != 0.0 else 0.0
            omega = omega + dt * (net + friction) / scene.door_inertia
        angle = angle + dt * omega
        if angle < 0.0:
            angle, omega = 0.0, 0.0
    return angle, omega


def test_step_equilibrium_is_fixed_point():
    scene = SceneConfig()
    state = DoorState(angle=0.3, angular_velocity=0.0)
    cmd = handle_position(scene, 0.3)
    result = step(scene, state, cmd, np.zeros(2))
    assert result.door_state.angle == 0.3
    assert result.door_state.angular_velocity == 0.0
    assert result.force.effective == pytest.approx(0.0, abs=1e-12)
    assert result.force.harmful == pytest.approx(0.0, abs=1e-12)
    assert result.grasp_intact


def test_step_matches_fine_step_reference():
    # Constant tangential command offset, frictionless undamped hinge:
    # final angle after 1000 coarse steps within 1% of a 10x-finer reference.
    scene = SceneConfig(
        hinge_position=(0.0, 0.0), door_radius=0.8, initial_angle=0.2, opening_sign=1,
        door_inertia=4.0, hinge_damping=0.0, hinge_friction=0.0,
        controller_stiffness=600.0, controller_damping=0.0,
        grasp_break_distance=10.0,  # keep the grasp alive for this study
    )

    def command_fn(angle):
        pos = handle_position(scene, angle)
        tan = handle_tangent(scene, angle)
        target = pos + 0.01 * tan
        return float(target[0]), float(target[1])

    ref_angle, _ = reference_integrate(scene, 0.0, 0.0, command_fn, n_steps=1000, substeps=10)

    state = DoorState()
    for _ in range(1000):
        cmd = handle_position(scene, state.angle) + 0.01 * handle_tangent(scene, state.angle)
        result = step(scene, state, cmd, np.zeros(2))
        state = result.door_state
    assert ref_angle > 0.05  # the door actually moved
    assert abs(state.angle - ref_angle) / ref_angle < 0.01


def test_step_damped_velocity_decay():
    # Command pinned at the handle with zero velocity gains: |omega| never grows.
    scene = SceneConfig(hinge_damping=2.5, hinge_friction=0.0, controller_damping=0.0)
    state = DoorState(angle=0.5, angular_velocity=1.0)
    prev = abs(state.angular_velocity)
    for _ in range(300):
        cmd = handle_position(scene, state.angle)
        result = step(scene, state, cmd, np.zeros(2))
        state = result.door_state
        assert abs(state.angular_velocity) <= prev + 1e-15
        prev = abs(state.angular_velocity)
    assert prev < 0.4  # meaningfully damped


def test_step_stiction_holds_small_torque():
    scene = SceneConfig(hinge_friction=1.0, controller_stiffness=600.0)
    state = DoorState(angle=0.2, angular_velocity=0.0)
    # A tiny tangential offset: torque below the friction threshold.
    tau_budget = 0.9 * scene.hinge_friction
    offset = tau_budget / (scene.controller_stiffness * scene.door_radius)
    cmd = handle_position(scene, 0.2) + offset * handle_tangent(scene, 0.2)
    result = step(scene, state, cmd, np.zeros(2))
    assert result.door_state.angular_velocity == 0.0
    assert result.door_state.angle == 0.2


def test_step_clamps_at_closed():
    scene = SceneConfig(hinge_friction=0.0)
    state = DoorState(angle=0.005, angular_velocity=-2.0)
    cmd = handle_position(scene, 0.005)
    result = step(scene, state, cmd, np.zeros(2))
    assert result.door_state.angle == 0.0
    assert result.door_state.angular_velocity == 0.0


def test_step_grasp_break():
    scene = SceneConfig(grasp_break_distance=0.08)
    state = DoorState(angle=0.3, angular_velocity=0.0)
    cmd = handle_position(scene, 0.3) + np.array([0.2, 0.0])
    result = step(scene, state, cmd, np.zeros(2))
    assert not result.grasp_intact
    # After separation the end-effector reports its setpoint.
    assert np.allclose(result.ee_position, cmd, atol=1e-9)


def test_step_grasp_checked_at_new_angle():
    # Command exactly at the handle's next position: separation stays zero.
    scene = SceneConfig(grasp_break_distance=1e-9, hinge_friction=0.0, controller_damping=0.0)
    state = DoorState(angle=0.4, angular_velocity=0.0)
    cmd = handle_position(scene, 0.4)
    result = step(scene, state, cmd, np.zeros(2))
    # No motion (equilibrium), so new angle == old and the tiny threshold holds.
    assert result.grasp_intact


def test_step_disturbance_shifts_force():
    scene = SceneConfig()
    state = DoorState(angle=0.2, angular_velocity=0.0)
    cmd = handle_position(scene, 0.2)
    result = step(scene, state, cmd, np.zeros(2), disturbance_offset=np.array([0.03, 0.0]))
    expected = scene.controller_stiffness * 0.03
    assert np.allclose(result.force.raw, [expected, 0.0], atol=1e-9)


def test_step_rejects_non_finite():
    scene = SceneConfig()
    with pytest.raises(GeometryError):
        step(scene, DoorState(angle=float("nan")), np.zeros(2), np.zeros(2))
    with pytest.raises(GeometryError):
        step(scene, DoorState(), np.array([np.inf, 0.0]), np.zeros(2))


def test_step_deterministic():
    scene = SceneConfig()
    state = DoorState(angle=0.1, angular_velocity=0.3)
    cmd = np.array([0.75, 0.1])
    vel = np.array([0.02, -0.01])
    a = step(scene, state, cmd, vel)
    b = step(scene, state, cmd, vel)
    assert a.door_state.angle == b.door_state.angle
    assert a.door_state.angular_velocity == b.door_state.angular_velocity
    assert np.array_equal(a.force.raw, b.force.raw)


def test_scene_config_rejects_bad_values():
    with pytest.raises(GeometryError):
        SceneConfig(door_radius=-1.0)
    with pytest.raises(GeometryError):
        SceneConfig(dt=0.0)
    with pytest.raises(GeometryError):
        SceneConfig(opening_sign=0)
    with pytest.raises(GeometryError):
        SceneConfig(hinge_friction=-0.1)


# ---------------------------------------------------------------------------
# oracle_plan


def test_oracle_plan_first_waypoint():
    scene = SceneConfig(hinge_position=(0.0, 0.0), door_radius=1.0, initial_angle=0.0)
    plan = oracle_plan(scene, 0.0, 4, 0.1)
    assert np.allclose(plan[0], handle_position(scene, 0.1), atol=0.0)
    assert np.allclose(plan[3], handle_position(scene, 0.4), atol=0.0)
    assert plan.shape == (4, 2)


def test_oracle_plan_on_arc_fuzz():
    rng = np.random.default_rng(5)
    for _ in range(20):
        scene = SceneConfig(
            hinge_position=(rng.uniform(-1, 1), rng.uniform(-1, 1)),
            door_radius=rng.uniform(0.4, 1.2),
            initial_angle=rng.uniform(-2, 2),
            opening_sign=int(rng.choice([-1, 1])),
        )
        plan = oracle_plan(scene, rng.uniform(0, 0.5), 32, rng.uniform(0.001, 0.02))
        dist = np.hypot(plan[:, 0] - scene.hinge_position[0], plan[:, 1] - scene.hinge_position[1])
        assert np.max(np.abs(dist - scene.door_radius)) < 1e-12


def test_oracle_plan_rejects_bad_args():
    scene = SceneConfig()
    with pytest.raises(GeometryError):
        oracle_plan(scene, 0.0, 0, 0.1)
    with pytest.raises(GeometryError):
        oracle_plan(scene, 0.0, 4, -0.1)


# ---------------------------------------------------------------------------
# check_success


def test_check_success_cases():
    scene = SceneConfig(success_angle=math.radians(30))
    opened = np.linspace(0, math.radians(35), 100)
    intact = np.ones(100, dtype=bool)
    assert check_success(scene, opened, intact)

    short = np.linspace(0, math.radians(29.9), 100)
    assert not check_success(scene, short, intact)

    broken = intact.copy()
    broken[50] = False  # grasp lost before the crossing
    assert not check_success(scene, opened, broken)


def test_check_success_break_after_crossing_still_counts():
    scene = SceneConfig(success_angle=0.5)
    angles = np.array([0.0, 0.3, 0.6, 0.7])
    grasp = np.array([True, True, True, False])
    assert check_success(scene, angles, grasp)
