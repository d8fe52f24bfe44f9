"""How training data is made, and why its forces are informative.

The demonstration expert sees the door the way the planner later will:
through noisy vision.  It commits to the arc its estimates imply and tracks
that arc open loop, while labels record the true arc.  The contact force it
feels is therefore proportional to its own estimation error, which is
exactly the signal a tactile-aware planner can learn to subtract.
"""

import numpy as np

from doordiff import NoiseLevels, generate_demos, sample_scene

rng = np.random.default_rng(0)

# clean vision: the expert's belief is the truth, forces stay tiny
clean, _ = generate_demos(20, np.random.default_rng(1), horizon=32,
                          noise=NoiseLevels(hinge=0.0, radius=0.0, angle=0.0))
clean_f = np.concatenate([[np.hypot(*s.force_feedback) for s in d.steps] for d in clean])

# default vision noise: centimeter-level belief errors, tens of newtons
noisy, discarded = generate_demos(20, np.random.default_rng(1), horizon=32)
noisy_f = np.concatenate([[np.hypot(*s.force_feedback) for s in d.steps] for d in noisy])

print(f"outcomes: {[d.termination for d in noisy[:8]]} ... ({discarded} discarded)")
print(f"records per demo: ~{sum(len(d.steps) for d in noisy) // len(noisy)}")
print(f"|force| with perfect vision : median {np.median(clean_f):6.2f} N, "
      f"99th pct {np.quantile(clean_f, 0.99):6.2f} N")
print(f"|force| with default noise  : median {np.median(noisy_f):6.2f} N, "
      f"99th pct {np.quantile(noisy_f, 0.99):6.2f} N")

# one record, spelled out
demo = noisy[0]
s = demo.steps[3]
print("\none training record:")
print(f"  believed hinge   {np.round(s.observation.hinge_estimate, 3)}"
      f"  (true {np.round(demo.scene.hinge_position, 3)})")
print(f"  believed radius  {s.observation.radius_estimate:.3f}"
      f"  (true {demo.scene.door_radius:.3f})")
print(f"  end-effector at  {np.round(s.current_state, 3)}")
print(f"  contact force    {np.round(s.force_feedback, 2)} N")
print(f"  label: {len(s.label_states)} true-arc waypoints, first "
      f"{np.round(s.label_states[0], 3)}")

# the force direction points from the true arc toward the believed one
scene = demo.scene
err = np.array(s.observation.hinge_estimate) - np.array(scene.hinge_position)
f = np.array(s.force_feedback)
if np.linalg.norm(f) > 1e-6 and np.linalg.norm(err) > 1e-6:
    cos = f @ err / (np.linalg.norm(f) * np.linalg.norm(err))
    print(f"\ncos(force, hinge-belief error) = {cos:+.2f}"
          "  (belief error is readable from touch)")

unused = sample_scene(rng)  # ranges are documented on SceneRanges
print(f"\nscenes draw from ranges like door_radius {unused.door_radius:.2f} m, "
      f"stiffness {unused.controller_stiffness:.0f} N/m")
