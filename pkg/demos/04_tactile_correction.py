"""The point of the tactile channel: force tells the planner where truth is.

Two planners share one set of trained weights; one reads the contact force,
the other has that pathway disabled at inference.  Conditioned on the same
noisy geometry estimates, the tactile planner moves its plan against the
sensed force (the spring strains from the true arc toward the believed one,
so relief lies the other way); the vision-only planner can only trust the
estimate it was given.
"""

import dataclasses

import numpy as np

from doordiff import DiffusionConfig, DiffusionPlanner, fit_normalizer, generate_demos, train
from doordiff.dataset import training_arrays

rng = np.random.default_rng(0)
demos, _ = generate_demos(80, rng, horizon=16)
plans, obs, cur, frc, groups = training_arrays(demos)

config = DiffusionConfig(horizon=16, diffusion_steps=8, channels=(16, 32),
                         heads=2, force_tokens=2, token_dim=8,
                         force_hidden=16, film_hidden=16, time_embed_dim=8)
norm = fit_normalizer(demos)
tactile = DiffusionPlanner(config, norm)
print("training (full sweeps, so the force pathway gets enough steps) ...")
train(tactile, plans, obs, cur, frc, epochs=40, seed=0)

# same trained weights, force pathway switched off at inference
vision = DiffusionPlanner(dataclasses.replace(config, vision_only=True), norm)
for src, dst in zip(tactile.params, vision.params):
    dst.values[...] = src.values
    vision.ema.shadow[dst.name][...] = tactile.ema.shadow[src.name]

# fresh episodes; probe the records where the force says the most
test, _ = generate_demos(40, np.random.default_rng(9), horizon=16)
records = [s for d in test for s in d.steps]
records.sort(key=lambda s: -np.hypot(*s.force_feedback))
probes = records[:24]
o = np.array([s.observation.to_vector() for s in probes])
c = np.array([s.current_state for s in probes])
f = np.array([s.force_feedback for s in probes])
labels = np.array([s.label_states for s in probes])
print(f"probing {len(probes)} fresh records, |F| "
      f"{np.linalg.norm(f, axis=1).min():.0f}-{np.linalg.norm(f, axis=1).max():.0f} N")

plan_t = tactile.sample(tactile.make_conditions(o, c, f),
                        np.random.default_rng(3)).states
plan_v = vision.sample(vision.make_conditions(o, c, f),
                       np.random.default_rng(3)).states

err_t = np.linalg.norm(plan_t - labels, axis=2).mean()
err_v = np.linalg.norm(plan_v - labels, axis=2).mean()
print(f"\nmean plan error vs true-arc labels: "
      f"tactile {err_t*100:.1f} cm, vision-only {err_v*100:.1f} cm")

shifts = (plan_t - plan_v).mean(axis=1)
cos = (shifts * f).sum(axis=1) / (
    np.linalg.norm(shifts, axis=1) * np.linalg.norm(f, axis=1) + 1e-12)
print(f"mean |tactile - vision| plan shift: "
      f"{np.linalg.norm(shifts, axis=1).mean()*100:.1f} cm")
print(f"mean cos(shift, force) = {cos.mean():+.2f}  "
      "(negative: the plan backs away from the strain)")
