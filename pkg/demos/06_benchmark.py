"""The benchmark harness: fleets, metrics, and the comparison table.

Evaluates two planners over the same scene fleet and prints the metric
table the CLI's eval/report subcommands produce: success rate, average
harmful force, and the safety-at-threshold rates that ask "of the episodes
that succeeded, how many stayed gentle?".
"""

import numpy as np

from doordiff import (
    DiffusionConfig,
    DiffusionPlanner,
    DiffusionPolicy,
    OraclePlanner,
    build_report,
    evaluate_fleet,
    fit_normalizer,
    generate_demos,
    report_text,
    sample_scene_pool,
    train,
)
from doordiff.dataset import training_arrays

# a quickly trained small planner, standing in for the full-size model
rng = np.random.default_rng(0)
demos, _ = generate_demos(60, rng, horizon=16)
plans, obs, cur, frc, groups = training_arrays(demos)
config = DiffusionConfig(horizon=16, diffusion_steps=8, channels=(16, 32),
                         heads=2, force_tokens=2, token_dim=8,
                         force_hidden=16, film_hidden=16, time_embed_dim=8)
planner = DiffusionPlanner(config, fit_normalizer(demos))
train(planner, plans, obs, cur, frc, epochs=10, groups=groups, seed=0)

scenes = sample_scene_pool(20, np.random.default_rng(42), pool="seen")
print(f"evaluating 2 planners x {len(scenes)} scenes ...")

oracle_traces = evaluate_fleet(scenes, OraclePlanner(), np.random.default_rng(1))
model_traces = evaluate_fleet(scenes, DiffusionPolicy(planner),
                              np.random.default_rng(1))

reports = [
    build_report("oracle", "seen", oracle_traces),
    build_report("small-model", "seen", model_traces),
]
print()
print(report_text(reports))
print("SaR-95@f: success with <5% of plan states ever exceeding f newtons;")
print("SaR-80@f relaxes that to <20%.  AHF averages harmful force over")
print("every executed tick, so a single rough episode moves it.")
