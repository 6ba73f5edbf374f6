"""
Training a policy inside the learned model
==========================================

Each iteration collects real steps with the current policy and refits the
world model on everything collected so far. PPO then trains on short rollouts
that start from random real states and continue inside the model.
Here a heavily scaled-down schedule runs in a few minutes. The ``desk-quick``
preset of the command line is the full-length version.
"""

import os
from pathlib import Path

from simplerl.envs import EnvSpec
from simplerl.metrics import best_iteration, normalized_fraction, score_stats
from simplerl.plots import score_curves
from simplerl.ppo import PPOConfig
from simplerl.simple_loop import LoopConfig, plan, run_ppo_baseline, run_simple
from simplerl.world_model import ModelConfig

ITERATIONS = int(os.environ.get("DEMO_ITERATIONS", 6))
out = Path(__file__).with_name("output")
out.mkdir(exist_ok=True)

# %%
# Counts are given at full size and divided by ``scale``.
loop = LoopConfig(iterations=ITERATIONS, scale=32, model_steps_first=25_600,
                  model_steps_rest=3_200, ppo_epoch_unit=160, z_overrides=(), z_final=2,
                  eval_episodes=4)
for k in sorted({1, min(2, ITERATIONS), ITERATIONS}):
    print(plan(loop, k))
print("real interactions:", loop.total_real_interactions)

# %%
# Run it. Every iteration is checkpointed under the run directory, so an
# interrupted run continues with ``resume=True``.
spec = EnvSpec("mini_pong")
report = run_simple(spec, ModelConfig(variant="deterministic", learning_rate=1e-3), PPOConfig(),
                    loop, seed=1, run_dir=out / "simple_run", log=print)

# %%
# A model-free PPO learner with the same real budget.
baseline = run_ppo_baseline(spec, PPOConfig(), loop.total_real_interactions, seed=1,
                            eval_every=400, eval_episodes=4)
s = score_stats(report.final_scores).mean
b = score_stats(baseline.final_scores).mean
print(f"model-based {s:.2f}, PPO {b:.2f}, fraction of PPO score "
      f"{normalized_fraction(s, b, random=-3.0)}")
print("first best iteration:", best_iteration(report.score_curve))
score_curves({"model-based": [report.score_curve]}, out / "simulated_policy_curve.png")
