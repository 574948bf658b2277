"""Train the tuned preset on the 5x5 gridworld and watch the targets.

Run with ``python3 walkthroughs/02_training_run.py`` (about ten seconds).
"""
from pathlib import Path

import numpy as np

from rize.config import load_config
from rize.demos import load_demos
from rize.evaluate import final_third_mean, normalized_score
from rize.trainer import train

root = Path(__file__).resolve().parents[1] / "configs"
config = load_config(root / "grid5x5-rize-3demos.toml", ["seeds=[0]", "methods=[\"rize\"]"])
(spec,) = config.runs()
demos = load_demos(config.demos)
print(f"{len(demos)} expert trajectories, mean return {demos.mean_return}")

record = train(spec.trainer, spec.mdp_id, demos)

# Normalized return at each evaluation point
for step, score in zip(record.eval_steps, normalized_score(record)):
    print(f"step {step:>6}: {score:.3f}")
print(f"final-third mean: {final_third_mean(record):.4f}")

# The targets start at (10, 5) and drift toward the rewards they regularize.
# Sampled implicit rewards should mostly stay inside the target-derived band.
ser = record.series
late = np.asarray(ser["step"]) > 2000
outside = np.sum(np.asarray(ser["n_outside"])[late]) / np.sum(np.asarray(ser["n_sampled"])[late])
print(f"lambda_E {ser['lambda_E'][-1]:.3f}  lambda_pi {ser['lambda_pi'][-1]:.3f}")
print(f"fraction of sampled rewards outside the band after 20% of training: {outside:.3%}")
