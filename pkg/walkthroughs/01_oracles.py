"""Tour of the exact identities the trainer relies on.

Run with ``python3 walkthroughs/01_oracles.py``. Everything here is exact
tabular algebra, so it finishes in a few seconds.
"""
import numpy as np

from rize import oracles
from rize.mdp import PolicyTable, get_mdp, soft_policy_evaluation
from rize.objective import AdaptiveTargets, optimal_reward_closed_form, reward_bounds
from rize.quantile import iterate_backups, uniform_taus

# The regularized objective has a pointwise optimum in closed form. Where the
# expert visits more than the learner, the optimal reward sits above the
# blended target, and below it where the learner visits more.
targets = AdaptiveTargets(lambda_E=2.0, lambda_pi=-1.0)
for rho_E, rho_pi in [(0.9, 0.1), (0.5, 0.5), (0.1, 0.9)]:
    r = optimal_reward_closed_form(rho_E, rho_pi, 0.5, targets)
    print(f"rho_E={rho_E} rho_pi={rho_pi}: R*={r:+.3f}")
print("bounds for c=0.5:", reward_bounds(0.5, targets))

# The quantile critic's fixed point has the soft Q of the policy as its mean.
mdp = get_mdp("grid5x5")
policy = PolicyTable.uniform(mdp.num_states, mdp.num_actions, 0.1)
z, history = iterate_backups(mdp, policy, mdp.env_reward, 0.1, n=24)
q = soft_policy_evaluation(mdp, policy, mdp.env_reward, 0.1)
w = np.diff(uniform_taus(24))
print(f"{len(history)} backups, max |E[Z] - Q| = {np.max(np.abs(z @ w - q)):.2e}")

# The same checks, and more, are bundled as the `rize verify` suite.
for res in oracles.run_checks():
    print(res.line())
