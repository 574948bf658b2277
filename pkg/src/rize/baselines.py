"""Comparison objectives and behaviour cloning.

The implicit-reward baselines reuse the RIZE objective and differ only in
the regularizer targets:

* ``iq_learn_loss``: plain L2 on implicit rewards (targets fixed at 0).
* ``fixed_target_loss``: squared TD toward constant targets, SQIL/LSIQ style.
  SQIL proper relabels rewards and runs soft Q-learning; this is the
  fixed-target squared-TD form instead.
* ``coupled_target_loss``: one shared target, updated toward the pooled mean.
"""
from __future__ import annotations

import numpy as np

from .demos import DemoSet
from .mdp import PolicyTable, get_mdp
from .objective import AdaptiveTargets, RegularizerConfig, critic_loss, _as_batch

BC_SMOOTHING = 1e-3
FIXED_TARGETS = (1.0, -1.0)
COUPLED_INITS = (0.0, 10.0)


def iq_learn_loss(ensemble, policy, c, variant, expert_batch, policy_batch, mdp, alpha,
                  target_policy=None):
    return critic_loss(ensemble, policy, AdaptiveTargets(0.0, 0.0), RegularizerConfig(c, "plain-L2"),
                       variant, expert_batch, policy_batch, mdp, alpha, target_policy)


def fixed_target_loss(r_E, r_pi, ensemble, policy, c, variant, expert_batch, policy_batch, mdp,
                      alpha, target_policy=None):
    return critic_loss(ensemble, policy, AdaptiveTargets(r_E, r_pi),
                       RegularizerConfig(c, "fixed-target"), variant, expert_batch, policy_batch,
                       mdp, alpha, target_policy)


def coupled_target_loss(lambda_shared, lr, ensemble, policy, c, variant, expert_batch,
                        policy_batch, mdp, alpha, target_policy=None):
    """Returns ``(loss, grad, updated_lambda)``; the update uses pre-step rewards."""
    from .objective import critic_loss_outputs

    targets = AdaptiveTargets(lambda_shared, lambda_shared, lr, lr)
    reg = RegularizerConfig(c, "coupled-target")
    loss, grad = critic_loss(ensemble, policy, targets, reg, variant, expert_batch, policy_batch,
                             mdp, alpha, target_policy)
    outs = critic_loss_outputs(ensemble, policy, targets, reg, variant, expert_batch,
                               policy_batch, mdp, alpha, target_policy)
    pooled = np.concatenate([np.mean([o.rewards_E for o in outs], axis=0),
                             np.mean([o.rewards_pi for o in outs], axis=0)]).mean()
    new_lambda = lambda_shared - lr * 2.0 * (lambda_shared - pooled)
    return loss, grad, float(new_lambda)


def behavior_cloning(demos: DemoSet, mdp_id: str | None = None, eps: float = BC_SMOOTHING,
                     num_states: int | None = None, num_actions: int | None = None) -> PolicyTable:
    """Laplace-smoothed per-state action frequencies; unseen states are uniform."""
    if len(demos) == 0:
        raise ValueError("behaviour cloning needs at least one demonstration")
    if num_states is None or num_actions is None:
        mdp = get_mdp(mdp_id or demos.source_mdp_id)
        num_states, num_actions = mdp.num_states, mdp.num_actions
    s, a, _ = demos.transitions()
    counts = np.zeros((num_states, num_actions))
    np.add.at(counts, (s, a), 1.0)
    probs = (counts + eps) / (counts.sum(axis=1, keepdims=True) + num_actions * eps)
    return PolicyTable.from_probs(probs)
