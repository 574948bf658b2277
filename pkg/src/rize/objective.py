"""Implicit rewards, the adaptive-target squared-TD regularizer and the critic objective.

The critic objective is maximised. Gradients are taken with respect to the
online critic's expectations ``Q(s, a)`` and mapped onto quantile entries
through the fraction weights, since ``dQ/dz_i = tau_{i+1} - tau_i``.
Next-state values are treated as constants (they come from the target
critics and target policy).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mdp import PolicyTable, TabularMDP, soft_state_value
from .quantile import CriticEnsemble

REGULARIZER_VARIANTS = ("adaptive", "fixed-target", "coupled-target", "plain-L2")
LOSS_KINDS = ("value", "v0")


@dataclass(frozen=True)
class AdaptiveTargets:
    lambda_E: float = 10.0
    lambda_pi: float = 5.0
    lr_E: float = 1e-3
    lr_pi: float = 1e-4


@dataclass(frozen=True)
class RegularizerConfig:
    c: float = 0.1
    variant: str = "adaptive"

    def __post_init__(self):
        if self.variant not in REGULARIZER_VARIANTS:
            raise ValueError(f"unknown regularizer variant {self.variant!r}")
        if self.c < 0:
            raise ValueError("regularization coefficient must be nonnegative")


@dataclass(frozen=True)
class LossVariant:
    kind: str = "value"
    mixture_weight: float = 0.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss variant {self.kind!r}")
        if not 0.0 <= self.mixture_weight <= 1.0:
            raise ValueError("mixture_weight must lie in [0, 1]")


@dataclass(frozen=True)
class Batch:
    """State-action pairs drawn from one distribution (expert or learner)."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.int64))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.int64))

    def __len__(self):
        return len(self.states)

    @classmethod
    def from_pairs(cls, pairs) -> "Batch":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return cls(pairs[:, 0], pairs[:, 1])


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else Batch.from_pairs(batch)


def next_state_values(mdp: TabularMDP, q: np.ndarray, policy: PolicyTable, alpha: float) -> np.ndarray:
    """E_{s'~P(.|s,a)} V(s') for every (s, a), with V from ``q`` and ``policy``."""
    return mdp.transition @ soft_state_value(q, policy, alpha)


def implicit_reward(q_expect: np.ndarray, mdp: TabularMDP, policy: PolicyTable, alpha: float,
                    batch=None) -> np.ndarray:
    """R_Q(s,a) = Q(s,a) - gamma E_{s',a'}[Q(s',a') - alpha log pi(a'|s')].

    Returns the full (S, A) table when ``batch`` is None, else one value per
    pair in the batch.
    """
    q_expect = np.asarray(q_expect, dtype=float)
    if not np.all(np.isfinite(q_expect)):
        raise ValueError("q_expect contains non-finite entries")
    r = q_expect - mdp.gamma * next_state_values(mdp, q_expect, policy, alpha)
    if batch is None:
        return r
    b = _as_batch(batch)
    return r[b.states, b.actions]


def state_value(q_expect: np.ndarray, policy: PolicyTable, alpha: float, s: int) -> float:
    return float(soft_state_value(np.asarray(q_expect, dtype=float), policy, alpha)[s])


def effective_targets(targets: AdaptiveTargets, variant: str) -> tuple[float, float]:
    """Regression targets (expert, learner) the regularizer actually uses."""
    if variant in ("adaptive", "fixed-target"):
        return targets.lambda_E, targets.lambda_pi
    if variant == "coupled-target":
        return targets.lambda_E, targets.lambda_E
    if variant == "plain-L2":
        return 0.0, 0.0
    raise ValueError(f"unknown regularizer variant {variant!r}")


def gamma_regularizer(rewards_E, rewards_pi, targets: AdaptiveTargets) -> float:
    rewards_E = np.asarray(rewards_E, dtype=float)
    rewards_pi = np.asarray(rewards_pi, dtype=float)
    if rewards_E.size == 0 or rewards_pi.size == 0:
        raise ValueError("regularizer needs nonempty expert and learner batches")
    return float(np.mean((rewards_E - targets.lambda_E) ** 2)
                 + np.mean((rewards_pi - targets.lambda_pi) ** 2))


def lambda_step(targets: AdaptiveTargets, rewards_E, rewards_pi) -> AdaptiveTargets:
    """One gradient step of each target on its own squared-error objective."""
    rewards_E = np.asarray(rewards_E, dtype=float)
    rewards_pi = np.asarray(rewards_pi, dtype=float)
    if rewards_E.size == 0 or rewards_pi.size == 0:
        raise ValueError("lambda_step needs nonempty batches")
    lam_E = targets.lambda_E - targets.lr_E * 2.0 * (targets.lambda_E - rewards_E.mean())
    lam_pi = targets.lambda_pi - targets.lr_pi * 2.0 * (targets.lambda_pi - rewards_pi.mean())
    return replace(targets, lambda_E=float(lam_E), lambda_pi=float(lam_pi))


def optimal_reward_closed_form(rho_E, rho_pi, c: float, targets: AdaptiveTargets):
    """Pointwise maximiser of the regularized objective for fixed occupancies."""
    rho_E = np.asarray(rho_E, dtype=float)
    rho_pi = np.asarray(rho_pi, dtype=float)
    total = rho_E + rho_pi
    if np.any(total <= 0):
        raise ValueError("rho_E + rho_pi must be positive")
    out = ((rho_E - rho_pi) / (2.0 * c * total)
           + (rho_E * targets.lambda_E + rho_pi * targets.lambda_pi) / total)
    return float(out) if out.ndim == 0 else out


def reward_bounds(c: float, targets: AdaptiveTargets) -> tuple[float, float]:
    if c <= 0:
        raise ValueError("c must be positive")
    lo = -1.0 / (2.0 * c) + min(targets.lambda_E, targets.lambda_pi)
    hi = 1.0 / (2.0 * c) + max(targets.lambda_E, targets.lambda_pi)
    return lo, hi


@dataclass
class LossOutput:
    """Objective value, its gradient wrt Q, and the pieces it is built from."""

    value: float
    grad_q: np.ndarray
    terms: dict
    rewards_E: np.ndarray
    rewards_pi: np.ndarray


def _scatter(values, states, actions, shape) -> np.ndarray:
    S, A = shape
    return np.bincount(states * A + actions, weights=values, minlength=S * A).reshape(S, A)


def objective_on_q(q: np.ndarray, v_next: np.ndarray, policy: PolicyTable, alpha: float,
                   gamma: float, initial_dist: np.ndarray, expert: Batch, learner: Batch,
                   lam_E: float, lam_pi: float, c: float, variant: LossVariant) -> LossOutput:
    """Critic objective for a single online Q table.

    ``v_next[s, a]`` is the (constant) expected next-state soft value.
    """
    if len(expert) == 0 or len(learner) == 0:
        raise ValueError("critic objective needs nonempty expert and learner batches")
    S, A = q.shape
    nE, nP = len(expert), len(learner)
    sE, aE, sP, aP = expert.states, expert.actions, learner.states, learner.actions
    R_E = q[sE, aE] - gamma * v_next[sE, aE]
    R_P = q[sP, aP] - gamma * v_next[sP, aP]
    V = soft_state_value(q, policy, alpha)
    probs = policy.probs

    expert_term = R_E.sum() / nE
    grad = _scatter(np.full(nE, 1.0 / nE), sE, aE, (S, A))

    if variant.kind == "value":
        w = variant.mixture_weight
        learner_term = (w * (V[sE] - gamma * v_next[sE, aE]).sum() / nE
                        + (1.0 - w) * (V[sP] - gamma * v_next[sP, aP]).sum() / nP)
        state_w = (np.bincount(sE, minlength=S) * (w / nE)
                   + np.bincount(sP, minlength=S) * ((1.0 - w) / nP))
    elif variant.kind == "v0":
        learner_term = (1.0 - gamma) * float(initial_dist @ V)
        state_w = (1.0 - gamma) * initial_dist
    else:
        raise ValueError(f"unknown loss variant {variant.kind!r}")
    grad -= state_w[:, None] * probs

    dE, dP = R_E - lam_E, R_P - lam_pi
    reg = (dE @ dE) / nE + (dP @ dP) / nP
    grad -= c * (_scatter(2.0 * dE / nE, sE, aE, (S, A))
                 + _scatter(2.0 * dP / nP, sP, aP, (S, A)))

    value = expert_term - learner_term - c * reg
    terms = {"expert": float(expert_term), "learner": float(learner_term),
             "regularizer": float(reg), "c": c}
    return LossOutput(float(value), grad, terms, R_E, R_P)


def target_next_values(ensemble: CriticEnsemble, mdp: TabularMDP, target_policy: PolicyTable,
                       alpha: float) -> np.ndarray:
    """Expected next-state value from the min-of-twins target critic."""
    q_t = ensemble.target_q().min(axis=0)
    return next_state_values(mdp, q_t, target_policy, alpha)


def critic_loss_outputs(ensemble: CriticEnsemble, policy: PolicyTable, targets: AdaptiveTargets,
                        reg: RegularizerConfig, variant: LossVariant, expert_batch, policy_batch,
                        mdp: TabularMDP, alpha: float,
                        target_policy: PolicyTable | None = None,
                        v_next: np.ndarray | None = None) -> list[LossOutput]:
    """Per-twin objective outputs."""
    expert_batch, policy_batch = _as_batch(expert_batch), _as_batch(policy_batch)
    if v_next is None:
        tp = policy if target_policy is None else target_policy
        v_next = target_next_values(ensemble, mdp, tp, alpha)
    lam_E, lam_pi = effective_targets(targets, reg.variant)
    return [
        objective_on_q(q, v_next, policy, alpha, mdp.gamma, mdp.initial_dist, expert_batch,
                       policy_batch, lam_E, lam_pi, reg.c, variant)
        for q in ensemble.online_q()
    ]


def critic_loss(ensemble: CriticEnsemble, policy: PolicyTable, targets: AdaptiveTargets,
                reg: RegularizerConfig, variant: LossVariant, expert_batch, policy_batch,
                mdp: TabularMDP, alpha: float, target_policy: PolicyTable | None = None):
    """Summed objective over the online twins and its gradient.

    Returns ``(value, grad)`` with ``grad`` shaped like the stacked online
    quantile tensors, ``(n_critics, S, A, N)``.
    """
    outs = critic_loss_outputs(ensemble, policy, targets, reg, variant, expert_batch,
                               policy_batch, mdp, alpha, target_policy)
    grads = np.stack([o.grad_q[:, :, None] * c.weights for o, c in zip(outs, ensemble.online)])
    return sum(o.value for o in outs), grads
