"""Exactly solvable tabular MDPs.

Everything here is a direct linear solve or a fixed-point iteration on small
dense arrays, so the results double as oracles for the learning code.
Array conventions: ``transition[s, a, s']``, ``reward[s, a]``,
``logits[s, a]``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, xlogy

FORMAT_VERSION = "v1"


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration exhausts its iteration budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transition: np.ndarray
    env_reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    name: str = ""
    horizon: int = 50

    def __post_init__(self):
        for attr in ("transition", "env_reward", "initial_dist"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TabularMDP):
            return NotImplemented
        return (
            self.name == other.name
            and self.horizon == other.horizon
            and self.gamma == other.gamma
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.env_reward, other.env_reward)
            and np.array_equal(self.initial_dist, other.initial_dist)
        )

    __hash__ = None


def validate_mdp(mdp: TabularMDP, atol: float = 1e-12) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    P = mdp.transition
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        return [f"transition has shape {P.shape}, expected (S, A, S)"]
    S, A, _ = P.shape
    if S < 1 or A < 1:
        problems.append("num_states and num_actions must be positive")
    if mdp.env_reward.shape != (S, A):
        problems.append(f"env_reward has shape {mdp.env_reward.shape}, expected {(S, A)}")
    elif not np.all(np.isfinite(mdp.env_reward)):
        problems.append("env_reward contains non-finite entries")
    if np.any(P < 0):
        bad = np.argwhere(P < 0)[0]
        problems.append(f"transition[{bad[0]}][{bad[1]}] has a negative entry")
    row_sums = P.sum(axis=2)
    for s, a in np.argwhere(np.abs(row_sums - 1.0) > atol):
        problems.append(f"transition[{s}][{a}] sums to {row_sums[s, a]!r}, not 1")
    mu = mdp.initial_dist
    if mu.shape != (S,):
        problems.append(f"initial_dist has shape {mu.shape}, expected {(S,)}")
    else:
        if np.any(mu < 0):
            problems.append("initial_dist has negative entries")
        if abs(mu.sum() - 1.0) > atol:
            problems.append(f"initial_dist sums to {mu.sum()!r}, not 1")
    if not 0.0 <= mdp.gamma < 1.0:
        problems.append(f"gamma={mdp.gamma!r} must lie in [0, 1)")
    if mdp.horizon < 1:
        problems.append("horizon must be positive")
    return problems


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Softmax policy over per-state action logits."""

    logits: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        arr = np.array(self.logits, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @cached_property
    def log_probs(self) -> np.ndarray:
        x = self.logits - self.logits.max(axis=1, keepdims=True)
        return x - np.log(np.exp(x).sum(axis=1, keepdims=True))

    @cached_property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def entropy(self) -> np.ndarray:
        return -xlogy(self.probs, self.probs).sum(axis=1)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int, alpha: float = 1.0) -> "PolicyTable":
        return cls(np.zeros((num_states, num_actions)), alpha)

    @classmethod
    def from_probs(cls, probs, alpha: float = 1.0) -> "PolicyTable":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)), alpha)


@dataclass(frozen=True)
class OccupancyMeasure:
    rho: np.ndarray

    def state_marginal(self) -> np.ndarray:
        return self.rho.sum(axis=1)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    return_raw: float

    def __len__(self):
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int, int, bool]]:
        return list(
            zip(
                self.states.tolist(),
                self.actions.tolist(),
                self.next_states.tolist(),
                self.dones.tolist(),
            )
        )

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.steps == other.steps and self.return_raw == other.return_raw


def _check_finite(reward: np.ndarray, what: str = "reward"):
    if not np.all(np.isfinite(reward)):
        raise ValueError(f"{what} contains non-finite entries")


def policy_transition(mdp: TabularMDP, policy: PolicyTable) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s']`` induced by ``policy``."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def soft_state_value(q: np.ndarray, policy: PolicyTable, alpha: float) -> np.ndarray:
    """V(s) = sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s))."""
    probs = policy.probs
    # 0 * log 0 terms vanish; xlogy-style masking keeps -inf out of the sum
    ent = np.where(probs > 0, probs * policy.log_probs, 0.0)
    return (probs * q).sum(axis=1) - alpha * ent.sum(axis=1)


def soft_bellman_backup(
    mdp: TabularMDP, policy: PolicyTable, reward: np.ndarray, q: np.ndarray, alpha: float
) -> np.ndarray:
    """One application of the soft policy-evaluation operator."""
    return reward + mdp.gamma * mdp.transition @ soft_state_value(q, policy, alpha)


def soft_policy_evaluation(
    mdp: TabularMDP, policy: PolicyTable, reward: np.ndarray, alpha: float | None = None
) -> np.ndarray:
    """Unique soft Q of ``policy`` under ``reward``, by a dense linear solve.

    ``alpha`` defaults to the policy's own temperature.
    """
    reward = np.asarray(reward, dtype=float)
    _check_finite(reward)
    alpha = policy.alpha if alpha is None else alpha
    S, A = reward.shape
    probs = policy.probs
    ent = np.where(probs > 0, probs * policy.log_probs, 0.0).sum(axis=1)
    P = mdp.transition.reshape(S * A, S)
    # (P_pi Q)(s,a) = sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') Q(s',a')
    spread = np.zeros((S, S * A))
    for s in range(S):
        spread[s, s * A:(s + 1) * A] = probs[s]
    M = P @ spread
    b = reward.ravel() - mdp.gamma * alpha * (P @ ent)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * M, b)
    return q.reshape(S, A)


def soft_value_iteration(
    mdp: TabularMDP, alpha: float, tol: float = 1e-10, max_iter: int = 100_000
) -> tuple[np.ndarray, PolicyTable]:
    """Soft-optimal Q and its Boltzmann policy pi(a|s) ~ exp(Q(s,a)/alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    R, P, gamma = mdp.env_reward, mdp.transition, mdp.gamma
    q = np.zeros_like(R)
    residual = np.inf
    for _ in range(max_iter):
        v = alpha * logsumexp(q / alpha, axis=1)
        q_new = R + gamma * P @ v
        residual = np.max(np.abs(q_new - q))
        q = q_new
        if residual < tol:
            return q, PolicyTable(q / alpha, alpha)
    raise ConvergenceError("soft value iteration did not converge", residual)


def occupancy_measure(mdp: TabularMDP, policy: PolicyTable) -> OccupancyMeasure:
    """Normalized discounted state-action visitation (exact)."""
    S = mdp.num_states
    P_pi = policy_transition(mdp, policy)
    d = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi.T, (1 - mdp.gamma) * mdp.initial_dist)
    return OccupancyMeasure(d[:, None] * policy.probs)


def finite_horizon_return(mdp: TabularMDP, policy: PolicyTable, horizon: int | None = None) -> float:
    """Expected undiscounted sum of ``env_reward`` over ``horizon`` steps from p0."""
    horizon = mdp.horizon if horizon is None else horizon
    r_pi = (policy.probs * mdp.env_reward).sum(axis=1)
    P_pi = policy_transition(mdp, policy)
    d = mdp.initial_dist.copy()
    total = 0.0
    for _ in range(horizon):
        total += d @ r_pi
        d = d @ P_pi
    return float(total)


def sample_trajectory(
    mdp: TabularMDP, policy: PolicyTable, horizon: int, rng_seed: int | np.random.Generator
) -> Trajectory:
    """Roll out ``horizon`` steps. Inverse-CDF sampling keeps determinism exact."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(rng_seed)
    u = rng.random((horizon + 1, 2))
    pi_cdf = np.cumsum(policy.probs, axis=1)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    mu_cdf = np.cumsum(mdp.initial_dist)
    states = np.empty(horizon, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    next_states = np.empty(horizon, dtype=np.int64)
    s = _draw(mu_cdf, u[0, 0])
    total = 0.0
    for t in range(horizon):
        a = _draw(pi_cdf[s], u[t + 1, 0])
        s2 = _draw(P_cdf[s, a], u[t + 1, 1])
        states[t], actions[t], next_states[t] = s, a, s2
        total += mdp.env_reward[s, a]
        s = s2
    dones = np.zeros(horizon, dtype=bool)
    dones[-1] = True
    return Trajectory(states, actions, next_states, dones, float(total))


def _draw(cdf: np.ndarray, u: float) -> int:
    # cdf[-1] may fall a hair short of 1, clamp the index
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


# ---------------------------------------------------------------- presets

GRID_SIZE = 5
GRID_SLIP = 0.1
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


def make_gridworld(size: int = GRID_SIZE, slip: float = GRID_SLIP, gamma: float = 0.9,
                   horizon: int = 50) -> TabularMDP:
    """Slippery gridworld with the goal in the bottom-right corner.

    Each move succeeds with probability ``1 - slip``; otherwise a uniformly
    random move (possibly the intended one) is taken. Bumping a wall keeps the
    agent in place. Reward 1 is paid for every step spent in the goal cell.
    Starts are uniform over the non-goal cells.
    """
    S, A = size * size, len(_MOVES)
    goal = S - 1
    P = np.zeros((S, A, S))
    for s in range(S):
        r, c = divmod(s, size)
        dest = []
        for dr, dc in _MOVES:
            rr = min(max(r + dr, 0), size - 1)
            cc = min(max(c + dc, 0), size - 1)
            dest.append(rr * size + cc)
        for a in range(A):
            P[s, a, dest[a]] += 1 - slip
            for d in dest:
                P[s, a, d] += slip / A
    R = np.zeros((S, A))
    R[goal] = 1.0
    mu = np.ones(S)
    mu[goal] = 0.0
    mu /= mu.sum()
    return TabularMDP(P, R, gamma, mu, name=f"grid{size}x{size}", horizon=horizon)


def make_random_mdp(num_states: int, num_actions: int = 3, seed: int = 0, gamma: float = 0.9,
                    horizon: int = 50) -> TabularMDP:
    """Dirichlet(1) transition rows, U[0,1] rewards, uniform start."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    # renormalise so rows sum to 1 to within a couple of ulps
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    mu = np.full(num_states, 1.0 / num_states)
    return TabularMDP(P, R, gamma, mu, name=f"rand-k{num_states}-s{seed}", horizon=horizon)


_RAND_RE = re.compile(r"^rand-k(\d+)-s(\d+)$")

SHIPPED_PRESETS = ("grid5x5", "rand-k5-s0", "rand-k10-s1")


def get_mdp(mdp_id: str) -> TabularMDP:
    """Look up a preset by id: ``grid5x5`` or ``rand-k{n}-s{seed}``."""
    if mdp_id == "grid5x5":
        return make_gridworld()
    m = _RAND_RE.match(mdp_id)
    if m:
        return make_random_mdp(int(m.group(1)), seed=int(m.group(2)))
    raise KeyError(f"unknown MDP preset {mdp_id!r}")


# ---------------------------------------------------------------- JSON

def mdp_to_dict(mdp: TabularMDP) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "tabular_mdp",
        "name": mdp.name,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "gamma": mdp.gamma,
        "horizon": mdp.horizon,
        "transition": mdp.transition.tolist(),
        "env_reward": mdp.env_reward.tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
    }


def mdp_from_dict(doc: dict) -> TabularMDP:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported MDP document version {doc.get('version')!r}")
    S, A = doc["num_states"], doc["num_actions"]
    P = np.array(doc["transition"], dtype=float)
    if P.shape != (S, A, S):
        raise ValueError(f"transition shape {P.shape} does not match ({S}, {A}, {S})")
    return TabularMDP(
        P,
        np.array(doc["env_reward"], dtype=float).reshape(S, A),
        float(doc["gamma"]),
        np.array(doc["initial_dist"], dtype=float).reshape(S),
        name=doc.get("name", ""),
        horizon=int(doc.get("horizon", 50)),
    )


def save_mdp(mdp: TabularMDP, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp)))


def load_mdp(path) -> TabularMDP:
    return mdp_from_dict(json.loads(Path(path).read_text()))
