"""Tabular RIZE training loop.

One environment transition per gradient step. Each step: twin critic ascent
on the implicit-reward objective, a soft policy-improvement step on the
logits against the min of the twins, target updates, then Polyak syncing of
target critics and the target policy.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .demos import DemoSet, load_demos
from .evaluate import RunRecord
from .mdp import (PolicyTable, TabularMDP, finite_horizon_return, get_mdp, soft_state_value,
                  soft_value_iteration)
from .objective import (AdaptiveTargets, Batch, LossVariant, RegularizerConfig,
                        critic_loss_outputs, effective_targets, lambda_step, next_state_values,
                        objective_on_q, reward_bounds)
from .quantile import CriticEnsemble, polyak_update

METHODS = ("rize", "iq_learn", "fixed_target", "coupled", "plain_l2", "bc")
METHOD_REGULARIZER = {
    "rize": "adaptive",
    "iq_learn": "plain-L2",
    "fixed_target": "fixed-target",
    "coupled": "coupled-target",
    "plain_l2": "plain-L2",
}


class DivergenceError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class GradientCheckError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    method: str = "rize"
    alpha: float = 0.01
    c: float = 0.25
    gamma: float | None = None  # None: use the MDP's discount
    lr_critic: float = 50.0
    lr_policy: float = 1.0
    lr_lambda_E: float = 1e-3
    lr_lambda_pi: float = 1e-4
    lambda_E_init: float = 10.0
    lambda_pi_init: float = 5.0
    n_quantiles: int = 24
    polyak_rate: float = 0.005
    twin_critics: bool = True
    loss_variant: str = "value"
    mixture_weight: float = 0.5
    total_steps: int = 10_000
    batch_size: int = 64
    eval_every: int = 500
    seed: int = 0
    replay_capacity: int = 100_000
    pretrain_steps: int = 1000
    q_clip: float | None = None
    closed_form_policy: bool = False
    critic_init_scale: float = 0.0
    log_every: int = 10
    grad_check_every: int = 1000
    grad_check_tol: float = 1e-4
    max_abs_q: float = 1e6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.loss_variant not in ("value", "v0"):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        for name in ("lr_critic", "lr_policy", "lr_lambda_E", "lr_lambda_pi", "c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_quantiles < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("n_quantiles, batch_size and eval_every must be positive")

    @property
    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.c, METHOD_REGULARIZER.get(self.method, "adaptive"))

    @property
    def variant(self) -> LossVariant:
        return LossVariant(self.loss_variant, self.mixture_weight)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)


class ReplayBuffer:
    """Fixed-capacity ring of (s, a, s') transitions with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.data = np.zeros((capacity, 3), dtype=np.int64)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def add(self, s: int, a: int, s2: int):
        self.data[self.cursor] = (s, a, s2)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.data[rng.integers(0, self.size, n)]

    def contents(self) -> np.ndarray:
        """Stored transitions, oldest first."""
        if self.size < self.capacity:
            return self.data[:self.size].copy()
        return np.roll(self.data, -self.cursor, axis=0)


SERIES_KEYS = ("step", "lambda_E", "lambda_pi", "mean_R_E", "mean_R_pi", "bound_lo", "bound_hi",
               "n_outside", "n_sampled", "loss")


@dataclass
class TrainState:
    step: int
    ensemble: CriticEnsemble
    logits: np.ndarray
    target_logits: np.ndarray
    targets: AdaptiveTargets
    rng: np.random.Generator
    replay: ReplayBuffer
    env_state: int = 0
    env_t: int = 0
    series: dict = field(default_factory=lambda: {k: [] for k in SERIES_KEYS})
    grad_checks: list = field(default_factory=list)
    last_terms: dict = field(default_factory=dict)
    _window: list = field(default_factory=lambda: [0.0] * 7)

    def policy(self, alpha: float) -> PolicyTable:
        return PolicyTable(self.logits, alpha)

    def target_policy(self, alpha: float) -> PolicyTable:
        return PolicyTable(self.target_logits, alpha)


def _with_gamma(mdp: TabularMDP, cfg: TrainerConfig) -> TabularMDP:
    if cfg.gamma is None or cfg.gamma == mdp.gamma:
        return mdp
    return dataclasses.replace(mdp, gamma=cfg.gamma)


def init_state(cfg: TrainerConfig, mdp: TabularMDP) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    S, A = mdp.num_states, mdp.num_actions
    ensemble = CriticEnsemble.create(S, A, cfg.n_quantiles, 2 if cfg.twin_critics else 1,
                                     cfg.polyak_rate, cfg.critic_init_scale, rng)
    lam_E, lam_pi = cfg.lambda_E_init, cfg.lambda_pi_init
    if cfg.method == "coupled":
        lam_pi = lam_E
    targets = AdaptiveTargets(lam_E, lam_pi, cfg.lr_lambda_E, cfg.lr_lambda_pi)
    state = TrainState(0, ensemble, np.zeros((S, A)), np.zeros((S, A)), targets, rng,
                       ReplayBuffer(cfg.replay_capacity))
    state.env_state = _reset(mdp, rng)
    return state


def _draw(p: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from the probability row ``p``."""
    cdf = np.cumsum(p)
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), len(p) - 1)


def _reset(mdp: TabularMDP, rng: np.random.Generator) -> int:
    return _draw(mdp.initial_dist, rng.random())


def env_step(state: TrainState, mdp: TabularMDP, probs: np.ndarray | None = None):
    """Advance the environment one step and store the transition.

    ``probs`` is the behaviour policy (uniform when None).
    """
    rng, s = state.rng, state.env_state
    A = mdp.num_actions
    a = int(rng.integers(A)) if probs is None else _draw(probs[s], rng.random())
    s2 = _draw(mdp.transition[s, a], rng.random())
    state.replay.add(s, a, s2)
    state.env_t += 1
    if state.env_t >= mdp.horizon:
        state.env_t = 0
        state.env_state = _reset(mdp, rng)
    else:
        state.env_state = s2


def pretrain_fill(state: TrainState, mdp: TabularMDP, n: int):
    for _ in range(n):
        env_step(state, mdp)


def _update_lambdas(targets: AdaptiveTargets, method: str, R_E: np.ndarray,
                    R_P: np.ndarray) -> AdaptiveTargets:
    if method == "rize":
        return lambda_step(targets, R_E, R_P)
    if method == "coupled":
        pooled = np.concatenate([R_E, R_P]).mean()
        lam = targets.lambda_E - targets.lr_E * 2.0 * (targets.lambda_E - pooled)
        return dataclasses.replace(targets, lambda_E=float(lam), lambda_pi=float(lam))
    return targets


def policy_gradient(q_min: np.ndarray, policy: PolicyTable, alpha: float,
                    states: np.ndarray) -> np.ndarray:
    """Gradient wrt logits of mean_s sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s)).

    Per state it is pi(b|s) (A(s,b) - sum_a pi(a|s) A(s,a)) with
    A = Q - alpha log pi.
    """
    S, A = q_min.shape
    probs = policy.probs
    adv = q_min - alpha * policy.log_probs
    per_state = probs * (adv - (probs * adv).sum(axis=1, keepdims=True))
    counts = np.bincount(states, minlength=S) / len(states)
    return counts[:, None] * per_state


def _finite_difference_check(state, cfg, mdp, v_next, policy, expert, learner, lam, rng):
    """Central differences on a few quantile entries of the first online critic."""
    critic = state.ensemble.online[0]
    w = critic.weights
    reg, variant = cfg.regularizer, cfg.variant

    def objective(z):
        return objective_on_q(z @ w, v_next, policy, cfg.alpha, mdp.gamma, mdp.initial_dist,
                              expert, learner, lam[0], lam[1], reg.c, variant)

    base = objective(critic.z)
    grad = base.grad_q[:, :, None] * w
    S, A, N = critic.z.shape
    picks = [(int(s), int(a)) for s, a in zip(learner.states[:4], learner.actions[:4])]
    picks += [(int(s), int(a)) for s, a in zip(expert.states[:4], expert.actions[:4])]
    picks += [(int(rng.integers(S)), int(rng.integers(A))) for _ in range(4)]
    h, worst = 1e-3, 0.0  # objective is quadratic in z: no truncation error
    for s, a in picks:
        i = int(rng.integers(N))
        z = critic.z.copy()
        z[s, a, i] += h
        up = objective(z).value
        z[s, a, i] -= 2 * h
        down = objective(z).value
        fd = (up - down) / (2 * h)
        denom = max(abs(fd), abs(grad[s, a, i]), 1e-8)
        worst = max(worst, abs(fd - grad[s, a, i]) / denom)
    return worst


def rize_step(state: TrainState, demos_or_data, mdp: TabularMDP, cfg: TrainerConfig) -> TrainState:
    """One Algorithm-1 iteration (critic, policy, targets, Polyak). Mutates ``state``."""
    if isinstance(demos_or_data, DemoSet):
        exp_s, exp_a, _ = demos_or_data.transitions()
    else:
        exp_s, exp_a = demos_or_data[0], demos_or_data[1]
    rng = state.rng
    B = cfg.batch_size
    pick = rng.integers(0, len(exp_s), B)
    expert = Batch(exp_s[pick], exp_a[pick])
    if len(state.replay) == 0:
        raise ValueError("replay buffer is empty; fill it before training")
    tr = state.replay.sample(rng, B)
    learner = Batch(tr[:, 0], tr[:, 1])

    alpha = cfg.alpha
    policy = state.policy(alpha)
    target_policy = state.target_policy(alpha)
    ens = state.ensemble

    # (1) expectations of the online critics and the bootstrapped next values
    q_t = ens.target_q().min(axis=0)
    if cfg.q_clip is not None:
        q_t = np.clip(q_t, -cfg.q_clip, cfg.q_clip)
    v_next = next_state_values(mdp, q_t, target_policy, alpha)
    targets = state.targets
    lam = effective_targets(targets, cfg.regularizer.variant)

    # (2) critic ascent, both twins on the same batch
    outs = critic_loss_outputs(ens, policy, targets, cfg.regularizer, cfg.variant, expert,
                               learner, mdp, alpha, v_next=v_next)
    if cfg.grad_check_every > 0 and state.step % cfg.grad_check_every == 0:
        err = _finite_difference_check(state, cfg, mdp, v_next, policy, expert, learner, lam, rng)
        state.grad_checks.append((state.step, err))
        if err > cfg.grad_check_tol:
            raise GradientCheckError(f"step {state.step}: gradient check failed (rel err {err:.2e})")
    for critic, out in zip(ens.online, outs):
        if cfg.lr_critic:
            critic.z += cfg.lr_critic * out.grad_q[:, :, None] * critic.weights
    q_online = ens.online_q()
    if not np.all(np.isfinite(q_online)) or np.max(np.abs(q_online)) > cfg.max_abs_q:
        raise DivergenceError(f"critic diverged at step {state.step}", snapshot(state))

    # (3) policy improvement against the min of the twins
    q_min = q_online.min(axis=0)
    if cfg.closed_form_policy:
        state.logits = q_min / alpha
    elif cfg.lr_policy:
        states = np.concatenate([learner.states, expert.states])
        state.logits = state.logits + cfg.lr_policy * policy_gradient(q_min, policy, alpha, states)

    # (4) targets move toward the batch-mean implicit rewards (pre-update critics)
    R_E = np.mean([o.rewards_E for o in outs], axis=0)
    R_P = np.mean([o.rewards_pi for o in outs], axis=0)
    lo, hi = reward_bounds(cfg.c, targets) if cfg.c > 0 else (-np.inf, np.inf)
    n_out = int(np.sum((R_E < lo) | (R_E > hi)) + np.sum((R_P < lo) | (R_P > hi)))
    state.targets = _update_lambdas(targets, cfg.method, R_E, R_P)

    # (5) Polyak sync of target critics and target policy
    polyak_update(ens)
    state.target_logits = state.target_logits + cfg.polyak_rate * (state.logits - state.target_logits)

    loss = float(np.mean([o.value for o in outs]))
    state.last_terms = {k: float(np.mean([o.terms[k] for o in outs])) for k in outs[0].terms}
    state.last_terms["loss"] = loss
    _log(state, cfg, targets, R_E, R_P, lo, hi, n_out, loss)
    state.step += 1
    return state


def _log(state, cfg, targets, R_E, R_P, lo, hi, n_out, loss):
    win = state._window
    win[0] += R_E.mean()
    win[1] += R_P.mean()
    win[2] += n_out
    win[3] += len(R_E) + len(R_P)
    win[4] += loss
    win[5] += 1
    if (state.step + 1) % cfg.log_every:
        return
    n = win[5]
    ser = state.series
    ser["step"].append(state.step + 1)
    ser["lambda_E"].append(targets.lambda_E)
    ser["lambda_pi"].append(targets.lambda_pi)
    ser["mean_R_E"].append(win[0] / n)
    ser["mean_R_pi"].append(win[1] / n)
    ser["bound_lo"].append(lo)
    ser["bound_hi"].append(hi)
    ser["n_outside"].append(int(win[2]))
    ser["n_sampled"].append(int(win[3]))
    ser["loss"].append(win[4] / n)
    state._window = [0.0] * 7


def snapshot(state: TrainState) -> dict:
    return {
        "step": state.step,
        "online_z": [c.z.tolist() for c in state.ensemble.online],
        "target_z": [c.z.tolist() for c in state.ensemble.target],
        "logits": state.logits.tolist(),
        "targets": dataclasses.asdict(state.targets),
    }


def expert_reference_return(mdp: TabularMDP, demos: DemoSet) -> float:
    """Exact expected horizon return of the soft-optimal expert that made ``demos``."""
    _, expert = soft_value_iteration(mdp, demos.alpha_expert)
    return finite_horizon_return(mdp, expert, demos.horizon or mdp.horizon)


def _resolve_demos(demos) -> DemoSet:
    return demos if isinstance(demos, DemoSet) else load_demos(demos)


def train(cfg: TrainerConfig, mdp_id: str, demos, return_state: bool = False):
    """Run ``cfg.total_steps`` steps and return a RunRecord (and the final state if asked)."""
    demos = _resolve_demos(demos)
    if demos.source_mdp_id != mdp_id:
        raise ValueError(f"demo set was generated on {demos.source_mdp_id!r}, not {mdp_id!r}")
    mdp = _with_gamma(get_mdp(mdp_id), cfg)
    expert_return = expert_reference_return(mdp, demos)
    meta = {"horizon": mdp.horizon, "n_demos": len(demos), "demo_mean_return": demos.mean_return,
            "entropy_on_expert_term": False, "lambda_update_before_polyak": True}

    if cfg.method == "bc":
        from .baselines import behavior_cloning

        policy = behavior_cloning(demos, mdp_id)
        steps = list(range(cfg.eval_every, cfg.total_steps + 1, cfg.eval_every))
        ret = finite_horizon_return(mdp, policy)
        record = RunRecord(mdp_id, cfg.method, cfg.seed, steps, [ret] * len(steps), expert_return,
                           cfg.to_dict(), {}, meta)
        return (record, None) if return_state else record

    state = init_state(cfg, mdp)
    data = demos.transitions()
    pretrain_fill(state, mdp, cfg.pretrain_steps)
    eval_steps, returns = [], []
    at_eval = {k: [] for k in ("lambda_E", "lambda_pi", "mean_R_E", "mean_R_pi")}
    for t in range(cfg.total_steps):
        env_step(state, mdp, state.policy(cfg.alpha).probs)
        rize_step(state, data, mdp, cfg)
        if (t + 1) % cfg.eval_every == 0:
            eval_steps.append(t + 1)
            returns.append(finite_horizon_return(mdp, state.policy(cfg.alpha)))
            at_eval["lambda_E"].append(state.targets.lambda_E)
            at_eval["lambda_pi"].append(state.targets.lambda_pi)
            at_eval["mean_R_E"].append(_last(state.series["mean_R_E"]))
            at_eval["mean_R_pi"].append(_last(state.series["mean_R_pi"]))
    series = {k: list(v) for k, v in state.series.items()}
    series["at_eval"] = at_eval
    series["grad_checks"] = [list(gc) for gc in state.grad_checks]
    record = RunRecord(mdp_id, cfg.method, cfg.seed, eval_steps, returns, expert_return,
                       cfg.to_dict(), series, meta)
    return (record, state) if return_state else record


def _last(xs):
    return float(xs[-1]) if xs else float("nan")
