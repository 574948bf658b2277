"""Independent numerical checks for the theory the library relies on.

Each check returns a :class:`CheckResult` holding the measured error and the
tolerance it is held to. ``run_checks`` runs the suite with fixed seeds; the
``verify`` subcommand of the CLI is a thin wrapper around it.

Closed forms are looked up through their module (``objective.<name>``) at
call time, so a perturbed implementation is caught here rather than
silently copied.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluate, objective
from .mdp import (SHIPPED_PRESETS, PolicyTable, get_mdp, make_random_mdp,
                  soft_policy_evaluation)
from .objective import AdaptiveTargets, LossVariant, RegularizerConfig
from .quantile import CriticEnsemble, QuantileCritic, iterate_backups, uniform_taus


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<22} error={self.error:.3e} tol={self.tolerance:.1e} "
                f"({self.seconds:.2f}s)")

    def to_dict(self) -> dict:
        return {"name": self.name, "error": self.error, "tolerance": self.tolerance,
                "passed": self.passed, "seconds": self.seconds, "detail": self.detail}


def random_draws(n: int = 10_000, seed: int = 0) -> dict:
    """Occupancies in [0,1], c in [0.05, 1], targets in [-10, 10]^2."""
    rng = np.random.default_rng(seed)
    return {
        "rho_E": rng.uniform(0.0, 1.0, n),
        "rho_pi": rng.uniform(0.0, 1.0, n),
        "c": rng.uniform(0.05, 1.0, n),
        "lam_E": rng.uniform(-10.0, 10.0, n),
        "lam_pi": rng.uniform(-10.0, 10.0, n),
    }


def pointwise_objective(R, rho_E, rho_pi, c, lam_E, lam_pi):
    """Per-(s,a) part of the regularized critic objective as a function of R."""
    return rho_E * R - rho_pi * R - c * (rho_E * (R - lam_E) ** 2 + rho_pi * (R - lam_pi) ** 2)


def _objective_slope(R, rho_E, rho_pi, c, lam_E, lam_pi):
    return rho_E - rho_pi - 2.0 * c * (rho_E * (R - lam_E) + rho_pi * (R - lam_pi))


def maximize_pointwise(rho_E, rho_pi, c, lam_E, lam_pi, iters: int = 200) -> np.ndarray:
    """Vectorised bisection on the slope of the (strictly concave) pointwise objective."""
    lo = np.minimum(lam_E, lam_pi) - 1.0 / (2.0 * c) - 1.0
    hi = np.maximum(lam_E, lam_pi) + 1.0 / (2.0 * c) + 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        rising = _objective_slope(mid, rho_E, rho_pi, c, lam_E, lam_pi) > 0
        lo = np.where(rising, mid, lo)
        hi = np.where(rising, hi, mid)
        if np.all(hi - lo <= 0):
            break
    return 0.5 * (lo + hi)


def _closed_form_batch(d: dict) -> np.ndarray:
    # elementwise so a draw-dependent c is honoured
    fn = objective.optimal_reward_closed_form
    return np.array([fn(re, rp, c, AdaptiveTargets(le, lp))
                     for re, rp, c, le, lp in zip(d["rho_E"], d["rho_pi"], d["c"], d["lam_E"],
                                                  d["lam_pi"])])


def check_optimal_reward(n: int = 10_000, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    d = random_draws(n, seed)
    numeric = maximize_pointwise(**d)
    closed = _closed_form_batch(d)
    err = float(np.max(np.abs(numeric - closed)))
    slope = float(np.max(np.abs(_objective_slope(closed, **d))))
    ok = err <= tol and slope <= 1e-10
    return CheckResult("optimal_reward", err, tol, ok, detail={"max_slope_at_closed_form": slope})


def check_reward_bounds(n: int = 10_000, seed: int = 0, slack: float = 1e-12) -> CheckResult:
    d = random_draws(n, seed)
    closed = _closed_form_batch(d)
    lo = np.minimum(d["lam_E"], d["lam_pi"]) - 1.0 / (2.0 * d["c"])
    hi = np.maximum(d["lam_E"], d["lam_pi"]) + 1.0 / (2.0 * d["c"])
    # the library's bound helper must agree with the inline formula
    lib = np.array([objective.reward_bounds(c, AdaptiveTargets(le, lp))
                    for c, le, lp in zip(d["c"], d["lam_E"], d["lam_pi"])])
    mismatch = float(np.max(np.abs(lib - np.stack([lo, hi], axis=1))))
    violation = float(np.max(np.maximum(lo - closed, closed - hi)))
    ok = violation <= slack and mismatch <= 1e-12
    return CheckResult("reward_bounds", max(violation, 0.0), slack, ok,
                       detail={"bound_helper_mismatch": mismatch})


def check_target_convergence(lr_E: float = 1e-2, lr_pi: float = 1e-3, steps: int = 10_000,
                             lam_E: float = 10.0, lam_pi: float = 5.0,
                             tol: float = 1e-6) -> CheckResult:
    """Matched occupancies, alternating target updates against the optimal reward."""
    targets = AdaptiveTargets(lam_E, lam_pi, lr_E, lr_pi)
    gaps = [abs(lam_E - lam_pi)]
    for k in range(steps):
        r = objective.optimal_reward_closed_form(0.5, 0.5, 0.25, targets)
        stepped = objective.lambda_step(targets, [r], [r])
        # alternate: even steps move lambda_E, odd steps move lambda_pi
        if k % 2 == 0:
            targets = AdaptiveTargets(stepped.lambda_E, targets.lambda_pi, lr_E, lr_pi)
        else:
            targets = AdaptiveTargets(targets.lambda_E, stepped.lambda_pi, lr_E, lr_pi)
        gaps.append(abs(targets.lambda_E - targets.lambda_pi))
        if gaps[-1] < tol * 1e-3:
            break
    gaps = np.array(gaps)
    monotone = bool(np.all(np.diff(gaps) <= 0))
    reached = np.flatnonzero(gaps < tol)
    ok = monotone and reached.size > 0
    return CheckResult("target_convergence", float(gaps[-1]), tol, ok,
                       detail={"monotone": monotone,
                               "steps_to_tol": int(reached[0]) if reached.size else None})


def _fixed_policy(mdp, seed: int, alpha: float) -> PolicyTable:
    rng = np.random.default_rng(seed)
    return PolicyTable(rng.normal(size=(mdp.num_states, mdp.num_actions)), alpha)


def check_quantile_expectation(presets=SHIPPED_PRESETS, alpha: float = 0.1, n: int = 24,
                               tol: float = 1e-7) -> CheckResult:
    """Expectation of the distributional fixed point equals the soft Q of the same policy."""
    errs = {}
    for i, mdp_id in enumerate(presets):
        mdp = get_mdp(mdp_id)
        policy = _fixed_policy(mdp, i, alpha)
        z, hist = iterate_backups(mdp, policy, mdp.env_reward, alpha, n=n)
        q = soft_policy_evaluation(mdp, policy, mdp.env_reward, alpha)
        errs[mdp_id] = float(np.max(np.abs(z @ np.diff(uniform_taus(n)) - q)))
    err = max(errs.values())
    return CheckResult("quantile_expectation", err, tol, err <= tol, detail=errs)


def random_instance(rng: np.random.Generator):
    S = int(rng.integers(2, 7))
    A = int(rng.integers(2, 4))
    gamma = float(rng.uniform(0.5, 0.95))
    mdp = make_random_mdp(S, A, seed=int(rng.integers(2**31)), gamma=gamma)
    alpha = float(rng.uniform(0.0, 0.5))
    policy = PolicyTable(rng.normal(size=(S, A)), alpha)
    reward = rng.normal(size=(S, A))
    z0 = np.sort(rng.normal(scale=5.0, size=(S, A, 12)), axis=2)
    return mdp, policy, reward, alpha, z0


def check_contraction(n_instances: int = 100, seed: int = 0, slack: float = 1e-6,
                      gap_floor: float = 1e-7) -> CheckResult:
    """Successive W1 gaps shrink by at least gamma once past the first step.

    Ratios are only formed while the gap exceeds ``gap_floor``; below it the
    ratio measures rounding noise, not the operator.
    """
    rng = np.random.default_rng(seed)
    worst, worst_gamma = -np.inf, None
    for _ in range(n_instances):
        mdp, policy, reward, alpha, z0 = random_instance(rng)
        _, hist = iterate_backups(mdp, policy, reward, alpha, n=12, tol=gap_floor, max_iter=400,
                                  z0=z0)
        live = hist[1:]
        prev = hist[:-1][:len(live)]
        keep = (prev > gap_floor) & (live > gap_floor)
        if np.any(keep):
            excess = float(np.max(live[keep] / prev[keep] - mdp.gamma))
            if excess > worst:
                worst, worst_gamma = excess, mdp.gamma
    worst = max(worst, 0.0) if np.isfinite(worst) else 0.0
    return CheckResult("contraction", worst, slack, worst <= slack,
                       detail={"worst_gamma": worst_gamma})


def _random_loss_setup(rng, S=4, A=3, N=6):
    mdp = make_random_mdp(S, A, seed=int(rng.integers(2**31)), gamma=float(rng.uniform(0.5, 0.95)))
    ens = CriticEnsemble.create(S, A, N, 2, 0.005, init_scale=1.0, rng=rng)
    for c in ens.target:
        c.z[...] = np.sort(rng.normal(size=c.z.shape), axis=2)
    alpha = float(rng.uniform(0.01, 0.5))
    policy = PolicyTable(rng.normal(size=(S, A)), alpha)
    target_policy = PolicyTable(rng.normal(size=(S, A)), alpha)
    targets = AdaptiveTargets(*rng.uniform(-3, 3, 2))
    reg = RegularizerConfig(float(rng.uniform(0.05, 1.0)), "adaptive")
    expert = rng.integers(0, [S, A], size=(int(rng.integers(1, 9)), 2))
    learner = rng.integers(0, [S, A], size=(int(rng.integers(1, 9)), 2))
    return mdp, ens, policy, target_policy, targets, reg, expert, learner, alpha


def check_loss_gradient(n_instances: int = 50, seed: int = 0, h: float = 1e-5,
                        tol: float = 1e-5) -> CheckResult:
    """Analytic critic-loss gradients against central differences on every quantile entry."""
    rng = np.random.default_rng(seed)
    worst = {}
    for kind in ("value", "v0"):
        variant = LossVariant(kind, float(rng.uniform(0.0, 1.0)))
        err_kind = 0.0
        for _ in range(n_instances):
            mdp, ens, pol, tpol, tg, reg, eb, pb, alpha = _random_loss_setup(rng)

            def loss():
                return objective.critic_loss(ens, pol, tg, reg, variant, eb, pb, mdp, alpha, tpol)[0]

            _, grad = objective.critic_loss(ens, pol, tg, reg, variant, eb, pb, mdp, alpha, tpol)
            fd = np.zeros_like(grad)
            for k, critic in enumerate(ens.online):
                # entries are perturbed in place; order is irrelevant to the objective
                for idx in np.ndindex(critic.z.shape):
                    orig = critic.z[idx]
                    critic.z[idx] = orig + h
                    up = loss()
                    critic.z[idx] = orig - h
                    down = loss()
                    critic.z[idx] = orig
                    fd[(k,) + idx] = (up - down) / (2.0 * h)
            rel = float(np.max(np.abs(fd - grad)) / max(np.max(np.abs(grad)), 1e-12))
            err_kind = max(err_kind, rel)
        worst[kind] = err_kind
    err = max(worst.values())
    return CheckResult("loss_gradient", err, tol, err < tol, detail=worst)


def check_inverse_operator(presets=SHIPPED_PRESETS, alpha: float = 0.1,
                           tol: float = 1e-8) -> CheckResult:
    errs = {}
    for i, mdp_id in enumerate(presets):
        mdp = get_mdp(mdp_id)
        policy = _fixed_policy(mdp, 100 + i, alpha)
        q = soft_policy_evaluation(mdp, policy, mdp.env_reward, alpha)
        r = objective.implicit_reward(q, mdp, policy, alpha)
        errs[mdp_id] = float(np.max(np.abs(r - mdp.env_reward)))
    err = max(errs.values())
    return CheckResult("inverse_operator", err, tol, err <= tol, detail=errs)


def check_fixed_target_reduction(steps: int = 1000, seed: int = 0,
                                 tol: float = 1e-12) -> CheckResult:
    """Frozen-target RIZE and the fixed-target baseline produce the same loss trajectory."""
    from .baselines import FIXED_TARGETS
    from .demos import generate_demos
    from .trainer import TrainerConfig, env_step, init_state, pretrain_fill, rize_step

    mdp = get_mdp("grid5x5")
    demos = generate_demos(mdp, 3, rng_seed=seed)
    data = demos.transitions()
    r_E, r_pi = FIXED_TARGETS
    base = dict(seed=seed, total_steps=steps, lambda_E_init=r_E, lambda_pi_init=r_pi,
                pretrain_steps=200, log_every=1, grad_check_every=0)
    cfg_a = TrainerConfig(method="rize", lr_lambda_E=0.0, lr_lambda_pi=0.0, **base)
    cfg_b = TrainerConfig(method="fixed_target", **base)
    runs = []
    for cfg in (cfg_a, cfg_b):
        state = init_state(cfg, mdp)
        pretrain_fill(state, mdp, cfg.pretrain_steps)
        runs.append((cfg, state))
    worst, worst_direct = 0.0, 0.0
    for t in range(steps):
        losses = []
        for cfg, state in runs:
            env_step(state, mdp, state.policy(cfg.alpha).probs)
            rize_step(state, data, mdp, cfg)
            losses.append(state.last_terms["loss"])
        worst = max(worst, abs(losses[0] - losses[1]))
        if t % 100 == 0:
            worst_direct = max(worst_direct, _direct_baseline_gap(runs[0], data, mdp))
    z_gap = max(float(np.max(np.abs(a.z - b.z)))
                for a, b in zip(runs[0][1].ensemble.online, runs[1][1].ensemble.online))
    err = max(worst, worst_direct, z_gap)
    return CheckResult("fixed_target_reduction", err, tol, err <= tol,
                       detail={"loss_gap": worst, "direct_loss_gap": worst_direct,
                               "critic_gap": z_gap, "steps": steps})


def _direct_baseline_gap(run, data, mdp) -> float:
    """RIZE critic_loss with frozen targets against fixed_target_loss on one fresh batch."""
    from .baselines import FIXED_TARGETS, fixed_target_loss

    cfg, state = run
    rng = np.random.default_rng(state.step)
    pick = rng.integers(0, len(data[0]), 32)
    eb = np.stack([data[0][pick], data[1][pick]], axis=1)
    pb = state.replay.sample(rng, 32)[:, :2]
    pol, tpol = state.policy(cfg.alpha), state.target_policy(cfg.alpha)
    a = objective.critic_loss(state.ensemble, pol, AdaptiveTargets(*FIXED_TARGETS),
                              RegularizerConfig(cfg.c, "adaptive"), cfg.variant, eb, pb, mdp,
                              cfg.alpha, tpol)
    b = fixed_target_loss(*FIXED_TARGETS, state.ensemble, pol, cfg.c, cfg.variant, eb, pb, mdp,
                          cfg.alpha, tpol)
    return max(abs(a[0] - b[0]), float(np.max(np.abs(a[1] - b[1]))))


def check_aggregation_fixtures() -> CheckResult:
    errs = {
        "iqm": abs(evaluate.iqm(np.arange(1, 9)) - 4.5),
        "optimality_gap": abs(evaluate.optimality_gap([0.5, 1.2]) - 0.25),
    }
    lo, hi = evaluate.stratified_bootstrap_ci({"t": [0.7] * 5}, "iqm", n_resamples=200)
    errs["constant_ci_width"] = abs(hi - lo) + abs(lo - 0.7)
    err = max(errs.values())
    return CheckResult("aggregation_fixtures", err, 0.0, err == 0.0, detail=errs)


CHECKS = {
    "optimal_reward": check_optimal_reward,
    "reward_bounds": check_reward_bounds,
    "target_convergence": check_target_convergence,
    "quantile_expectation": check_quantile_expectation,
    "contraction": check_contraction,
    "loss_gradient": check_loss_gradient,
    "inverse_operator": check_inverse_operator,
    "fixed_target_reduction": check_fixed_target_reduction,
    "aggregation_fixtures": check_aggregation_fixtures,
}


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            res = CHECKS[name]()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            res = CheckResult(name, float("inf"), 0.0, False, detail={"exception": repr(exc)})
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
