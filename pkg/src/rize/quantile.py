"""Quantile representation of the soft return distribution Z(s, a).

A critic stores ``z[s, a, i]``, the value of the quantile function on the
``i``-th fraction ``[tau_i, tau_{i+1})``. Its expectation is the
fraction-weighted sum of those values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import PolicyTable, TabularMDP

DEFAULT_N_QUANTILES = 24


def uniform_taus(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n + 1)


def _check_taus(taus: np.ndarray):
    if taus.ndim != 1 or len(taus) < 2:
        raise ValueError("tau grid needs at least two points")
    if taus[0] != 0.0 or taus[-1] != 1.0 or np.any(np.diff(taus) <= 0):
        raise ValueError("tau grid must increase strictly from 0 to 1")


@dataclass(eq=False)
class QuantileCritic:
    z: np.ndarray
    taus: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.taus = np.asarray(self.taus, dtype=float)
        _check_taus(self.taus)
        if self.z.shape[-1] != len(self.taus) - 1:
            raise ValueError("z has %d quantiles but the tau grid has %d fractions"
                             % (self.z.shape[-1], len(self.taus) - 1))
        self._weights = np.diff(self.taus)

    @classmethod
    def zeros(cls, num_states: int, num_actions: int, n: int = DEFAULT_N_QUANTILES):
        return cls(np.zeros((num_states, num_actions, n)), uniform_taus(n))

    @property
    def n_quantiles(self) -> int:
        return self.z.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    def q_values(self) -> np.ndarray:
        """Expectation for every (s, a) at once."""
        return self.z @ self.weights

    def copy(self) -> "QuantileCritic":
        return QuantileCritic(self.z.copy(), self.taus.copy())


def expectation(critic: QuantileCritic, s: int, a: int) -> float:
    return float(critic.z[s, a] @ critic.weights)


@dataclass(eq=False)
class CriticEnsemble:
    """Two online critics plus their Polyak-averaged targets."""

    online: list[QuantileCritic]
    target: list[QuantileCritic]
    polyak_rate: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.polyak_rate <= 1.0:
            raise ValueError("polyak_rate must lie in (0, 1]")

    @classmethod
    def create(cls, num_states: int, num_actions: int, n: int = DEFAULT_N_QUANTILES,
               n_critics: int = 2, polyak_rate: float = 0.005, init_scale: float = 0.0,
               rng: np.random.Generator | None = None) -> "CriticEnsemble":
        taus = uniform_taus(n)
        online = []
        for _ in range(n_critics):
            z = np.zeros((num_states, num_actions, n))
            if init_scale > 0:
                z = np.sort(init_scale * rng.standard_normal(z.shape), axis=-1)
            online.append(QuantileCritic(z, taus))
        return cls(online, [c.copy() for c in online], polyak_rate)

    def online_q(self) -> np.ndarray:
        """Stacked expectations, shape (n_critics, S, A)."""
        return np.stack([c.q_values() for c in self.online])

    def target_q(self) -> np.ndarray:
        return np.stack([c.q_values() for c in self.target])

    def copy(self) -> "CriticEnsemble":
        return CriticEnsemble([c.copy() for c in self.online],
                              [c.copy() for c in self.target], self.polyak_rate)


def polyak_update(ensemble: CriticEnsemble) -> CriticEnsemble:
    """target <- (1 - rate) target + rate online, in place; returns the ensemble."""
    rate = ensemble.polyak_rate
    for tgt, src in zip(ensemble.target, ensemble.online):
        if rate == 1.0:
            tgt.z[...] = src.z
        else:
            # incremental form leaves equal entries bit-identical
            tgt.z += rate * (src.z - tgt.z)
    return ensemble


def wasserstein1(z_a, z_b, taus=None) -> float:
    """W1 between two quantile vectors that share a tau grid.

    ``taus`` may be one grid (shared) or a pair of grids, which must match.
    """
    z_a = np.asarray(z_a, dtype=float)
    z_b = np.asarray(z_b, dtype=float)
    if z_a.shape != z_b.shape:
        raise ValueError(f"quantile vectors differ in length: {z_a.shape} vs {z_b.shape}")
    if taus is None:
        taus = uniform_taus(z_a.shape[-1])
    elif isinstance(taus, tuple):
        ta, tb = (np.asarray(t, dtype=float) for t in taus)
        if ta.shape != tb.shape or not np.array_equal(ta, tb):
            raise ValueError("quantile vectors use different tau grids")
        taus = ta
    taus = np.asarray(taus, dtype=float)
    _check_taus(taus)
    if len(taus) - 1 != z_a.shape[-1]:
        raise ValueError("tau grid does not match the number of quantiles")
    return float(np.abs(z_a - z_b) @ np.diff(taus))


def _support(transition: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Padded next-state supports: indices and probabilities, shape (S, A, K)."""
    nnz = (transition > 0).sum(axis=2)
    K = int(nnz.max())
    order = np.argsort(transition <= 0, axis=2, kind="stable")[:, :, :K]
    probs = np.take_along_axis(transition, order, axis=2)
    return order, probs


def mixture_atoms(z_next: np.ndarray, taus: np.ndarray, mdp: TabularMDP, policy: PolicyTable,
                  reward: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Atoms and weights of the backed-up distribution for every (s, a).

    Atom locations are ``r + gamma (z[s', a', i] - alpha log pi(a'|s'))`` with
    weights ``P(s'|s,a) pi(a'|s') (tau_{i+1} - tau_i)``; only next states in
    the support of ``P(.|s,a)`` are enumerated (zero-weight padding otherwise).
    Both arrays have shape ``(S, A, K*A*N)``.
    """
    S, A, N = z_next.shape
    w = np.diff(taus)
    logp = np.where(policy.probs > 0, policy.log_probs, 0.0)
    shifted = z_next - alpha * logp[:, :, None]  # (S', A', N)
    next_w = policy.probs[:, :, None] * w  # (S', A', N)
    idx, p = _support(mdp.transition)
    locs = reward[:, :, None, None, None] + mdp.gamma * shifted[idx]  # (S, A, K, A', N)
    weights = p[:, :, :, None, None] * next_w[idx]
    return locs.reshape(S, A, -1), weights.reshape(S, A, -1)


def project_quantiles(locs: np.ndarray, weights: np.ndarray, taus: np.ndarray,
                      method: str = "mean") -> np.ndarray:
    """Project weighted atom sets (batched on leading axes) onto the tau grid.

    ``mean``: average the mixture quantile function over each fraction.
    Preserves the expectation and is non-expansive in every W_p.
    ``midpoint``: read the mixture quantile function at fraction midpoints
    (the W1-optimal N-atom approximation; does not preserve the mean).
    """
    lead = locs.shape[:-1]
    M = locs.shape[-1]
    locs = locs.reshape(-1, M)
    weights = weights.reshape(-1, M)
    order = np.argsort(locs, axis=1, kind="stable")
    locs = np.take_along_axis(locs, order, axis=1)
    weights = np.take_along_axis(weights, order, axis=1)
    cdf = np.cumsum(weights, axis=1)
    cdf /= cdf[:, -1:]
    def first_reaching(levels):
        # index of the first atom whose cdf reaches each level (exact compare)
        pos = (cdf[:, None, :] < levels[None, :, None]).sum(axis=2)
        return np.minimum(pos, M - 1)

    if method == "midpoint":
        mids = 0.5 * (taus[:-1] + taus[1:])
        out = np.take_along_axis(locs, first_reaching(mids), axis=1)
    elif method == "mean":
        # G(u) = int_0^u F^{-1} is piecewise linear with knots at the cdf values
        G = np.cumsum(weights * locs, axis=1) / weights.sum(axis=1, keepdims=True)
        pos = first_reaching(taus)
        right_cdf = np.take_along_axis(cdf, pos, axis=1)
        right_G = np.take_along_axis(G, pos, axis=1)
        right_loc = np.take_along_axis(locs, pos, axis=1)
        # walk back from the right knot along the atom's flat segment
        Gt = right_G - (right_cdf - taus[None, :]) * right_loc
        Gt[:, 0] = 0.0
        Gt[:, -1] = G[:, -1]
        out = np.diff(Gt, axis=1) / np.diff(taus)[None, :]
        out = np.maximum.accumulate(out, axis=1)  # float noise only
    else:
        raise ValueError(f"unknown projection {method!r}")
    return out.reshape(*lead, -1)


def distributional_backup(ensemble_or_z, mdp: TabularMDP, policy: PolicyTable,
                          reward: np.ndarray, alpha: float, taus: np.ndarray | None = None,
                          projection: str = "mean") -> np.ndarray:
    """Projected distributional soft Bellman backup.

    Accepts a ``CriticEnsemble`` (backs up from the min-expectation target
    critic, per (s', a')) or a raw ``z`` array. Returns the new ``z`` array.
    """
    reward = np.asarray(reward, dtype=float)
    if isinstance(ensemble_or_z, CriticEnsemble):
        tq = ensemble_or_z.target_q()
        pick = np.argmin(tq, axis=0)
        zs = np.stack([c.z for c in ensemble_or_z.target])
        z_next = np.take_along_axis(zs, pick[None, :, :, None], axis=0)[0]
        taus = ensemble_or_z.target[0].taus
    else:
        z_next = np.asarray(ensemble_or_z, dtype=float)
        if taus is None:
            taus = uniform_taus(z_next.shape[-1])
    if mdp.gamma == 0.0:
        return np.repeat(reward[:, :, None], z_next.shape[-1], axis=2)
    locs, weights = mixture_atoms(z_next, taus, mdp, policy, reward, alpha)
    return project_quantiles(locs, weights, taus, projection)


def iterate_backups(mdp: TabularMDP, policy: PolicyTable, reward: np.ndarray, alpha: float,
                    n: int = DEFAULT_N_QUANTILES, tol: float = 1e-11, max_iter: int = 5000,
                    projection: str = "mean", z0: np.ndarray | None = None):
    """Run backups to a fixed point.

    Returns ``(z, history)`` where ``history`` holds the max-over-(s,a) W1
    distance between successive iterates.
    """
    taus = uniform_taus(n)
    w = np.diff(taus)
    z = np.zeros((mdp.num_states, mdp.num_actions, n)) if z0 is None else np.array(z0, float)
    history = []
    for _ in range(max_iter):
        z_new = distributional_backup(z, mdp, policy, reward, alpha, taus, projection)
        gap = float(np.max(np.abs(z_new - z) @ w))
        history.append(gap)
        z = z_new
        if gap < tol:
            break
    return z, np.array(history)
