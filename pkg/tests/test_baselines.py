import numpy as np
import pytest

from rize.baselines import (BC_SMOOTHING, COUPLED_INITS, FIXED_TARGETS, behavior_cloning,
                            coupled_target_loss, fixed_target_loss, iq_learn_loss)
from rize.demos import DemoSet
from rize.evaluate import final_third_mean
from rize.mdp import PolicyTable, Trajectory, get_mdp
from rize.objective import AdaptiveTargets, LossVariant, RegularizerConfig, critic_loss
from rize.quantile import CriticEnsemble


@pytest.fixture
def setup(rng):
    mdp = get_mdp("rand-k5-s0")
    ens = CriticEnsemble.create(5, 3, 6, 2, init_scale=1.0, rng=rng)
    for c in ens.target:
        c.z[...] = np.sort(rng.normal(size=c.z.shape), axis=2)
    pol = PolicyTable(rng.normal(size=(5, 3)), 0.1)
    tpol = PolicyTable(rng.normal(size=(5, 3)), 0.1)
    eb = rng.integers(0, [5, 3], size=(7, 2))
    pb = rng.integers(0, [5, 3], size=(9, 2))
    return mdp, ens, pol, tpol, eb, pb


def _close(a, b):
    return abs(a[0] - b[0]) < 1e-12 and np.max(np.abs(a[1] - b[1])) < 1e-12


def test_reference_constants():
    # +1 for expert samples and -1 for agent samples; shared target started at 0 or 10
    assert FIXED_TARGETS == (1.0, -1.0)
    assert COUPLED_INITS == (0.0, 10.0)
    assert BC_SMOOTHING == 1e-3


class TestIQLearn:
    def test_is_plain_l2_with_zero_targets(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        var = LossVariant()
        a = iq_learn_loss(ens, pol, 0.3, var, eb, pb, mdp, 0.1, tpol)
        b = critic_loss(ens, pol, AdaptiveTargets(0.0, 0.0), RegularizerConfig(0.3, "plain-L2"),
                        var, eb, pb, mdp, 0.1, tpol)
        assert _close(a, b)

    def test_plain_l2_ignores_targets(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        reg = RegularizerConfig(0.3, "plain-L2")
        a = critic_loss(ens, pol, AdaptiveTargets(7.0, -3.0), reg, LossVariant(), eb, pb, mdp, 0.1, tpol)
        b = iq_learn_loss(ens, pol, 0.3, LossVariant(), eb, pb, mdp, 0.1, tpol)
        assert _close(a, b)

    def test_gradient(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        var = LossVariant("v0")
        _, grad = iq_learn_loss(ens, pol, 0.5, var, eb, pb, mdp, 0.1, tpol)
        h, fd = 1e-5, np.zeros_like(grad)
        for k, critic in enumerate(ens.online):
            for idx in np.ndindex(critic.z.shape):
                orig = critic.z[idx]
                critic.z[idx] = orig + h
                up = iq_learn_loss(ens, pol, 0.5, var, eb, pb, mdp, 0.1, tpol)[0]
                critic.z[idx] = orig - h
                down = iq_learn_loss(ens, pol, 0.5, var, eb, pb, mdp, 0.1, tpol)[0]
                critic.z[idx] = orig
                fd[(k,) + idx] = (up - down) / (2 * h)
        assert np.max(np.abs(fd - grad)) / np.max(np.abs(grad)) < 1e-5

    def test_c_zero_is_unregularised(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        a = iq_learn_loss(ens, pol, 0.0, LossVariant(), eb, pb, mdp, 0.1, tpol)
        b = critic_loss(ens, pol, AdaptiveTargets(4.0, 2.0), RegularizerConfig(0.0), LossVariant(),
                        eb, pb, mdp, 0.1, tpol)
        assert _close(a, b)


class TestFixedTarget:
    def test_equals_frozen_rize(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        a = fixed_target_loss(*FIXED_TARGETS, ens, pol, 0.2, LossVariant(), eb, pb, mdp, 0.1, tpol)
        b = critic_loss(ens, pol, AdaptiveTargets(*FIXED_TARGETS), RegularizerConfig(0.2),
                        LossVariant(), eb, pb, mdp, 0.1, tpol)
        assert _close(a, b)

    def test_zero_targets_are_iq_learn(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        a = fixed_target_loss(0.0, 0.0, ens, pol, 0.2, LossVariant(), eb, pb, mdp, 0.1, tpol)
        b = iq_learn_loss(ens, pol, 0.2, LossVariant(), eb, pb, mdp, 0.1, tpol)
        assert _close(a, b)


class TestCoupled:
    def test_pooled_stationary_point(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        from rize.objective import critic_loss_outputs

        outs = critic_loss_outputs(ens, pol, AdaptiveTargets(0.0, 0.0), RegularizerConfig(0.2),
                                   LossVariant(), eb, pb, mdp, 0.1, tpol)
        r = np.concatenate([np.mean([o.rewards_E for o in outs], axis=0),
                            np.mean([o.rewards_pi for o in outs], axis=0)])
        _, _, lam = coupled_target_loss(r.mean(), 0.3, ens, pol, 0.2, LossVariant(), eb, pb, mdp,
                                        0.1, tpol)
        assert lam == pytest.approx(r.mean(), abs=1e-12)

    def test_moves_toward_pooled_mean(self, setup):
        mdp, ens, pol, tpol, eb, pb = setup
        start = 10.0
        _, _, lam = coupled_target_loss(start, 0.1, ens, pol, 0.2, LossVariant(), eb, pb, mdp, 0.1, tpol)
        assert lam < start

    def test_identical_batches_match_adaptive(self, setup):
        mdp, ens, pol, tpol, eb, _ = setup
        a = coupled_target_loss(3.0, 0.1, ens, pol, 0.2, LossVariant(), eb, eb, mdp, 0.1, tpol)
        b = critic_loss(ens, pol, AdaptiveTargets(3.0, 3.0), RegularizerConfig(0.2), LossVariant(),
                        eb, eb, mdp, 0.1, tpol)
        assert _close(a[:2], b)


def _demo(states, actions, mdp_id="grid5x5"):
    s = np.array(states)
    traj = Trajectory(s, np.array(actions), s, np.zeros(len(s), bool), 0.0)
    return DemoSet([traj], mdp_id, 0.01, 0.0)


class TestBehaviourCloning:
    def test_repeated_action(self):
        n = 5
        pol = behavior_cloning(_demo([0] * n, [0] * n))
        eps = BC_SMOOTHING
        assert pol.probs[0, 0] == pytest.approx((n + eps) / (n + 4 * eps), abs=1e-12)
        assert pol.probs[0, 0] > 0.999

    def test_unseen_state_uniform(self):
        pol = behavior_cloning(_demo([0, 1], [2, 3]))
        assert pol.probs[7] == pytest.approx(np.full(4, 0.25), abs=1e-15)

    def test_explicit_shape(self):
        pol = behavior_cloning(_demo([0, 1], [1, 0]), num_states=2, num_actions=2)
        assert pol.probs.shape == (2, 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            behavior_cloning(DemoSet([], "grid5x5", 0.01, 0.0))


@pytest.mark.slow
def test_bc_trails_rize_with_ten_demos(preset_runs):
    rize = np.mean([final_third_mean(r) for r in preset_runs["records"][10]])
    bc = np.mean([final_third_mean(r) for r in preset_runs["bc"][10]])
    assert bc < rize
