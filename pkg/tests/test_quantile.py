import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rize.mdp import SHIPPED_PRESETS, PolicyTable, get_mdp, make_random_mdp, soft_bellman_backup
from rize.quantile import (DEFAULT_N_QUANTILES, CriticEnsemble, QuantileCritic,
                           distributional_backup, expectation, iterate_backups, mixture_atoms,
                           polyak_update, project_quantiles, uniform_taus, wasserstein1)

from conftest import single_state


def test_default_resolution():
    # 24 quantile levels, as in the reference hyperparameters
    assert DEFAULT_N_QUANTILES == 24


class TestExpectation:
    def test_uniform_four(self):
        critic = QuantileCritic(np.array([[[1.0, 2.0, 3.0, 4.0]]]), uniform_taus(4))
        assert expectation(critic, 0, 0) == 2.5

    @pytest.mark.parametrize("taus", [[0, 0.5, 1], [0, 0.1, 0.7, 1], [0, 0.3, 0.31, 0.9, 1]])
    def test_constant_on_any_grid(self, taus):
        taus = np.array(taus, dtype=float)
        critic = QuantileCritic(np.full((1, 1, len(taus) - 1), -3.25), taus)
        assert expectation(critic, 0, 0) == pytest.approx(-3.25, abs=1e-15)

    def test_nonuniform_two_cells(self):
        critic = QuantileCritic(np.array([[[0.0, 10.0]]]), np.array([0.0, 0.5, 1.0]))
        assert expectation(critic, 0, 0) == 5.0

    def test_mismatched_grid_rejected(self):
        with pytest.raises(ValueError):
            QuantileCritic(np.zeros((1, 1, 3)), uniform_taus(4))
        with pytest.raises(ValueError):
            QuantileCritic(np.zeros((1, 1, 2)), np.array([0.0, 0.6, 0.5]))


class TestWasserstein:
    def test_example(self):
        assert wasserstein1([1.0, 3.0], [2.0, 4.0]) == 1.0

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=10))
    def test_identity(self, z):
        z = np.sort(z)
        assert wasserstein1(z, z) == 0.0

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=10), st.floats(-50, 50))
    def test_translation(self, z, delta):
        z = np.sort(z)
        assert wasserstein1(z, z + delta) == pytest.approx(abs(delta), abs=1e-9)

    def test_mismatches_rejected(self):
        with pytest.raises(ValueError):
            wasserstein1([0.0, 1.0], [0.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            wasserstein1([0.0, 1.0], [0.0, 1.0], (uniform_taus(2), np.array([0, 0.3, 1.0])))


class TestPolyak:
    def _ensemble(self, target, online, rate):
        taus = uniform_taus(3)
        return CriticEnsemble([QuantileCritic(np.full((2, 2, 3), online), taus)],
                              [QuantileCritic(np.full((2, 2, 3), target), taus)], rate)

    def test_full_copy(self, rng):
        ens = CriticEnsemble.create(3, 2, 5, init_scale=1.0, rng=rng, polyak_rate=1.0)
        ens.online[0].z += 1.7
        polyak_update(ens)
        assert np.array_equal(ens.target[0].z, ens.online[0].z)

    def test_midpoint(self):
        ens = polyak_update(self._ensemble(0.0, 2.0, 0.5))
        assert np.all(ens.target[0].z == 1.0)

    def test_geometric_gap(self):
        ens = self._ensemble(0.0, 1.0, 0.1)
        for _ in range(25):
            polyak_update(ens)
        assert ens.target[0].z == pytest.approx(np.full((2, 2, 3), 1 - 0.9 ** 25), abs=1e-14)

    def test_sortedness_kept(self, rng):
        ens = CriticEnsemble.create(4, 3, 8, init_scale=2.0, rng=rng, polyak_rate=0.3)
        for c in ens.target:
            c.z[...] = np.sort(rng.normal(size=c.z.shape), axis=2)
        for _ in range(5):
            polyak_update(ens)
        for c in ens.target:
            assert np.all(np.diff(c.z, axis=2) >= 0)

    def test_rate_range(self):
        with pytest.raises(ValueError):
            CriticEnsemble([], [], polyak_rate=0.0)


class TestProjection:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["mean", "midpoint"]))
    def test_sorted_output(self, seed, method):
        rng = np.random.default_rng(seed)
        locs = rng.normal(size=(3, 2, 30))
        w = rng.uniform(0.01, 1.0, size=(3, 2, 30))
        out = project_quantiles(locs, w, uniform_taus(7), method)
        assert out.shape == (3, 2, 7)
        assert np.all(np.diff(out, axis=2) >= 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mean_projection_keeps_expectation(self, seed):
        rng = np.random.default_rng(seed)
        locs = rng.normal(scale=4.0, size=(1, 1, 17))
        w = rng.uniform(0.0, 1.0, size=(1, 1, 17))
        out = project_quantiles(locs, w, uniform_taus(5), "mean")
        assert out[0, 0].mean() == pytest.approx((locs * w).sum() / w.sum(), abs=1e-12)

    def test_midpoint_reads_quantiles(self):
        # four equal atoms at 0..3 on two cells: F^{-1}(0.25) = 0, F^{-1}(0.75) = 2
        out = project_quantiles(np.arange(4.0)[None, None], np.ones((1, 1, 4)), uniform_taus(2),
                                "midpoint")
        assert out[0, 0].tolist() == [0.0, 2.0]

    def test_exact_representation_is_fixed(self):
        taus = uniform_taus(4)
        z = np.array([[[-1.0, 0.0, 2.0, 5.0]]])
        for method in ("mean", "midpoint"):
            out = project_quantiles(z, np.full((1, 1, 4), 0.25), taus, method)
            assert out == pytest.approx(z, abs=1e-12)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            project_quantiles(np.zeros((1, 1, 2)), np.ones((1, 1, 2)), uniform_taus(2), "cdf")


class TestBackup:
    def test_constant_reward_fixed_point(self):
        mdp = single_state([[2.0]], gamma=0.75)
        z, _ = iterate_backups(mdp, PolicyTable.uniform(1, 1), mdp.env_reward, 0.0, n=6)
        assert z == pytest.approx(np.full((1, 1, 6), 2.0 / 0.25), abs=1e-9)

    def test_gamma_zero_ignores_targets(self, rng):
        mdp = make_random_mdp(4, 2, seed=0, gamma=0.0)
        r = rng.normal(size=(4, 2))
        z = np.sort(rng.normal(size=(4, 2, 5)), axis=2)
        out = distributional_backup(z, mdp, PolicyTable.uniform(4, 2), r, 0.3)
        assert np.array_equal(out, np.repeat(r[:, :, None], 5, axis=2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 1.0))
    def test_expectation_commutes_with_backup(self, seed, alpha):
        rng = np.random.default_rng(seed)
        mdp = make_random_mdp(5, 3, seed=seed, gamma=0.9)
        pol = PolicyTable(rng.normal(size=(5, 3)), alpha)
        r = rng.normal(size=(5, 3))
        z = np.sort(rng.normal(scale=3.0, size=(5, 3, 12)), axis=2)
        w = np.diff(uniform_taus(12))
        out = distributional_backup(z, mdp, pol, r, alpha)
        scalar = soft_bellman_backup(mdp, pol, r, z @ w, alpha)
        assert np.max(np.abs(out @ w - scalar)) < 1e-9
        assert np.all(np.diff(out, axis=2) >= -1e-12)

    def test_mixture_weights_sum_to_one(self, rng):
        mdp = get_mdp("rand-k5-s0")
        pol = PolicyTable(rng.normal(size=(5, 3)), 0.2)
        z = np.zeros((5, 3, 4))
        _, w = mixture_atoms(z, uniform_taus(4), mdp, pol, mdp.env_reward, 0.2)
        assert w.sum(axis=2) == pytest.approx(np.ones((5, 3)), abs=1e-12)

    def test_ensemble_uses_min_target_twin(self, rng):
        mdp = get_mdp("rand-k5-s0")
        pol = PolicyTable(rng.normal(size=(5, 3)), 0.1)
        ens = CriticEnsemble.create(5, 3, 6, init_scale=1.0, rng=rng)
        ens.target[1].z[...] = ens.target[0].z + 1.0  # twin 0 is the minimum everywhere
        out = distributional_backup(ens, mdp, pol, mdp.env_reward, 0.1)
        ref = distributional_backup(ens.target[0].z, mdp, pol, mdp.env_reward, 0.1)
        assert np.array_equal(out, ref)

    @pytest.mark.parametrize("mdp_id", SHIPPED_PRESETS)
    def test_midpoint_projection_converges(self, mdp_id):
        mdp = get_mdp(mdp_id)
        pol = PolicyTable.uniform(mdp.num_states, mdp.num_actions, 0.1)
        z, hist = iterate_backups(mdp, pol, mdp.env_reward, 0.1, n=8, tol=1e-9,
                                  projection="midpoint")
        assert hist[-1] < 1e-9
        assert np.all(np.diff(z, axis=2) >= 0)

    def test_contraction_on_one_instance(self, rng):
        mdp = make_random_mdp(4, 2, seed=9, gamma=0.8)
        pol = PolicyTable(rng.normal(size=(4, 2)), 0.2)
        z0 = np.sort(rng.normal(scale=10.0, size=(4, 2, 10)), axis=2)
        _, hist = iterate_backups(mdp, pol, rng.normal(size=(4, 2)), 0.2, n=10, tol=1e-7, z0=z0)
        ratios = hist[2:] / hist[1:-1]
        assert np.all(ratios <= mdp.gamma + 1e-6)
