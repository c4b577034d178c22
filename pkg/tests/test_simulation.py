import numpy as np
import pytest

from mfkalman import (
    GainSchedule,
    ScenarioError,
    build_scenario,
    dirac_measure,
    discrete_measure,
    empirical_statistics,
    kernel_bundle,
    make_grid,
    measure_averages,
    simulate_ensemble,
)
from mfkalman.covariance import covariance_profile
from mfkalman.simulation import SimulationError, worker_count

from conftest import scalar_scenario


class TestSimulateEnsemble:
    def test_noiseless_error_stays_zero(self):
        scen = scalar_scenario(steps=50, A=0.3, B=0.2, C=1.0, D=0.1,
                               sigma=0.0, gamma=0.0)
        gain = GainSchedule.constant(scen.grid, 0.7)
        ens = simulate_ensemble(scen, gain, n_paths=16, seed=0)
        np.testing.assert_allclose(ens.e, 0.0, atol=1e-12)

    def test_error_starts_at_zero(self, classical_small):
        gain = GainSchedule.constant(classical_small.grid, 0.4)
        ens = simulate_ensemble(classical_small, gain, n_paths=8, seed=1)
        np.testing.assert_allclose(ens.e[:, :, 0], 0.0, atol=0)
        np.testing.assert_allclose(ens.x[:, 0, 0, 0], 0.0, atol=0)

    def test_zero_gain_variance_is_time(self):
        scen = scalar_scenario(steps=100)
        gain = GainSchedule.constant(scen.grid, 0.0)
        ens = simulate_ensemble(scen, gain, n_paths=20000, seed=7)
        st = empirical_statistics(ens, 0, 100)
        # with no gain the error is the driving noise itself: variance T
        assert abs(st.cov[0, 0] - 1.0) <= 3.0 * st.var_se[0]

    def test_optimal_gain_variance(self):
        scen = scalar_scenario(steps=100)
        gain = GainSchedule.from_callable(scen.grid, np.tanh)
        ens = simulate_ensemble(scen, gain, n_paths=20000, seed=3)
        st = empirical_statistics(ens, 0, 100)
        assert abs(st.cov[0, 0] - np.tanh(1.0)) <= 3.0 * st.var_se[0] + 2e-2

    def test_unbiasedness_along_path(self):
        scen = scalar_scenario(steps=60, A=0.2, B=0.3, C=1.0, D=0.2)
        gain = GainSchedule.constant(scen.grid, 0.5)
        ens = simulate_ensemble(scen, gain, n_paths=8000, seed=11)
        for j in range(0, 61, 10):
            st = empirical_statistics(ens, 0, j)
            assert abs(st.mean[0]) <= 3.0 * max(st.mean_se[0], 1e-15)

    def test_atom_permutation_invariance(self):
        grid = make_grid(1.0, 40)
        kwargs = dict(A=0.1, B=0.4, C=1.0, D=0.2,
                      sigma=lambda u, t: 1.0 + 0.2 * u,
                      gamma=lambda u, t: 0.5 + 0.1 * u)
        s1 = build_scenario(grid, measure=discrete_measure([[-1.0], [2.0]], [0.3, 0.7]),
                            **kwargs)
        s2 = build_scenario(grid, measure=discrete_measure([[2.0], [-1.0]], [0.7, 0.3]),
                            **kwargs)
        gain = GainSchedule.constant(grid, 0.6)
        e1 = simulate_ensemble(s1, gain, n_paths=64, seed=5)
        e2 = simulate_ensemble(s2, gain, n_paths=64, seed=5)
        np.testing.assert_array_equal(e1.x[:, 0], e2.x[:, 1])
        np.testing.assert_array_equal(e1.x[:, 1], e2.x[:, 0])
        np.testing.assert_array_equal(e1.e[:, 0], e2.e[:, 1])

    def test_seed_determinism(self, classical_small):
        gain = GainSchedule.constant(classical_small.grid, 0.3)
        a = simulate_ensemble(classical_small, gain, n_paths=4100, seed=42)
        b = simulate_ensemble(classical_small, gain, n_paths=4100, seed=42)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.z, b.z)

    def test_thread_count_does_not_change_results(self, classical_small, monkeypatch):
        gain = GainSchedule.constant(classical_small.grid, 0.3)
        monkeypatch.setenv("MFK_THREADS", "1")
        a = simulate_ensemble(classical_small, gain, n_paths=8200, seed=9)
        monkeypatch.setenv("MFK_THREADS", "3")
        b = simulate_ensemble(classical_small, gain, n_paths=8200, seed=9)
        assert np.array_equal(a.x, b.x)

    def test_weak_convergence_bias_bounded(self):
        results = {}
        for steps in (100, 400):
            scen = scalar_scenario(steps=steps)
            gain = GainSchedule.constant(scen.grid, 0.0)
            ens = simulate_ensemble(scen, gain, n_paths=12000, seed=17)
            st = empirical_statistics(ens, 0, steps)
            results[steps] = (abs(st.cov[0, 0] - 1.0), st.var_se[0])
        bias_100, se_100 = results[100]
        bias_400, se_400 = results[400]
        assert bias_400 <= bias_100 + 3.0 * (se_100 + se_400)

    def test_error_equals_state_minus_filter(self, classical_small):
        gain = GainSchedule.constant(classical_small.grid, 0.2)
        ens = simulate_ensemble(classical_small, gain, n_paths=10, seed=2)
        np.testing.assert_array_equal(ens.e, ens.x - ens.z)

    def test_blowup_detected(self):
        scen = scalar_scenario(steps=50, A=1e155, sigma=1.0, gamma=1.0,
                               measure=dirac_measure(1.0))
        gain = GainSchedule.constant(scen.grid, 0.0)
        with pytest.raises(SimulationError, match="node"):
            simulate_ensemble(scen, gain, n_paths=4, seed=0)

    def test_input_validation(self, classical_small):
        gain = GainSchedule.constant(classical_small.grid, 0.0)
        with pytest.raises(SimulationError):
            simulate_ensemble(classical_small, gain, n_paths=0, seed=0)
        mismatched = GainSchedule.constant(make_grid(1.0, 7), 0.0)
        with pytest.raises(ScenarioError):
            simulate_ensemble(classical_small, mismatched, n_paths=4, seed=0)


class TestEmpiricalStatistics:
    def test_constant_paths_zero_covariance(self):
        scen = scalar_scenario(steps=20, sigma=0.0, gamma=0.0)
        gain = GainSchedule.constant(scen.grid, 0.1)
        ens = simulate_ensemble(scen, gain, n_paths=50, seed=0)
        st = empirical_statistics(ens, 0, 20)
        assert st.cov[0, 0] == pytest.approx(0.0, abs=1e-20)

    def test_initial_node_degenerate(self, classical_small):
        gain = GainSchedule.constant(classical_small.grid, 0.9)
        ens = simulate_ensemble(classical_small, gain, n_paths=100, seed=4)
        st = empirical_statistics(ens, 0, 0)
        assert st.mean[0] == 0.0
        assert st.cov[0, 0] == 0.0

    def test_needs_two_paths(self, classical_small):
        gain = GainSchedule.constant(classical_small.grid, 0.0)
        ens = simulate_ensemble(classical_small, gain, n_paths=1, seed=0)
        with pytest.raises(SimulationError):
            empirical_statistics(ens, 0, 10)


class TestAgainstAnalyticCovariance:
    def test_mean_coupled_scenario_matches_representation(self):
        """End-to-end check of the representation including every cross term."""
        grid = make_grid(1.0, 100)
        scen = build_scenario(
            grid, measure=discrete_measure([[-1.0], [1.0]], [0.5, 0.5]),
            A=0.2, B=0.5, C=1.0, D=0.3,
            sigma=lambda u, t: 1.0 + 0.25 * u,
            gamma=lambda u, t: 0.6 + 0.2 * u)
        gain = GainSchedule.constant(grid, 0.7)
        bars = measure_averages(scen)
        bundle = kernel_bundle(scen, gain)
        ens = simulate_ensemble(scen, gain, n_paths=30000, seed=23)
        for atom in range(2):
            K = covariance_profile(scen, bundle, bars, atom)
            for j in (50, 100):
                st = empirical_statistics(ens, atom, j)
                # 3 SE plus a first-order discretization allowance
                assert abs(st.cov[0, 0] - K[j]) <= 3.0 * st.var_se[0] + 0.02 * K[j]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MFK_THREADS", "2")
    assert worker_count() == 2
    monkeypatch.setenv("MFK_THREADS", "bogus")
    with pytest.raises(SimulationError):
        worker_count()
    monkeypatch.delenv("MFK_THREADS")
    assert worker_count() >= 1
