import numpy as np
import pytest

from mfkalman import (
    FORM_REDERIVED,
    FORM_TRANSCRIBED,
    GainSchedule,
    ScenarioError,
    build_scenario,
    compute_f,
    compute_phi,
    compute_psi,
    derivative_kernels,
    dirac_measure,
    kernel_bundle,
    make_grid,
)
from mfkalman.scenarios import random_smooth_scenario

from conftest import scalar_scenario


def zero_gain(scen):
    return GainSchedule.constant(scen.grid, 0.0, scen.n, scen.m)


class TestPhi:
    def test_constant_negative_generator(self):
        # A = -1, B = 0, zero gain: generator of phi is -1
        scen = scalar_scenario(steps=200, A=-1.0)
        phi = compute_phi(scen, zero_gain(scen))
        assert phi.value(200, 0) == pytest.approx(np.exp(-1.0), abs=1e-12)

    def test_diagonal_identity(self, rough_pack):
        scen, _, gain, bundle = rough_pack
        diag = bundle.phi.diagonal()
        np.testing.assert_allclose(diag, 1.0, atol=0)

    def test_semigroup(self, rough_pack):
        scen, _, _, bundle = rough_pack
        phi = bundle.phi.values
        rng = np.random.default_rng(3)
        for _ in range(200):
            i, k, j = sorted(rng.integers(0, scen.grid.n_nodes, 3))[::-1]
            assert phi[i, k] * phi[k, j] == pytest.approx(phi[i, j], abs=1e-10)


class TestPsi:
    def test_zero_generator(self):
        scen = scalar_scenario(steps=100)  # A = 0
        psi = compute_psi(scen, zero_gain(scen))
        np.testing.assert_allclose(psi.values[np.tril_indices(101)], 1.0)

    def test_tanh_gain_closed_form(self):
        scen = scalar_scenario(steps=400)
        gain = GainSchedule.from_callable(scen.grid, np.tanh)
        psi = compute_psi(scen, gain)
        # generator -tanh integrates to -log cosh
        assert psi.value(400, 0) == pytest.approx(1.0 / np.cosh(1.0), abs=1e-5)

    def test_semigroup(self, rough_pack):
        scen, _, _, bundle = rough_pack
        psi = bundle.psi.values
        rng = np.random.default_rng(4)
        for _ in range(200):
            i, k, j = sorted(rng.integers(0, scen.grid.n_nodes, 3))[::-1]
            assert psi[i, k] * psi[k, j] == pytest.approx(psi[i, j], abs=1e-10)

    def test_ode_residual_second_order(self):
        resid = {}
        for steps in (100, 200):
            scen = random_smooth_scenario(seed=7, steps=steps)
            gain = GainSchedule.from_callable(
                scen.grid, lambda t: 0.3 + 0.2 * np.sin(2 * np.pi * t))
            bundle = kernel_bundle(scen, gain)
            psi = bundle.psi.values
            H = bundle.H.reshape(-1)
            dt = scen.grid.dt
            worst = 0.0
            for i in range(1, steps):
                js = np.arange(0, i)
                diff = (psi[i + 1, js] - psi[i - 1, js]) / (2 * dt) - H[i] * psi[i, js]
                worst = max(worst, float(np.max(np.abs(diff))))
            resid[steps] = worst
        assert resid[200] <= 1e-3
        assert resid[100] / resid[200] > 3.0  # O(dt^2) decay


class TestF:
    def test_zero_mean_coupling(self, classical_pack):
        scen, _, bundle = classical_pack  # B = D = 0 so M = 0
        np.testing.assert_allclose(bundle.f.values, 0.0, atol=1e-15)

    def test_unit_coupling_closed_form(self):
        # A = 0, B = 1, zero gain: psi = 1, phi(r, 0) = e^r
        scen = scalar_scenario(steps=100, B=1.0)
        bundle = kernel_bundle(scen, zero_gain(scen))
        assert bundle.f.value(100, 0) == pytest.approx(np.e - 1.0, abs=2e-5)

    def test_diagonal_zero(self, rough_pack):
        _, _, _, bundle = rough_pack
        np.testing.assert_allclose(bundle.f.diagonal(), 0.0, atol=0)

    def test_scalar_form_equals_direct_quadrature(self, rough_pack):
        scen, _, gain, bundle = rough_pack
        # re-evaluate a handful of cells by direct trapezoid over the
        # stored psi/phi triangles
        psi, phi = bundle.psi.values, bundle.phi.values
        M = bundle.M.reshape(-1)
        dt = scen.grid.dt
        rng = np.random.default_rng(5)
        for _ in range(25):
            j, i = sorted(rng.integers(0, scen.grid.n_nodes, 2))
            rs = np.arange(j, i + 1)
            integrand = psi[i, rs] * M[rs] * phi[rs, j]
            direct = np.trapezoid(integrand, dx=dt) if len(rs) > 1 else 0.0
            assert bundle.f.value(i, j) == pytest.approx(direct, abs=1e-12)

    def test_rate_equation_residual(self):
        scen = random_smooth_scenario(seed=11, steps=200)
        gain = GainSchedule.from_callable(
            scen.grid, lambda t: 0.4 + 0.2 * np.cos(2 * np.pi * t))
        bundle = kernel_bundle(scen, gain)
        F, phi = bundle.f.values, bundle.phi.values
        M = bundle.M.reshape(-1)
        H = bundle.H.reshape(-1)
        dt = scen.grid.dt
        worst = 0.0
        for i in range(1, scen.grid.n_steps):
            js = np.arange(0, i)
            dF = (F[i + 1, js] - F[i - 1, js]) / (2 * dt)
            worst = max(worst, float(np.max(np.abs(dF - M[i] * phi[i, js] - H[i] * F[i, js]))))
        assert worst <= 1e-3


@pytest.fixture(scope="module")
def pair():
    """Block-diagonal 2-d system vs its two scalar components.

    Mean coupling is on (B, D nonzero) so the mixed kernel and the cross
    quadratures are exercised in matrix mode."""
    grid = make_grid(1.0, 80)
    a = (-0.4, 0.3)
    b = (0.5, -0.2)
    c = (1.0, 0.8)
    d = (0.3, 0.1)
    s = (0.9, 1.1)
    scen2 = build_scenario(
        grid, measure=dirac_measure([0.0, 0.0]),
        A=lambda t: np.diag([a[0], a[1] * (1 + 0.5 * t)]),
        B=lambda t: np.diag(b),
        C=lambda t: np.diag(c),
        D=lambda t: np.diag(d),
        sigma=lambda u, t: np.diag(s),
        gamma=lambda u, t: np.eye(2),
        Q=np.eye(2), Q0=np.eye(2), Sigma=lambda t: np.eye(2))
    scalars = []
    for k in range(2):
        scalars.append(build_scenario(
            grid, measure=dirac_measure(0.0),
            A=(lambda t, _k=k: a[_k] * (1 + 0.5 * t) if _k == 1 else a[_k]),
            B=b[k], C=c[k], D=d[k], sigma=s[k], gamma=1.0))
    return grid, scen2, scalars, c


class TestMatrixMode:
    def test_block_diagonal_transition(self, pair):
        grid, scen2, scalars, c = pair
        gvals = np.array([0.5, 0.2])
        gain2 = GainSchedule.constant(grid, np.diag(gvals), 2, 2)
        bundle2 = kernel_bundle(scen2, gain2)
        for k in range(2):
            gain1 = GainSchedule.constant(grid, gvals[k])
            b1 = kernel_bundle(scalars[k], gain1)
            np.testing.assert_allclose(bundle2.psi.values[:, :, k, k],
                                       b1.psi.values, atol=1e-8)
            np.testing.assert_allclose(bundle2.phi.values[:, :, k, k],
                                       b1.phi.values, atol=1e-8)
            np.testing.assert_allclose(bundle2.f.values[:, :, k, k],
                                       b1.f.values, atol=1e-8)
            # off-diagonal blocks stay zero
            np.testing.assert_allclose(bundle2.psi.values[:, :, k, 1 - k], 0.0,
                                       atol=1e-12)
            np.testing.assert_allclose(bundle2.f.values[:, :, k, 1 - k], 0.0,
                                       atol=1e-12)

    def test_rk4_matches_exponential(self, pair):
        grid, scen2, _, _ = pair
        gain2 = GainSchedule.constant(grid, np.zeros((2, 2)), 2, 2)
        psi = compute_psi(scen2, gain2)
        # component 0 has constant generator a0 = -0.4
        expected = np.exp(-0.4 * (grid.nodes[:, None] - grid.nodes[None, :]))
        tri = np.tril_indices(grid.n_nodes)
        np.testing.assert_allclose(psi.values[:, :, 0, 0][tri], expected[tri],
                                   atol=1e-10)

    def test_matrix_f_defining_quadrature(self, pair):
        """Matrix-mode mixed kernel equals the direct trapezoid of its
        defining integral at sampled cells."""
        grid, scen2, _, _ = pair
        gain2 = GainSchedule.constant(grid, np.diag([0.5, 0.2]), 2, 2)
        phi = compute_phi(scen2, gain2)
        psi = compute_psi(scen2, gain2)
        f = compute_f(scen2, gain2, phi, psi)
        M = scen2.B - np.einsum("jnm,jmk->jnk", gain2.values, scen2.D)
        rng = np.random.default_rng(8)
        for _ in range(10):
            j, i = sorted(rng.integers(0, grid.n_nodes, 2))
            rs = np.arange(j, i + 1)
            if len(rs) < 2:
                continue
            integrand = np.einsum("rab,rbc,rcd->rad",
                                  psi.values[i, rs], M[rs], phi.values[rs, j])
            direct = np.trapezoid(integrand, dx=grid.dt, axis=0)
            np.testing.assert_allclose(f.values[i, j], direct, atol=1e-12)


class TestDerivativeKernels:
    def test_constant_case(self):
        scen = scalar_scenario(steps=50)  # C = 1, zero gain: H = 0, psi = 1
        bundle = kernel_bundle(scen, zero_gain(scen))
        dk = derivative_kernels(bundle, scen)
        for (i, j, k) in [(50, 0, 25), (40, 10, 30), (20, 20, 20)]:
            assert dk.psi1(i, j, k) == pytest.approx(-1.0, abs=1e-14)

    def test_argument_validation(self, rough_pack):
        scen, _, _, bundle = rough_pack
        dk = derivative_kernels(bundle, scen)
        with pytest.raises(ScenarioError):
            dk.psi1(10, 5, 3)   # theta below s
        with pytest.raises(ScenarioError):
            dk.f1(10, 5, 12)    # theta above t

    def test_directional_derivatives_match_fd(self, rough_pack):
        scen, _, gain, bundle = rough_pack
        dk = derivative_kernels(bundle, scen)
        eps = 1e-4
        t = scen.grid.nodes
        rng = np.random.default_rng(21)
        for trial in range(3):
            a, b = rng.uniform(-1, 1, 2)
            beta = a + b * np.sin((trial + 1) * np.pi * t)
            up = kernel_bundle(scen, gain.with_values(
                (gain.scalar + eps * beta)[:, None, None]))
            dn = kernel_bundle(scen, gain.with_values(
                (gain.scalar - eps * beta)[:, None, None]))
            for (i, j) in [(scen.grid.n_steps, 0), (150, 40)]:
                fd_psi = (up.psi.values[i, j] - dn.psi.values[i, j]) / (2 * eps)
                fd_phi = (up.phi.values[i, j] - dn.phi.values[i, j]) / (2 * eps)
                fd_f = (up.f.values[i, j] - dn.f.values[i, j]) / (2 * eps)
                assert dk.psi_direction(i, j, beta) == pytest.approx(fd_psi, abs=1e-4)
                assert dk.phi_direction(i, j, beta) == pytest.approx(fd_phi, abs=1e-4)
                assert dk.f_direction(i, j, beta) == pytest.approx(
                    fd_f, abs=1e-4 * (1 + abs(fd_f)))

    def test_transcribed_form_fails_oracle(self, rough_pack):
        scen, _, gain, bundle = rough_pack
        dk = derivative_kernels(bundle, scen)
        eps = 1e-4
        beta = 0.7 - 0.5 * np.sin(3 * scen.grid.nodes)
        up = kernel_bundle(scen, gain.with_values(
            (gain.scalar + eps * beta)[:, None, None]))
        dn = kernel_bundle(scen, gain.with_values(
            (gain.scalar - eps * beta)[:, None, None]))
        i = scen.grid.n_steps
        fd = (up.f.values[i, 0] - dn.f.values[i, 0]) / (2 * eps)
        good = dk.f_direction(i, 0, beta, FORM_REDERIVED)
        bad = dk.f_direction(i, 0, beta, FORM_TRANSCRIBED)
        assert abs(good - fd) < 1e-5 * (1 + abs(fd))
        assert abs(bad - fd) > 100 * abs(good - fd)

    def test_zero_when_no_coupling(self, classical_pack):
        scen, _, bundle = classical_pack  # M = 0 and D = 0
        dk = derivative_kernels(bundle, scen)
        for (i, j, k) in [(100, 0, 50), (80, 20, 60)]:
            assert dk.f1(i, j, k) == 0.0

    def test_gateaux_linearity(self, rough_pack):
        scen, _, gain, bundle = rough_pack
        dk = derivative_kernels(bundle, scen)
        t = scen.grid.nodes
        b1 = np.sin(np.pi * t)
        b2 = 0.5 - t
        alpha = 1.7
        i, j = 180, 30
        combo = dk.f_direction(i, j, alpha * b1 + b2)
        split = alpha * dk.f_direction(i, j, b1) + dk.f_direction(i, j, b2)
        assert combo == pytest.approx(split, abs=1e-12)

    def test_requires_scalar_mode(self):
        grid = make_grid(1.0, 20)
        scen = build_scenario(grid, measure=dirac_measure([0.0, 0.0]),
                              A=lambda t: np.zeros((2, 2)),
                              C=lambda t: np.eye(2),
                              sigma=lambda u, t: np.eye(2),
                              gamma=lambda u, t: np.eye(2),
                              Q=np.eye(2), Q0=np.eye(2),
                              Sigma=lambda t: np.eye(2))
        gain = GainSchedule.constant(grid, np.zeros((2, 2)), 2, 2)
        bundle = kernel_bundle(scen, gain)
        with pytest.raises(ScenarioError):
            derivative_kernels(bundle, scen)


class TestGainSchedule:
    def test_rejects_nonfinite(self):
        grid = make_grid(1.0, 10)
        vals = np.zeros(11)
        vals[3] = np.inf
        with pytest.raises(ScenarioError):
            GainSchedule(grid, vals)

    def test_grid_mismatch_detected(self):
        scen = scalar_scenario(steps=50)
        other = GainSchedule.constant(make_grid(1.0, 49), 0.0)
        with pytest.raises(ScenarioError):
            kernel_bundle(scen, other)
