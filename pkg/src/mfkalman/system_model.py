"""Scenario container: coefficients, noise covariances, cost weight, initial measure.

A scenario bundles the drift/observation coefficient functions A, B, C, D,
the per-particle diffusion loadings sigma(u, t) and gamma(u, t), the noise
covariances Q and Q0, the cost weight Sigma(t), and the initial mass
distribution. The initial distribution is always a finite weighted atom
set: continuous laws enter through quadrature atoms (Gauss-Hermite for the
standard normal), since every formula downstream touches the measure only
through weighted sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import TimeGrid

__all__ = [
    "ScenarioError",
    "InitialMeasure",
    "Scenario",
    "BarQuantities",
    "build_scenario",
    "measure_averages",
    "standard_measure",
    "dirac_measure",
    "discrete_measure",
    "gauss_hermite_measure",
]

_WEIGHT_TOL = 1e-12


class ScenarioError(ValueError):
    """Invalid scenario data (dimensions, definiteness, finiteness)."""


@dataclass(frozen=True)
class InitialMeasure:
    """Finite weighted atom set: points (k, n), positive weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if points.shape[0] == 1 and points.shape[1] > 1 and np.asarray(self.points).ndim == 1:
            # a flat list of scalar atoms, not one multi-dimensional point
            points = points.T
        weights = np.asarray(self.weights, dtype=float).ravel()
        if points.shape[0] != weights.shape[0]:
            raise ScenarioError(
                f"{points.shape[0]} atoms but {weights.shape[0]} weights"
            )
        if points.shape[0] < 1:
            raise ScenarioError("measure needs at least one atom")
        if np.any(weights <= 0.0):
            raise ScenarioError("atom weights must be strictly positive")
        if not np.all(np.isfinite(points)):
            raise ScenarioError("atom locations must be finite")
        total = weights.sum()
        if abs(total - 1.0) > _WEIGHT_TOL:
            weights = weights / total
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def dirac_measure(x0) -> InitialMeasure:
    """Unit mass at the single point ``x0``."""
    return InitialMeasure(points=np.atleast_1d(np.asarray(x0, dtype=float))[None, :],
                          weights=np.array([1.0]))


def discrete_measure(points, weights) -> InitialMeasure:
    """Finitely supported measure; weights are normalized to sum to one."""
    return InitialMeasure(points=points, weights=weights)


def gauss_hermite_measure(n_nodes: int) -> InitialMeasure:
    """Quadrature atoms integrating the standard normal law exactly.

    The returned atoms integrate polynomials of degree <= 2 n_nodes - 1
    against the standard normal density; weights come normalized.
    """
    if int(n_nodes) != n_nodes or n_nodes < 1:
        raise ScenarioError(f"n_nodes must be a positive integer, got {n_nodes!r}")
    # probabilists' Hermite quadrature: weight function exp(-x^2/2)
    x, w = np.polynomial.hermite_e.hermegauss(int(n_nodes))
    return InitialMeasure(points=x[:, None], weights=w / w.sum())


def standard_measure(kind: str, **params) -> InitialMeasure:
    """Dispatch on ``kind``: 'dirac', 'discrete' or 'gauss_hermite'."""
    if kind == "dirac":
        return dirac_measure(params["x0"])
    if kind == "discrete":
        return discrete_measure(params["points"], params["weights"])
    if kind == "gauss_hermite":
        return gauss_hermite_measure(params["n_nodes"])
    raise ScenarioError(f"unknown measure kind {kind!r}")


@dataclass(frozen=True)
class Scenario:
    """Validated coefficient set on a grid, plus the initial measure.

    Coefficient samples are cached at every node; the original callables
    are retained for the midpoint evaluations the Runge-Kutta solvers need.
    ``scalar_mode`` is set exactly when n = m = d = 1, which is where the
    gain optimizer operates.
    """

    grid: TimeGrid
    n: int
    m: int
    d: int
    A: np.ndarray          # (N+1, n, n)
    B: np.ndarray          # (N+1, n, n)
    C: np.ndarray          # (N+1, m, n)
    D: np.ndarray          # (N+1, m, n)
    Sigma: np.ndarray      # (N+1, n, n)
    sigma: np.ndarray      # (k_atoms, N+1, n, d)
    gamma: np.ndarray      # (k_atoms, N+1, m, d)
    Q: np.ndarray          # (d, d)
    Q0: np.ndarray         # (d, d)
    measure: InitialMeasure
    scalar_mode: bool
    fns: dict = field(repr=False, compare=False)

    @property
    def n_atoms(self) -> int:
        return self.measure.n_atoms

    def coeff_at(self, name: str, t: float) -> np.ndarray:
        """Evaluate a coefficient callable off-grid (used by RK4 midpoints)."""
        fn = self.fns[name]
        return np.asarray(fn(t), dtype=float)

    # flat views for the scalar fast paths -------------------------------
    def flat(self, name: str) -> np.ndarray:
        """(N+1,) view of a nodal coefficient; scalar mode only."""
        if not self.scalar_mode:
            raise ScenarioError("flat coefficient views require scalar mode")
        return getattr(self, name).reshape(self.grid.n_nodes)

    def flat_atom(self, name: str, atom: int) -> np.ndarray:
        if not self.scalar_mode:
            raise ScenarioError("flat coefficient views require scalar mode")
        return getattr(self, name)[atom].reshape(self.grid.n_nodes)


@dataclass(frozen=True)
class BarQuantities:
    """Measure-averaged coefficient fields sampled at grid nodes.

    ``sigma2_bar`` and ``gamma2_bar`` carry the noise covariance folded in:
    they are the atom averages of sigma Q sigma' and gamma Q0 gamma', which
    is the combination every covariance quadrature consumes. With unit
    noise covariance they reduce to the plain averaged squares.
    """

    sigma_bar: np.ndarray    # (N+1, n, d)
    gamma_bar: np.ndarray    # (N+1, m, d)
    sigma2_bar: np.ndarray   # (N+1, n, n)
    gamma2_bar: np.ndarray   # (N+1, m, m)

    def flat(self, name: str) -> np.ndarray:
        return getattr(self, name).reshape(getattr(self, name).shape[0])


def _check_spd(mat: np.ndarray, label: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise ScenarioError(f"{label} must be square, got {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ScenarioError(f"{label} has non-finite entries")
    if not np.allclose(mat, mat.T, atol=1e-10, rtol=1e-10):
        raise ScenarioError(f"{label} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ScenarioError(f"{label} must be positive definite") from None
    return mat


def _sample_time_coefficient(value, grid: TimeGrid, rows: int, cols: int, label: str):
    """Turn a constant / matrix / callable-of-t into nodal samples + callable."""
    if callable(value):
        fn = value
    else:
        const = np.asarray(value, dtype=float)
        if const.ndim == 0:
            const = const * np.eye(rows, cols) if rows == cols else np.full((rows, cols), float(const))
        fn = lambda t, _c=const: _c  # noqa: E731
    samples = np.empty((grid.n_nodes, rows, cols))
    for j, t in enumerate(grid.nodes):
        val = np.asarray(fn(t), dtype=float)
        if val.ndim == 0:
            val = val * np.eye(rows, cols) if rows == cols else np.full((rows, cols), float(val))
        if val.shape != (rows, cols):
            raise ScenarioError(f"{label}({t}) has shape {val.shape}, expected {(rows, cols)}")
        samples[j] = val
    if not np.all(np.isfinite(samples)):
        raise ScenarioError(f"{label} is not finite at every node")
    return samples, fn


def _sample_atom_coefficient(value, measure: InitialMeasure, grid: TimeGrid,
                             rows: int, cols: int, label: str):
    """Per-atom loading sigma(u, t)/gamma(u, t): constant or callable (u, t)."""
    if callable(value):
        fn = value
    else:
        const = float(value)
        fn = lambda u, t, _c=const: _c  # noqa: E731
    samples = np.empty((measure.n_atoms, grid.n_nodes, rows, cols))
    for i in range(measure.n_atoms):
        u = measure.points[i]
        u_arg = u.item() if u.size == 1 else u
        for j, t in enumerate(grid.nodes):
            val = np.asarray(fn(u_arg, t), dtype=float)
            if val.ndim == 0:
                val = np.full((rows, cols), float(val))
            if val.shape != (rows, cols):
                raise ScenarioError(
                    f"{label}(u={u_arg}, t={t}) has shape {val.shape}, expected {(rows, cols)}"
                )
            samples[i, j] = val
    if not np.all(np.isfinite(samples)):
        raise ScenarioError(f"{label} is not finite at every atom and node")
    return samples, fn


def build_scenario(grid: TimeGrid, *, measure: InitialMeasure,
                   A=0.0, B=0.0, C=1.0, D=0.0,
                   sigma=1.0, gamma=1.0,
                   Q=1.0, Q0=1.0, Sigma=1.0,
                   m: int | None = None, d: int | None = None) -> Scenario:
    """Assemble and validate a scenario.

    Coefficients may be constants, matrices, or callables of ``t``;
    ``sigma``/``gamma`` may additionally be callables of ``(u, t)``.
    The state dimension is the measure's, the observation dimension
    defaults to it, and the noise dimension is read off ``Q``.

    Raises
    ------
    ScenarioError
        On dimension mismatch, non-SPD Q/Q0/Sigma, or non-finite samples.
    """
    n = measure.dim
    m = n if m is None else int(m)
    Q_arr = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q_arr.shape == (1, 1) and d is not None and d != 1:
        Q_arr = float(Q_arr[0, 0]) * np.eye(d)
    d = Q_arr.shape[0] if d is None else int(d)
    Q_arr = _check_spd(Q_arr if Q_arr.shape == (d, d) else np.asarray(Q, dtype=float), "Q")
    Q0_arr = np.atleast_2d(np.asarray(Q0, dtype=float))
    if Q0_arr.shape == (1, 1) and d != 1:
        Q0_arr = float(Q0_arr[0, 0]) * np.eye(d)
    Q0_arr = _check_spd(Q0_arr, "Q0")
    if Q_arr.shape != (d, d) or Q0_arr.shape != (d, d):
        raise ScenarioError(
            f"noise covariances must be ({d}, {d}); got Q{Q_arr.shape}, Q0{Q0_arr.shape}"
        )

    A_s, A_fn = _sample_time_coefficient(A, grid, n, n, "A")
    B_s, B_fn = _sample_time_coefficient(B, grid, n, n, "B")
    C_s, C_fn = _sample_time_coefficient(C, grid, m, n, "C")
    D_s, D_fn = _sample_time_coefficient(D, grid, m, n, "D")
    Sig_s, Sig_fn = _sample_time_coefficient(Sigma, grid, n, n, "Sigma")
    for j in range(grid.n_nodes):
        _check_spd(Sig_s[j], f"Sigma(t={grid.nodes[j]})")

    sig_s, sig_fn = _sample_atom_coefficient(sigma, measure, grid, n, d, "sigma")
    gam_s, gam_fn = _sample_atom_coefficient(gamma, measure, grid, m, d, "gamma")

    for arr in (A_s, B_s, C_s, D_s, Sig_s, sig_s, gam_s):
        arr.setflags(write=False)

    return Scenario(
        grid=grid, n=n, m=m, d=d,
        A=A_s, B=B_s, C=C_s, D=D_s, Sigma=Sig_s,
        sigma=sig_s, gamma=gam_s, Q=Q_arr, Q0=Q0_arr,
        measure=measure,
        scalar_mode=(n == 1 and m == 1 and d == 1),
        fns={"A": A_fn, "B": B_fn, "C": C_fn, "D": D_fn, "Sigma": Sig_fn,
             "sigma": sig_fn, "gamma": gam_fn},
    )


def measure_averages(scenario: Scenario) -> BarQuantities:
    """Atom-weighted averages of the diffusion loadings at every node.

    Produces sigma-bar, gamma-bar and the covariance-weighted squares
    (averages of sigma Q sigma' and gamma Q0 gamma'). For a Dirac measure
    the bars coincide with the loadings themselves.
    """
    w = scenario.measure.weights
    sigma_bar = np.einsum("k,kjnd->jnd", w, scenario.sigma)
    gamma_bar = np.einsum("k,kjmd->jmd", w, scenario.gamma)
    sigma2_bar = np.einsum("k,kjad,de,kjbe->jab", w, scenario.sigma, scenario.Q, scenario.sigma)
    gamma2_bar = np.einsum("k,kjad,de,kjbe->jab", w, scenario.gamma, scenario.Q0, scenario.gamma)
    for arr in (sigma_bar, gamma_bar, sigma2_bar, gamma2_bar):
        arr.setflags(write=False)
    return BarQuantities(sigma_bar=sigma_bar, gamma_bar=gamma_bar,
                         sigma2_bar=sigma2_bar, gamma2_bar=gamma2_bar)
