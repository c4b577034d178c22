"""Command-line interface: scenario loading, subcommand dispatch, CSV export.

Subcommands: simulate | kernels | covariance | gradcheck | optimize | validate.
Every output file records the scenario hash, seed, grid and package version
in leading comment rows; reruns with the same seed are byte-identical.
CSV export targets scalar scenarios (the bundled ones are scalar); matrix
scenarios are served by the library API.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import cost_gradient, covariance_profile, drift_profile, fd_cost_slope
from .gain import build_filter, optimize_gain, riccati_classical, riccati_normal_flow
from .kernels import GainSchedule, kernel_bundle
from .scenarios import resolve_scenario, scenario_hash
from .simulation import empirical_statistics, simulate_ensemble
from .system_model import measure_averages
from .validation import DEFAULT_SEED, ValidationSuite, write_csv

_DEFAULT_OUT = "mfk-out"


class CliError(RuntimeError):
    def __init__(self, stage: str, message: str, code: int = 1):
        super().__init__(f"error in stage {stage}: {message}")
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfkalman",
        description="Minimum-variance filtering for interacting particle systems",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", default="classical",
                       help="bundled scenario name (classical, normal-flow) or YAML path")
        p.add_argument("--steps", type=int, default=None, help="override grid steps")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--out", default=_DEFAULT_OUT, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow overwriting existing output files")
        p.add_argument("--gain", choices=("zero", "reference"), default="zero",
                       help="gain at which to evaluate (reference = closed-form "
                            "benchmark gain, bundled scenarios only)")

    p = sub.add_parser("simulate", help="Monte Carlo ensemble and statistics")
    common(p)
    p.add_argument("--paths", type=int, default=2000)

    p = sub.add_parser("kernels", help="transition/mixed kernel triangles")
    common(p)

    p = sub.add_parser("covariance", help="error covariance per atom and node")
    common(p)

    p = sub.add_parser("gradcheck", help="gradient vs central-difference oracle")
    common(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--directions", type=int, default=5)

    p = sub.add_parser("optimize", help="gradient descent to the optimal gain")
    common(p)
    p.add_argument("--grad-tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=2000)

    p = sub.add_parser("validate", help="run the acceptance suite")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default=str(Path(_DEFAULT_OUT) / "validate"))
    p.add_argument("--force", action="store_true")
    return parser


def _prepare_out(out: str, names: list[str], force: bool) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not force:
        for name in names:
            target = out_dir / name
            if target.exists():
                raise CliError("output", f"{target} exists (use --force to overwrite)", 2)
    return out_dir


def _load(args):
    try:
        return resolve_scenario(args.scenario, steps=args.steps)
    except Exception as exc:
        raise CliError("scenario", str(exc)) from exc


def _require_scalar(scenario, stage: str):
    if not scenario.scalar_mode:
        raise CliError(stage, "CSV export supports scalar scenarios; "
                              "use the library API for matrix systems")


def _gain_for(args, scenario) -> GainSchedule:
    if args.gain == "zero":
        return GainSchedule.constant(scenario.grid, 0.0, scenario.n, scenario.m)
    if args.scenario == "classical":
        ref = riccati_classical(0.0, 1.0, 1.0, 1.0, scenario.grid)
    elif args.scenario == "normal-flow":
        ref = riccati_normal_flow(0.0, 1.0, scenario.grid)
    else:
        raise CliError("gain", "--gain reference is only defined for bundled scenarios")
    return ref.gain()


def _meta(scenario, seed, extra=None):
    meta = {
        "scenario_hash": scenario_hash(scenario),
        "seed": seed,
        "grid": f"T={scenario.grid.horizon:g},N={scenario.grid.n_steps}",
        "version": __version__,
    }
    if extra:
        meta.update(extra)
    return meta


def _write_report(path: Path, scenario, seed, lines: list[str]) -> None:
    header = [f"# {k}={v}" for k, v in _meta(scenario, seed).items()]
    path.write_text("\n".join(header + lines) + "\n")


def _cmd_simulate(args) -> int:
    scenario = _load(args)
    _require_scalar(scenario, "simulate")
    if args.paths < 1:
        raise CliError("simulate", f"--paths must be >= 1, got {args.paths}")
    out = _prepare_out(args.out, ["paths.csv", "statistics.csv"], args.force)
    gain = _gain_for(args, scenario)
    ens = simulate_ensemble(scenario, gain, n_paths=args.paths, seed=args.seed)
    nodes = scenario.grid.nodes
    rows = []
    for r in range(min(10, ens.n_paths)):
        for a in range(scenario.n_atoms):
            for j in range(scenario.grid.n_nodes):
                rows.append((r, a, float(nodes[j]),
                             float(ens.x[r, a, j, 0]), float(ens.y[r, a, j, 0]),
                             float(ens.z[r, a, j, 0]), float(ens.e[r, a, j, 0])))
    write_csv(out / "paths.csv", "rep,atom,t,x,y,z,e", rows,
              _meta(scenario, args.seed, {"n_paths": args.paths}))
    rows = []
    for a in range(scenario.n_atoms):
        for j in range(scenario.grid.n_nodes):
            st = empirical_statistics(ens, a, j)
            rows.append((a, float(nodes[j]), float(st.mean[0]), float(st.cov[0, 0]),
                         float(st.mean_se[0]), float(st.var_se[0])))
    write_csv(out / "statistics.csv", "atom,t,mean,var,se_mean,se_var", rows,
              _meta(scenario, args.seed, {"n_paths": args.paths}))
    print(f"simulate: wrote {out / 'paths.csv'} and {out / 'statistics.csv'}")
    return 0


def _dump_triangle(path, scenario, kernel, seed):
    nodes = scenario.grid.nodes
    rows = []
    for i in range(scenario.grid.n_nodes):
        for j in range(i + 1):
            rows.append((float(nodes[i]), float(nodes[j]), float(kernel.values[i, j])))
    write_csv(path, "t,s,value", rows, _meta(scenario, seed))


def _cmd_kernels(args) -> int:
    scenario = _load(args)
    _require_scalar(scenario, "kernels")
    names = ["kernel_phi.csv", "kernel_psi.csv", "kernel_f.csv", "kernels_report.txt"]
    out = _prepare_out(args.out, names, args.force)
    gain = _gain_for(args, scenario)
    bundle = kernel_bundle(scenario, gain)
    _dump_triangle(out / "kernel_phi.csv", scenario, bundle.phi, args.seed)
    _dump_triangle(out / "kernel_psi.csv", scenario, bundle.psi, args.seed)
    _dump_triangle(out / "kernel_f.csv", scenario, bundle.f, args.seed)
    dt = scenario.grid.dt
    Fv, Pv, Sv = bundle.f.values, bundle.phi.values, bundle.psi.values
    M = bundle.M.reshape(-1)
    H = bundle.H.reshape(-1)
    f_resid = 0.0
    psi_resid = 0.0
    for i in range(1, scenario.grid.n_steps):
        js = np.arange(0, i)
        f_resid = max(f_resid, float(np.max(np.abs(
            (Fv[i + 1, js] - Fv[i - 1, js]) / (2 * dt) - M[i] * Pv[i, js] - H[i] * Fv[i, js]))))
        psi_resid = max(psi_resid, float(np.max(np.abs(
            (Sv[i + 1, js] - Sv[i - 1, js]) / (2 * dt) - H[i] * Sv[i, js]))))
    _write_report(out / "kernels_report.txt", scenario, args.seed, [
        f"mixed-kernel rate residual (sup, interior): {f_resid:.6e}",
        f"point-kernel rate residual (sup, interior): {psi_resid:.6e}",
    ])
    print(f"kernels: residuals {f_resid:.3e} / {psi_resid:.3e}; wrote {out}")
    return 0


def _cmd_covariance(args) -> int:
    scenario = _load(args)
    _require_scalar(scenario, "covariance")
    out = _prepare_out(args.out, ["covariance.csv", "covariance_report.txt"], args.force)
    gain = _gain_for(args, scenario)
    bundle = kernel_bundle(scenario, gain)
    bars = measure_averages(scenario)
    nodes = scenario.grid.nodes
    rows = []
    worst = 0.0
    for a in range(scenario.n_atoms):
        K = covariance_profile(scenario, bundle, bars, a)
        K1 = drift_profile(scenario, bundle, bars, a)
        for j in range(scenario.grid.n_nodes):
            rows.append((a, float(nodes[j]), float(K[j])))
        fd = (K[2:] - K[:-2]) / (2 * scenario.grid.dt)
        scale = float(np.max(np.abs(2 * K1[1:-1])))
        if scale > 1e-13:
            worst = max(worst, float(np.max(np.abs(fd - 2 * K1[1:-1]))) / scale)
    write_csv(out / "covariance.csv", "atom,t,K", rows, _meta(scenario, args.seed))
    _write_report(out / "covariance_report.txt", scenario, args.seed, [
        f"rate-consistency relative residual (sup, interior): {worst:.6e}",
    ])
    print(f"covariance: rate residual {worst:.3e}; wrote {out / 'covariance.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    scenario = _load(args)
    _require_scalar(scenario, "gradcheck")
    out = _prepare_out(args.out, ["gradcheck.csv", "gradient.csv"], args.force)
    if args.eps <= 0:
        raise CliError("gradcheck", "--eps must be positive")
    gain = _gain_for(args, scenario)
    bars = measure_averages(scenario)
    bundle = kernel_bundle(scenario, gain)
    g = cost_gradient(scenario, bundle, bars)
    rng = np.random.default_rng(args.seed)
    t = scenario.grid.nodes / scenario.grid.horizon
    directions = [np.ones(scenario.grid.n_nodes)]
    for _ in range(max(0, args.directions - 1)):
        a, b, c = rng.uniform(-1.0, 1.0, 3)
        w = rng.integers(1, 4)
        directions.append(a + b * np.sin(np.pi * w * t) + c * np.cos(2 * np.pi * t))
    rows = []
    for k, beta_vals in enumerate(directions):
        beta = GainSchedule(scenario.grid, beta_vals[:, None, None])
        pairing = g.pair(beta_vals)
        fd = fd_cost_slope(scenario, gain, beta, args.eps, bars)
        rows.append((k, pairing, fd, abs(pairing - fd)))
    write_csv(out / "gradcheck.csv", "direction,pairing,fd_oracle,abs_diff", rows,
              _meta(scenario, args.seed, {"eps": f"{args.eps:g}"}))
    write_csv(out / "gradient.csv", "t,g",
              [(float(tv), float(v)) for tv, v in zip(scenario.grid.nodes, g.values)],
              _meta(scenario, args.seed))
    worst = max(r[3] for r in rows)
    print(f"gradcheck: {len(rows)} directions, max |pairing - fd| = {worst:.3e}")
    return 0


def _cmd_optimize(args) -> int:
    scenario = _load(args)
    _require_scalar(scenario, "optimize")
    names = ["optimizer_trajectory.csv", "optimizer_gain.csv", "filter.csv",
             "optimizer_report.txt"]
    out = _prepare_out(args.out, names, args.force)
    report = optimize_gain(scenario, grad_tol=args.grad_tol, max_iter=args.max_iter)
    rows = [(i, J, gn) for i, (J, gn) in enumerate(
        zip(report.cost_trajectory, report.gradient_trajectory))]
    write_csv(out / "optimizer_trajectory.csv", "iter,J,grad_norm", rows,
              _meta(scenario, args.seed))
    write_csv(out / "optimizer_gain.csv", "t,gain",
              [(float(t), float(v)) for t, v in
               zip(scenario.grid.nodes, report.gain.scalar)],
              _meta(scenario, args.seed))
    coeffs = build_filter(scenario, report.gain)
    write_csv(out / "filter.csv", "t,h,m,gain",
              [(float(t), float(coeffs.h[j, 0, 0]), float(coeffs.m[j, 0, 0]),
                float(report.gain.scalar[j]))
               for j, t in enumerate(scenario.grid.nodes)],
              _meta(scenario, args.seed))
    lines = [
        f"iterations: {report.iterations}",
        f"converged: {report.converged}",
        f"final cost: {report.final_cost:.12g}",
        f"stationarity residual: {report.stationarity:.6e}",
    ]
    if args.scenario == "classical":
        ref = riccati_classical(0.0, 1.0, 1.0, 1.0, scenario.grid)
        dev = float(np.max(np.abs(report.gain.scalar - ref.gain_values)))
        lines.append(f"max gain deviation from closed-form reference: {dev:.6e}")
    elif args.scenario == "normal-flow":
        ref = riccati_normal_flow(0.0, 1.0, scenario.grid)
        dev = float(np.max(np.abs(report.gain.scalar - ref.gain_values)))
        lines.append(f"max gain deviation from closed-form reference: {dev:.6e}")
    _write_report(out / "optimizer_report.txt", scenario, args.seed, lines)
    print("\n".join(lines))
    if not report.converged:
        raise CliError("optimize", report.message or "did not converge")
    return 0


def _cmd_validate(args) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.glob("*.csv")) and not args.force:
        raise CliError("output", f"{out_dir} already holds results "
                                 f"(use --force to overwrite)", 2)
    out_dir.mkdir(parents=True, exist_ok=True)
    suite = ValidationSuite(out_dir, seed=args.seed)
    results = suite.run_all()
    failed = 0
    for res in results:
        print(res.line())
        for detail in res.details:
            print(f"    {detail}")
        failed += 0 if res.passed else 1
    print(f"{len(results) - failed}/{len(results)} criteria passed; "
          f"artifacts in {out_dir}")
    return 0 if failed == 0 else 1


_COMMANDS = {
    "simulate": _cmd_simulate,
    "kernels": _cmd_kernels,
    "covariance": _cmd_covariance,
    "gradcheck": _cmd_gradcheck,
    "optimize": _cmd_optimize,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"error in stage {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
