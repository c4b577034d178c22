import pytest

from mfkalman.cli import main


def read_csv(path):
    meta = {}
    rows = []
    header = None
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        elif header is None:
            header = line.split(",")
        else:
            rows.append(line.split(","))
    return meta, header, rows


class TestSimulate:
    def test_zero_paths_rejected(self, tmp_path, capsys):
        code = main(["simulate", "--paths", "0", "--out", str(tmp_path)])
        assert code != 0
        assert "simulate" in capsys.readouterr().err

    def test_writes_paths_and_statistics(self, tmp_path):
        code = main(["simulate", "--scenario", "classical", "--steps", "50",
                     "--paths", "200", "--seed", "5", "--out", str(tmp_path)])
        assert code == 0
        meta, header, rows = read_csv(tmp_path / "paths.csv")
        assert header == ["rep", "atom", "t", "x", "y", "z", "e"]
        assert meta["seed"] == "5"
        # error column starts at zero for every replication
        first_nodes = [r for r in rows if float(r[2]) == 0.0]
        assert all(float(r[6]) == 0.0 for r in first_nodes)
        meta, header, rows = read_csv(tmp_path / "statistics.csv")
        assert header == ["atom", "t", "mean", "var", "se_mean", "se_var"]

    def test_rerun_is_byte_identical(self, tmp_path):
        args = ["simulate", "--steps", "40", "--paths", "100", "--seed", "3",
                "--out", str(tmp_path)]
        assert main(args) == 0
        first = (tmp_path / "paths.csv").read_bytes()
        assert main(args + ["--force"]) == 0
        assert (tmp_path / "paths.csv").read_bytes() == first

    def test_overwrite_needs_force(self, tmp_path, capsys):
        args = ["simulate", "--steps", "40", "--paths", "50", "--out", str(tmp_path)]
        assert main(args) == 0
        assert main(args) == 2
        assert "exists" in capsys.readouterr().err


class TestKernels:
    def test_psi_diagonal_is_one(self, tmp_path):
        code = main(["kernels", "--scenario", "classical", "--steps", "60",
                     "--gain", "reference", "--out", str(tmp_path)])
        assert code == 0
        _, header, rows = read_csv(tmp_path / "kernel_psi.csv")
        assert header == ["t", "s", "value"]
        diag = [r for r in rows if r[0] == r[1]]
        assert len(diag) == 61
        assert all(float(r[2]) == 1.0 for r in diag)

    def test_f_diagonal_is_zero(self, tmp_path):
        code = main(["kernels", "--steps", "60", "--out", str(tmp_path)])
        assert code == 0
        _, _, rows = read_csv(tmp_path / "kernel_f.csv")
        diag = [r for r in rows if r[0] == r[1]]
        assert all(float(r[2]) == 0.0 for r in diag)
        assert (tmp_path / "kernels_report.txt").exists()


class TestCovariance:
    def test_initial_node_zero(self, tmp_path):
        code = main(["covariance", "--scenario", "normal-flow", "--steps", "50",
                     "--gain", "reference", "--out", str(tmp_path)])
        assert code == 0
        _, header, rows = read_csv(tmp_path / "covariance.csv")
        assert header == ["atom", "t", "K"]
        start = [r for r in rows if float(r[1]) == 0.0]
        assert len(start) == 11  # one per quadrature atom
        assert all(float(r[2]) == 0.0 for r in start)


class TestGradcheck:
    def test_constant_direction_row(self, tmp_path):
        code = main(["gradcheck", "--scenario", "classical", "--seed", "9",
                     "--out", str(tmp_path)])
        assert code == 0
        meta, header, rows = read_csv(tmp_path / "gradcheck.csv")
        assert header == ["direction", "pairing", "fd_oracle", "abs_diff"]
        first = rows[0]
        assert float(first[1]) == pytest.approx(-1.0 / 3.0, abs=1e-5)
        assert float(first[3]) <= 1e-5
        # remaining directions satisfy the relative tolerance
        for row in rows[1:]:
            assert float(row[3]) <= 1e-3 * (1 + abs(float(row[1])))


class TestOptimize:
    def test_classical_run(self, tmp_path, capsys):
        code = main(["optimize", "--scenario", "classical", "--steps", "150",
                     "--grad-tol", "1e-5", "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "max gain deviation from closed-form reference" in out
        dev = float(out.rsplit(":", 1)[1])
        assert dev <= 5e-3
        meta, header, rows = read_csv(tmp_path / "optimizer_trajectory.csv")
        assert header == ["iter", "J", "grad_norm"]
        costs = [float(r[1]) for r in rows]
        assert all(b <= a for a, b in zip(costs, costs[1:]))
        _, header, rows = read_csv(tmp_path / "filter.csv")
        assert header == ["t", "h", "m", "gain"]
        # classical: h = -gain, m = 0
        assert all(float(r[1]) == pytest.approx(-float(r[3]), abs=1e-12) for r in rows)
        assert all(float(r[2]) == 0.0 for r in rows)


class TestScenarioFiles:
    def test_yaml_round_trip(self, tmp_path):
        spec = tmp_path / "scen.yaml"
        spec.write_text(
            "horizon: 1.0\n"
            "steps: 60\n"
            "measure: {kind: discrete, points: [[-1.0], [1.0]], weights: [0.5, 0.5]}\n"
            "coefficients:\n"
            "  A: 0.2\n"
            "  B: \"0.5 * cos(t)\"\n"
            "  C: 1.0\n"
            "  D: 0.1\n"
            "sigma: \"1.0 + 0.25 * u\"\n"
            "gamma: \"0.6 + 0.2 * u\"\n"
            "noise: {Q: 1.0, Q0: 1.0}\n"
            "cost_weight: 1.0\n"
        )
        out = tmp_path / "out"
        code = main(["simulate", "--scenario", str(spec), "--paths", "50",
                     "--out", str(out)])
        assert code == 0
        _, _, rows = read_csv(out / "statistics.csv")
        atoms = {r[0] for r in rows}
        assert atoms == {"0", "1"}

    def test_unknown_scenario_rejected(self, tmp_path, capsys):
        code = main(["simulate", "--scenario", "nope", "--out", str(tmp_path)])
        assert code != 0
        assert "scenario" in capsys.readouterr().err

    def test_malicious_expression_rejected(self, tmp_path, capsys):
        spec = tmp_path / "bad.yaml"
        spec.write_text("coefficients: {A: \"__import__('os')\"}\n")
        code = main(["simulate", "--scenario", str(spec), "--out", str(tmp_path)])
        assert code != 0
