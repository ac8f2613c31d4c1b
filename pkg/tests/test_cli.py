"""Config parsing, validation, command outputs and reproducibility."""

import hashlib
import json
import math
import os

import numpy as np
import pytest

from spde_ch import cli
from spde_ch.basis import Basis
from spde_ch.cli import (ConfigError, RunConfig, main, read_snapshot, run,
                         validate, write_snapshot)


def base_config(tmp_path, **overrides):
    data = {
        "command": "simulate",
        "basis": {"bc": "neumann", "dim": 1, "modes_per_axis": 16},
        "model": {"reaction": [1.0, 0.0, -1.0, 0.0], "sigma": 0.1},
        "solver": {"dt": 0.001, "t_final": 0.02, "q": 4.0, "truncation": 10.0},
        "covariance": {"kind": "riesz", "B": 0.5},
        "seed": 7,
        "outdir": str(tmp_path / "out"),
        "options": {"paths": 2, "u0_modes": [[[1], 0.5]]},
    }
    data.update(overrides)
    return data


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


class TestRunConfig:

    def test_round_trip(self, tmp_path):
        data = base_config(tmp_path)
        config = RunConfig.from_dict(data)
        assert config.to_dict() == data
        again = RunConfig.from_dict(config.to_dict())
        assert again.config_hash() == config.config_hash()

    def test_from_file(self, tmp_path):
        data = base_config(tmp_path)
        config = RunConfig.from_file(write_config(tmp_path, data))
        assert config.seed == 7
        assert config.model["sigma"] == 0.1

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            RunConfig.from_file(str(path))

    def test_unknown_keys_rejected(self, tmp_path):
        data = base_config(tmp_path)
        data["extra"] = 1
        with pytest.raises(ConfigError, match="unknown config keys"):
            RunConfig.from_dict(data)

    def test_unknown_command_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown command"):
            RunConfig.from_dict(base_config(tmp_path, command="plot"))

    def test_seed_must_be_64_bit_int(self, tmp_path):
        with pytest.raises(ConfigError, match="64-bit"):
            RunConfig.from_dict(base_config(tmp_path, seed=2**63))
        with pytest.raises(ConfigError, match="64-bit"):
            RunConfig.from_dict(base_config(tmp_path, seed=1.5))

    def test_hash_excludes_outdir(self, tmp_path):
        a = RunConfig.from_dict(base_config(tmp_path, outdir="first"))
        b = RunConfig.from_dict(base_config(tmp_path, outdir="second"))
        assert a.config_hash() == b.config_hash()

    def test_hash_tracks_seed_and_model(self, tmp_path):
        a = RunConfig.from_dict(base_config(tmp_path))
        b = RunConfig.from_dict(base_config(tmp_path, seed=8))
        c = RunConfig.from_dict(base_config(
            tmp_path, model={"reaction": [1.0, 0.0, -1.0, 0.0], "sigma": 0.2}))
        assert len({a.config_hash(), b.config_hash(), c.config_hash()}) == 3

    def test_build_model_polynomial_drift(self, tmp_path):
        data = base_config(tmp_path, model={
            "sigma": 0.3, "forcing": 2.0,
            "drifts": [{"orders": [0], "poly": [1.0, 0.0, 0.5]}]})
        model = RunConfig.from_dict(data).build_model()
        assert model.sigma == 0.3
        assert model.forcing(0.0, None, 0.0) == 2.0
        (orders, fn), = model.drifts
        assert orders == (0,)
        assert fn(2.0) == 1.0 + 0.5 * 4.0

    def test_initial_state_places_modes(self, tmp_path):
        data = base_config(tmp_path)
        data["options"] = {"u0_modes": [[[0], 0.3], [[3], -0.5]]}
        config = RunConfig.from_dict(data)
        u0 = config.initial_state(config.build_basis())
        assert u0[0] == 0.3 and u0[3] == -0.5
        assert np.count_nonzero(u0) == 2


class TestValidate:

    def test_reference_config_passes(self, tmp_path):
        data = base_config(
            tmp_path,
            basis={"bc": "neumann", "dim": 4, "modes_per_axis": 4},
            model={"reaction": [1.0, 0.0, -1.0, 0.0], "sigma": 0.05},
            solver={"dt": 1e-4, "t_final": 1e-3, "q": 5.0},
            covariance={"kind": "riesz", "B": 1.0})
        data["options"] = {"eps": 0.2}
        report = validate(RunConfig.from_dict(data))
        assert report["passed"]
        assert report["violations"] == []

    def test_negative_leading_coefficient_flagged(self, tmp_path):
        data = base_config(tmp_path,
                           model={"reaction": [-1.0, 0.0, -1.0, 0.0]})
        report = validate(RunConfig.from_dict(data))
        names = [v["hypothesis"] for v in report["violations"]]
        assert "reaction-leading-coefficient" in names

    def test_dirichlet_constant_term_flagged(self, tmp_path):
        data = base_config(
            tmp_path,
            basis={"bc": "dirichlet", "dim": 1, "modes_per_axis": 16},
            model={"reaction": [1.0, 0.0, 0.0, 1.0]})
        report = validate(RunConfig.from_dict(data))
        names = [v["hypothesis"] for v in report["violations"]]
        assert "reaction-zero-at-origin" in names

    def test_odd_drift_orders_flagged(self, tmp_path):
        data = base_config(tmp_path, model={
            "drifts": [{"orders": [1], "poly": [0.0, 1.0]}]})
        report = validate(RunConfig.from_dict(data))
        names = [v["hypothesis"] for v in report["violations"]]
        assert "drift-even-derivative-orders" in names

    def test_inadmissible_covariance_flagged(self, tmp_path):
        data = base_config(
            tmp_path,
            basis={"bc": "neumann", "dim": 5, "modes_per_axis": 2},
            model={"sigma": 1.0},
            solver={"dt": 1e-4, "t_final": 1e-3, "q": 6.0},
            covariance={"kind": "riesz", "B": 4.5})
        report = validate(RunConfig.from_dict(data))
        names = [v["hypothesis"] for v in report["violations"]]
        assert "covariance-integrability" in names

    def test_reaction_eps_condition_flagged(self, tmp_path):
        data = base_config(
            tmp_path,
            basis={"bc": "neumann", "dim": 4, "modes_per_axis": 4},
            solver={"dt": 1e-4, "t_final": 1e-3, "q": 5.0},
            covariance={"kind": "riesz", "B": 3.3})
        data["options"] = {"eps": 0.2}
        report = validate(RunConfig.from_dict(data))
        names = [v["hypothesis"] for v in report["violations"]]
        assert "covariance-reaction-eps" in names

    def test_small_q_flagged(self, tmp_path):
        data = base_config(
            tmp_path,
            basis={"bc": "neumann", "dim": 4, "modes_per_axis": 4},
            solver={"dt": 1e-4, "t_final": 1e-3, "q": 4.0})
        report = validate(RunConfig.from_dict(data))
        names = [v["hypothesis"] for v in report["violations"]]
        assert "initial-data-integrability" in names

    def test_violations_block_run_without_force(self, tmp_path):
        data = base_config(tmp_path,
                           model={"reaction": [-1.0, 0.0, 0.0, 0.0]})
        with pytest.raises(ConfigError, match="config violates"):
            run(RunConfig.from_dict(data))


class TestSnapshots:

    def test_round_trip(self, tmp_path):
        basis = Basis("neumann", 2, 6)
        rng = np.random.default_rng(0)
        stack = rng.standard_normal((3,) + basis.shape)
        path = tmp_path / "snap.bin"
        write_snapshot(str(path), basis, stack)
        bc, dim, M, back = read_snapshot(str(path))
        assert (bc, dim, M) == ("neumann", 2, 6)
        assert np.array_equal(back, stack)

    def test_single_field_gets_count_one(self, tmp_path):
        basis = Basis("dirichlet", 1, 5)
        field = np.arange(5.0)
        path = tmp_path / "snap.bin"
        write_snapshot(str(path), basis, field)
        bc, dim, M, back = read_snapshot(str(path))
        assert bc == "dirichlet" and back.shape == (1, 5)
        assert np.array_equal(back[0], field)

    def test_magic_bytes_lead_the_file(self, tmp_path):
        basis = Basis("neumann", 1, 4)
        path = tmp_path / "snap.bin"
        write_snapshot(str(path), basis, np.zeros(4))
        raw = path.read_bytes()
        assert raw[:5] == b"SPDE1"
        assert len(raw) == 5 + 16 + 4 * 8

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNK!" + b"\0" * 32)
        with pytest.raises(ValueError, match="bad magic"):
            read_snapshot(str(path))

    def test_shape_mismatch_rejected(self, tmp_path):
        basis = Basis("neumann", 2, 6)
        with pytest.raises(ValueError, match="does not match"):
            write_snapshot(str(tmp_path / "x.bin"), basis, np.zeros((3, 5)))


class TestCommands:

    def test_simulate_zero_model_is_semigroup_decay(self, tmp_path):
        data = base_config(
            tmp_path,
            model={},
            covariance=None,
            solver={"dt": 0.001, "t_final": 0.02, "q": 2.0})
        data["options"] = {"u0_modes": [[[0], 0.3], [[3], 0.5]],
                           "snapshots": True}
        config = RunConfig.from_dict(data)
        run(config)
        _, _, _, snap = read_snapshot(os.path.join(config.outdir,
                                                   "snapshots.bin"))
        expected = np.zeros(16)
        expected[0] = 0.3
        expected[3] = 0.5 * math.exp(-(3**2) ** 2 * 0.02)
        assert np.allclose(snap[0], expected, rtol=1e-12, atol=1e-15)

    def test_simulate_outputs_and_manifest(self, tmp_path):
        data = base_config(tmp_path)
        data["options"]["snapshots"] = True
        config = RunConfig.from_dict(data)
        manifest = run(config)
        assert set(manifest["files"]) == {"paths.csv", "series.jsonl",
                                          "snapshots.bin"}
        for name, digest in manifest["files"].items():
            blob = open(os.path.join(config.outdir, name), "rb").read()
            assert hashlib.sha256(blob).hexdigest() == digest
        saved = json.load(open(os.path.join(config.outdir, "manifest.json")))
        assert saved["config_hash"] == config.config_hash()
        assert saved["versions"]["spde_ch"]

    def test_csv_provenance_columns(self, tmp_path):
        config = RunConfig.from_dict(base_config(tmp_path))
        run(config)
        header = open(os.path.join(config.outdir, "paths.csv")).readline()
        cols = header.strip().split(",")
        assert cols[-2:] == ["config_hash", "version"]
        first = open(os.path.join(config.outdir, "paths.csv")).readlines()[1]
        assert config.config_hash() in first

    def test_check_covariance_straddle_table(self, tmp_path):
        data = base_config(
            tmp_path,
            command="check-covariance",
            basis={"bc": "neumann", "dim": 4, "modes_per_axis": 4},
            model=None, solver=None,
            covariance={"kind": "riesz", "B": 1.0})
        data["options"] = {"B_values": [3.1, 3.3], "eps": 0.2}
        config = RunConfig.from_dict(data)
        run(config)
        rows = open(os.path.join(config.outdir, "covariance.csv")).readlines()
        table = "".join(rows)
        assert "admissible" in table and "inadmissible" in table
        ch_rows = [r for r in rows if "cahn-hilliard" in r]
        assert len(ch_rows) == 2
        assert any("inadmissible" in r for r in ch_rows)
        assert any(",admissible" in r for r in ch_rows)

    def test_green_table_columns(self, tmp_path):
        data = base_config(
            tmp_path,
            command="green",
            basis={"bc": "neumann", "dim": 2, "modes_per_axis": 24},
            model=None, solver=None, covariance=None)
        data["options"] = {"taus": [0.01]}
        config = RunConfig.from_dict(data)
        run(config)
        rows = open(os.path.join(config.outdir, "green.csv")).readlines()
        assert rows[0].startswith("tau,x0,x1,y0,y1,value,scaled_value")
        assert len(rows) == 2

    def test_picard_outputs(self, tmp_path):
        data = base_config(
            tmp_path,
            command="picard",
            model={"sigma": 0.2,
                   "drifts": [{"orders": [0], "poly": [0.0, 0.5]}],
                   "lipschitz_only": True},
            solver={"dt": 0.001, "t_final": 0.05, "q": 4.0})
        data["options"] = {"tol": 1e-8}
        config = RunConfig.from_dict(data)
        run(config)
        result = json.loads(
            open(os.path.join(config.outdir, "picard.jsonl")).readline())
        assert result["converged"] is True
        deltas = [float(line.split(",")[1]) for line in
                  open(os.path.join(config.outdir, "picard.csv")).readlines()[1:]]
        assert deltas[-1] < 1e-8

    def test_regularity_outputs(self, tmp_path):
        data = base_config(
            tmp_path,
            command="regularity",
            basis={"bc": "neumann", "dim": 1, "modes_per_axis": 24},
            model={"sigma": 1.0},
            solver={"dt": 0.0005, "t_final": 0.02, "q": 2.0},
            covariance={"kind": "white"})
        data["options"] = {"paths": 4}
        config = RunConfig.from_dict(data)
        manifest = run(config)
        assert set(manifest["files"]) == {"structure.csv", "fits.jsonl",
                                          "moments.csv"}
        fits = [json.loads(line) for line in
                open(os.path.join(config.outdir, "fits.jsonl"))]
        assert {f["axis"] for f in fits} == {"time", "0"}
        for f in fits:
            assert np.isfinite(f["exponent"])

    def test_malliavin_outputs(self, tmp_path):
        data = base_config(
            tmp_path,
            command="malliavin",
            model={"sigma": 1.0},
            solver={"dt": 0.001, "t_final": 0.04, "q": 2.0},
            covariance={"kind": "riesz", "B": 0.5})
        data["options"] = {"paths": 2, "nu": 0.02}
        config = RunConfig.from_dict(data)
        manifest = run(config)
        assert set(manifest["files"]) == {"eigenvalues.csv",
                                          "decomposition.csv", "density.json"}
        density = json.load(open(os.path.join(config.outdir, "density.json")))
        assert density["verdict"] == "absolutely-continuous"
        assert density["positive_fraction"] == 1.0
        eigs = [float(line.split(",")[2]) for line in
                open(os.path.join(config.outdir,
                                  "eigenvalues.csv")).readlines()[1:]]
        assert min(eigs) > -1e-12

    def test_simulate_noise_without_covariance_rejected(self, tmp_path):
        data = base_config(tmp_path, covariance=None)
        with pytest.raises(ConfigError, match="no covariance block"):
            run(RunConfig.from_dict(data))


class TestReproducibility:

    def test_same_config_seed_byte_identical(self, tmp_path):
        data = base_config(tmp_path)
        data["options"]["snapshots"] = True
        first = RunConfig.from_dict(dict(data, outdir=str(tmp_path / "a")))
        second = RunConfig.from_dict(dict(data, outdir=str(tmp_path / "b")))
        run(first, threads=1)
        run(second, threads=2)
        for name in ("paths.csv", "series.jsonl", "snapshots.bin"):
            a = open(os.path.join(first.outdir, name), "rb").read()
            b = open(os.path.join(second.outdir, name), "rb").read()
            assert a == b, f"{name} differs between runs"

    def test_different_seed_changes_outputs(self, tmp_path):
        data = base_config(tmp_path)
        first = RunConfig.from_dict(
            dict(data, outdir=str(tmp_path / "a")))
        second = RunConfig.from_dict(
            dict(data, seed=8, outdir=str(tmp_path / "b")))
        run(first)
        run(second)
        a = open(os.path.join(first.outdir, "paths.csv")).read()
        b = open(os.path.join(second.outdir, "paths.csv")).read()
        assert a != b


class TestMain:

    def test_ok_run_exit_zero(self, tmp_path, capsys):
        path = write_config(tmp_path, base_config(tmp_path))
        assert main(["simulate", "--config", path]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["ok"] is True
        assert "paths.csv" in out["files"]

    def test_invalid_config_exit_nonzero_with_json_error(self, tmp_path,
                                                         capsys):
        data = base_config(tmp_path,
                           model={"reaction": [-1.0, 0.0, 0.0, 0.0]})
        path = write_config(tmp_path, data)
        assert main(["simulate", "--config", path]) == 2
        out = json.loads(capsys.readouterr().out)
        assert out["error"]["type"] == "ConfigError"
        names = [v["hypothesis"] for v in out["error"]["violations"]]
        assert "reaction-leading-coefficient" in names

    def test_force_overrides_validation(self, tmp_path, capsys):
        data = base_config(
            tmp_path,
            solver={"dt": 0.001, "t_final": 0.01, "q": 1.0,
                    "truncation": 10.0})
        path = write_config(tmp_path, data)
        assert main(["simulate", "--config", path]) == 2
        capsys.readouterr()
        assert main(["simulate", "--config", path, "--force"]) == 0

    def test_command_mismatch_rejected(self, tmp_path, capsys):
        path = write_config(tmp_path, base_config(tmp_path))
        assert main(["green", "--config", path]) == 2
        out = json.loads(capsys.readouterr().out)
        assert "names command" in out["error"]["message"]

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["simulate", "--config",
                     str(tmp_path / "absent.json")]) == 2
        out = json.loads(capsys.readouterr().out)
        assert out["error"]["type"] == "FileNotFoundError"

    def test_seed_and_out_overrides(self, tmp_path, capsys):
        data = base_config(tmp_path)
        path = write_config(tmp_path, data)
        alt = str(tmp_path / "elsewhere")
        assert main(["simulate", "--config", path,
                     "--seed", "99", "--out", alt]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["outdir"] == alt
        assert os.path.exists(os.path.join(alt, "paths.csv"))
        base = RunConfig.from_dict(data)
        assert out["config_hash"] != base.config_hash()

    def test_threads_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.delenv(cli.THREADS_ENV, raising=False)
        assert cli._resolve_threads(None) == 1
        assert cli._resolve_threads(4) == 4
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        assert cli._resolve_threads(None) == 3
        assert cli._resolve_threads(2) == 2
        monkeypatch.setenv(cli.THREADS_ENV, "many")
        with pytest.raises(ConfigError, match="must be an integer"):
            cli._resolve_threads(None)

    def test_env_threads_run_matches_serial(self, tmp_path, capsys,
                                            monkeypatch):
        data = base_config(tmp_path, outdir=str(tmp_path / "serial"))
        path = write_config(tmp_path, data)
        assert main(["simulate", "--config", path]) == 0
        monkeypatch.setenv(cli.THREADS_ENV, "2")
        alt = str(tmp_path / "threaded")
        assert main(["simulate", "--config", path, "--out", alt]) == 0
        capsys.readouterr()
        a = open(os.path.join(data["outdir"], "paths.csv")).read()
        b = open(os.path.join(alt, "paths.csv")).read()
        assert a == b


class TestFormatting:

    def test_floats_round_trip_exactly(self):
        for x in (math.pi, 1e-300, -2.5000000000000004, 0.1):
            assert float(cli._fmt(x)) == x

    def test_special_values(self):
        assert cli._fmt(None) == ""
        assert cli._fmt(True) == "true"
        assert cli._fmt(np.bool_(False)) == "false"
        assert cli._fmt(np.int64(7)) == "7"
        assert cli._fmt("label") == "label"
