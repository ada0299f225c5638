import subprocess
import sys

import pytest

import fogcache.cli as cli
from fogcache import __version__
from fogcache.checks import CheckResult
from fogcache.errors import SolverError
from fogcache.model import load_instance


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text("M = 3\nK = 15\nN = 10\nmc_samples = 300\nq_values = 1:3\n")
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestCommands:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("--version")
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_generate(self, cfg, tmp_path):
        out = tmp_path / "gen"
        assert run("generate", "--config", cfg, "--out", out, "--seed", 4) == 0
        inst, demand = load_instance(out / "instance.fgi")
        assert (inst.M, inst.K, demand.N) == (3, 15, 10)
        assert (out / "rates_cotc.frt").exists() and (out / "rates_noncotc.frt").exists()

    def test_solve(self, cfg, tmp_path, capsys):
        out = tmp_path / "solve"
        assert run("solve", "--config", cfg, "--out", out, "--q", 2, "--strategy", "greedy-cotc,bp-cotc,gpc") == 0
        assert (out / "solve_q2.csv").exists()
        assert (out / "placement_greedy-cotc_q2.csv").exists()
        assert (out / "trace_bp-cotc_q2.csv").exists()
        assert (out / "placement_gpc_noncotc_q2.csv").exists()
        assert "greedy-cotc" in capsys.readouterr().out

    def test_sweep_and_report(self, cfg, tmp_path, capsys):
        out = tmp_path / "sw"
        assert run("sweep", "--config", cfg, "--out", out, "--strategy", "greedy-cotc,gpc", "--bp-tmax", 50) == 0
        assert (out / "sweep.csv").exists()
        assert run("report", out / "sweep.csv", "--out", tmp_path / "rep") == 0
        assert "rel_gap" in capsys.readouterr().out

    def test_gamma_sweep_flags(self, cfg, tmp_path):
        out = tmp_path / "g"
        assert run("sweep", "--config", cfg, "--out", out, "--sweep", "gamma", "--gamma", "0.5,1.5",
                   "--q", 2, "--strategy", "lpc") == 0
        assert (out / "traces").is_dir()

    def test_verify_passes(self, tmp_path, capsys):
        assert run("verify", "--out", tmp_path / "v") == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4 and "INFO" in out
        assert (tmp_path / "v" / "wald.csv").exists()


class TestExitCodes:
    def test_bad_strategy(self, cfg, tmp_path, capsys):
        assert run("solve", "--config", cfg, "--out", tmp_path, "--strategy", "random") == 2
        assert "configuration error" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert run("sweep", "--config", tmp_path / "nope.cfg") == 2

    def test_capacity_above_files(self, cfg, tmp_path):
        assert run("sweep", "--config", cfg, "--out", tmp_path, "--q", "5,50") == 2

    def test_solver_failure(self, cfg, tmp_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise SolverError("non-finite message in round 3")

        monkeypatch.setattr("fogcache.experiments.bp_solve", boom)
        assert run("sweep", "--config", cfg, "--out", tmp_path, "--strategy", "bp-cotc") == 3
        assert "strategy bp-cotc" in capsys.readouterr().err

    def test_verification_failure(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "wald_check", lambda **k: CheckResult("wald", ("x",), passed=False, summary="broken"))
        assert run("verify") == 4

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fogcache.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("generate", "solve", "sweep", "report", "verify"):
        assert sub in proc.stdout
