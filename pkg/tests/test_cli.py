"""Command-line interface: exit codes, verdict records, run directories,
manifests and output determinism."""
import os

import pytest

from spde_control.cli import _parse_eta, _parse_ladder, main
from spde_control.scenario import ConfigError

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture(name):
    return os.path.join(FIXTURES, name)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_eta_spec_parsing():
    assert _parse_eta("4h2", 0.1) == pytest.approx(0.04)
    assert _parse_eta("h2", 0.1) == pytest.approx(0.01)
    assert _parse_eta("0.25", 0.1) == pytest.approx(0.25)


def test_ladder_parsing():
    assert _parse_ladder("2^-3,2^-4") == [0.125, 0.0625]
    assert _parse_ladder("0.5, 0.25") == [0.5, 0.25]
    with pytest.raises(ConfigError):
        _parse_ladder(" , ")


def test_simulate_writes_outputs_and_verdict(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--scenario", fixture("bilinear.cfg"),
                       "--paths", "50", "--out", str(tmp_path))
    assert code == 0
    assert "VERDICT experiment=simulate status=pass" in out
    rundir = tmp_path / "simulate-bilinear-s7"
    assert (rundir / "manifest.txt").exists()
    assert (rundir / "terminal_mean.csv").exists()
    assert (rundir / "summary.csv").exists()
    manifest = (rundir / "manifest.txt").read_text()
    assert "override.paths=50" in manifest
    assert "tool_version=" in manifest


def test_seed_override_lands_in_run_directory_and_manifest(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--scenario", fixture("bilinear.cfg"),
                     "--paths", "20", "--seed", "21", "--out", str(tmp_path))
    assert code == 0
    manifest = (tmp_path / "simulate-bilinear-s21" / "manifest.txt").read_text()
    assert "override.seed=21" in manifest


def test_simulate_is_byte_deterministic(tmp_path, capsys):
    args = ("simulate", "--scenario", fixture("bilinear.cfg"),
            "--paths", "50")
    code1, _, _ = run(capsys, *args, "--out", str(tmp_path / "a"))
    code2, _, _ = run(capsys, *args, "--out", str(tmp_path / "b"))
    assert code1 == code2 == 0
    for name in ("terminal_mean.csv", "summary.csv"):
        a = (tmp_path / "a" / "simulate-bilinear-s7" / name).read_bytes()
        b = (tmp_path / "b" / "simulate-bilinear-s7" / name).read_bytes()
        assert a == b


def test_adjoint_second_order_writes_tensor(tmp_path, capsys):
    code, out, _ = run(capsys, "adjoint", "--scenario", fixture("bilinear.cfg"),
                       "--paths", "300", "--order", "2", "--eta", "4h2",
                       "--out", str(tmp_path))
    assert code == 0
    rundir = tmp_path / "adjoint-bilinear-s7"
    assert (rundir / "p0_mean.csv").exists()
    assert (rundir / "P0_mean.csv").exists()


def test_adjoint_regression_failure_exits_one(tmp_path, capsys):
    # 30 paths cannot support the default feature count
    code, out, err = run(capsys, "adjoint", "--scenario",
                         fixture("bilinear.cfg"), "--paths", "30",
                         "--out", str(tmp_path))
    assert code == 1
    assert "status=fail" in out


def test_duality_first_order_passes(tmp_path, capsys):
    code, out, _ = run(capsys, "duality", "--scenario",
                       fixture("additive.cfg"), "--probes", "2",
                       "--out", str(tmp_path))
    assert code == 0
    assert "VERDICT experiment=duality1 status=pass" in out
    csv = (tmp_path / "duality-additive-s7" / "duality.csv").read_text()
    assert csv.startswith("# spde-control csv v1")
    assert csv.splitlines()[1] == "probe,lhs,rhs,gap,lhs_se,rhs_se"


def test_degenerate_rates_reports_undefined_slopes(tmp_path, capsys):
    code, out, _ = run(capsys, "rates", "--scenario", fixture("degenerate.cfg"),
                       "--eps-ladder", "2^-3,2^-4,2^-5",
                       "--out", str(tmp_path))
    assert code == 0
    assert "note=slope-undefined-statistic-identically-0" in out
    slopes = (tmp_path / "rates-degenerate-s3" / "slopes.csv").read_text()
    assert "undefined" in slopes


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--scenario", fixture("bilinear.cfg"),
                     "--sigma", "3")
    assert code == 2


def test_unknown_command_is_usage_error(capsys):
    assert run(capsys, "frobnicate")[0] == 2


def test_bad_config_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[grid]\nn = 8\ncolor = red\n[coefficients]\n"
                   "preset = additive\n[time]\nhorizon = 1\nsteps = 8\n")
    code, _, err = run(capsys, "simulate", "--scenario", str(cfg),
                       "--out", str(tmp_path))
    assert code == 2
    assert "config error" in err


def test_missing_scenario_file_is_config_error(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--scenario",
                     str(tmp_path / "none.cfg"), "--out", str(tmp_path))
    assert code == 2


def test_rates_requires_a_spike(tmp_path, capsys):
    code, _, err = run(capsys, "rates", "--scenario", fixture("bilinear.cfg"),
                       "--out", str(tmp_path))
    assert code == 2
    assert "spike" in err


def test_scenario_file_is_never_mutated(tmp_path, capsys):
    src = fixture("additive.cfg")
    before = open(src, "rb").read()
    run(capsys, "simulate", "--scenario", src, "--paths", "20",
        "--out", str(tmp_path))
    assert open(src, "rb").read() == before
