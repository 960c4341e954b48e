import csv
import json
import os
import subprocess
import sys

import pytest

from ibkit import cli


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    path = tmp_path_factory.mktemp("runs")
    old = os.environ.get(cli.OUTPUT_ROOT_ENV)
    os.environ[cli.OUTPUT_ROOT_ENV] = str(path)
    yield path
    if old is None:
        del os.environ[cli.OUTPUT_ROOT_ENV]
    else:
        os.environ[cli.OUTPUT_ROOT_ENV] = old


@pytest.fixture(scope="module")
def trained(root):
    code = cli.run(["train", "--epochs", "40", "--n-snapshots", "15", "--widths", "12,8,6,4,2"])
    assert code == cli.EXIT_OK
    return root / "train"


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestUsage:
    def test_help(self, capsys):
        assert cli.run(["--help"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        for name in cli.COMMANDS:
            assert name in out

    def test_subcommand_help(self, capsys):
        assert cli.run(["ntk", "--help"]) == cli.EXIT_OK
        assert "--sigma-w2" in capsys.readouterr().out

    def test_usage_errors(self, root):
        assert cli.run([]) == cli.EXIT_USAGE
        assert cli.run(["nonsense"]) == cli.EXIT_USAGE
        assert cli.run(["synth", "--no-such-flag", "1"]) == cli.EXIT_USAGE

    def test_bad_values(self, root):
        assert cli.run(["synth", "--seed", "abc"]) == cli.EXIT_BAD_VALUE
        assert cli.run(["synth", "--task", "mnist"]) == cli.EXIT_BAD_VALUE
        assert cli.run(["genbound", "--i-xt", "3", "--delta", "2"]) == cli.EXIT_BAD_VALUE
        assert cli.run(["synth", "--threads", "0"]) == cli.EXIT_BAD_VALUE

    def test_missing_inputs(self, root):
        assert cli.run(["infoplane", "--run", "does/not/exist"]) == cli.EXIT_MISSING_INPUT
        assert cli.run(["ib-curve", "--joint", "nope.csv"]) == cli.EXIT_MISSING_INPUT
        assert cli.run(["genbound"]) == cli.EXIT_MISSING_INPUT
        assert cli.run(["synth", "--config", "missing.cfg"]) == cli.EXIT_MISSING_INPUT

    def test_unknown_config_key(self, root, tmp_path):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("seed = 1\nbogus = 2\n")
        assert cli.run(["synth", "--config", str(cfg)]) == cli.EXIT_BAD_VALUE

    def test_module_entry_point(self, root):
        res = subprocess.run([sys.executable, "-m", "ibkit", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "synth" in res.stdout


class TestSynth:
    def test_symmetric(self, root):
        assert cli.run(["synth", "--out", "syn"]) == cli.EXIT_OK
        man = _manifest(root / "syn")
        assert man["subcommand"] == "synth"
        assert set(man["outputs"]) == {"rule.csv", "joint.csv"}
        assert 0.98 <= man["summary"]["i_xy_bits"] <= 1.0
        assert len(_rows(root / "syn" / "rule.csv")) == 4097

    def test_gaussian(self, root):
        assert cli.run(["synth", "--task", "gaussian", "--dim-x", "5", "--out", "gsyn"]) == cli.EXIT_OK
        task = json.loads((root / "gsyn" / "task.json").read_text())
        assert task["dim_x"] == 5

    def test_config_and_flag_override(self, root, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("# comment\ntask = gaussian\ndim_x = 4\n")
        assert cli.run(["synth", "--config", str(cfg), "--dim-x", "6", "--out", "ov"]) == cli.EXIT_OK
        assert _manifest(root / "ov")["config"]["dim_x"] == 6

    def test_rerun_from_manifest_is_identical(self, root):
        assert cli.run(["synth", "--seed", "3", "--out", "a"]) == cli.EXIT_OK
        man = str(root / "a" / "manifest.json")
        assert cli.run(["synth", "--config", man, "--out", "b"]) == cli.EXIT_OK
        assert (root / "a" / "rule.csv").read_bytes() == (root / "b" / "rule.csv").read_bytes()

    def test_manifest_for_other_command_rejected(self, root):
        assert cli.run(["synth", "--out", "m"]) == cli.EXIT_OK
        assert cli.run(["ntk", "--config", str(root / "m" / "manifest.json")]) == cli.EXIT_BAD_VALUE


class TestPipeline:
    def test_train_outputs(self, trained):
        man = _manifest(trained)
        assert man["config"]["widths"] == [12, 8, 6, 4, 2]
        assert (trained / "run" / "snapshots").is_dir()
        assert (trained / "run" / "rule.csv").exists()

    def test_infoplane(self, root, trained):
        assert cli.run(["infoplane", "--run", "train", "--out", "ip"]) == cli.EXIT_OK
        rows = _rows(root / "ip" / "trajectory.csv")
        assert rows[0] == ["iteration", "layer", "i_xt_bits", "i_ty_bits"]
        report = json.loads((root / "ip" / "phase_report.json").read_text())
        assert report["dpi_ok"] and report["dpi_max_violation"] < 1e-9
        assert report["notes"]

    def test_beta_star(self, root, trained):
        assert cli.run(["beta-star", "--run", "train", "--layers", "3,4", "--beta-ratio", "2",
                        "--out", "bs"]) == cli.EXIT_OK
        assert len(_rows(root / "bs" / "beta_star.csv")) == 3
        assert cli.run(["beta-star", "--run", "train", "--iteration", "7",
                        "--out", "bs2"]) == cli.EXIT_BAD_VALUE

    def test_diffusion(self, root, trained):
        from ibkit.netlab import TrainRun
        its = TrainRun.load(trained / "run").snapshot_iterations
        assert cli.run(["diffusion", "--run", "train", "--transition", str(its[5]),
                        "--out", "df"]) == cli.EXIT_OK
        rows = _rows(root / "df" / "bound.csv")
        assert rows[0][:3] == ["layer", "tau", "bound_bits"]
        assert (root / "df" / "noise_sensitivity.csv").exists()

    def test_genbound_from_trajectory(self, root, trained):
        if not (root / "ip").exists():
            assert cli.run(["infoplane", "--run", "train", "--out", "ip"]) == cli.EXIT_OK
        assert cli.run(["genbound", "--trajectory", "ip", "--extra-bits", "1", "--out", "gb"]) == cli.EXIT_OK
        assert len(_rows(root / "gb" / "genbound.csv")) > 1

    def test_report_merges(self, root, trained):
        for d in ("r1", "r2"):
            assert cli.run(["genbound", "--i-xt", "3", "--out", d]) == cli.EXIT_OK
        assert cli.run(["report", "--inputs", "r1,r2", "--out", "rep"]) == cli.EXIT_OK
        rows = _rows(root / "rep" / "genbound.csv")
        assert rows[0][0] == "source"
        assert {r[0] for r in rows[1:]} == {"r1", "r2"}


class TestAnalysis:
    def test_ib_curve_idempotent(self, root):
        args = ["ib-curve", "--beta-ratio", "1.5", "--restarts", "1"]
        assert cli.run(args + ["--out", "c1"]) == cli.EXIT_OK
        assert cli.run(args + ["--out", "c2"]) == cli.EXIT_OK
        assert (root / "c1" / "curve.csv").read_bytes() == (root / "c2" / "curve.csv").read_bytes()

    def test_ntk_small_grid(self, root):
        args = ["ntk", "--n-train", "30", "--n-eval", "20", "--batch", "10", "--n-taus", "4",
                "--sigma-w2", "1,2", "--depth", "2", "--ref-bins", "10"]
        assert cli.run(args + ["--out", "n1"]) == cli.EXIT_OK
        rows = _rows(root / "n1" / "ntk.csv")
        assert len(rows) == 1 + 2 * 2 * 4
        assert (root / "n1" / "ib_reference.csv").exists()
        assert cli.run(args + ["--threads", "2", "--out", "n2"]) == cli.EXIT_OK
        assert (root / "n1" / "ntk.csv").read_bytes() == (root / "n2" / "ntk.csv").read_bytes()

    def test_genbound_values(self, root):
        assert cli.run(["genbound", "--i-xt", "10", "--m", "1024", "--out", "g"]) == cli.EXIT_OK
        row = _rows(root / "g" / "genbound.csv")
        header, vals = row[0], row[1]
        eps = float(vals[header.index("eps")])
        assert eps == pytest.approx(0.7089418859840217, rel=1e-12)

    def test_demo_config(self, root):
        assert cli.run(["genbound", "--config", "demo", "--i-xt", "2", "--trajectory", "",
                        "--out", "gd"]) == cli.EXIT_OK
