import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from stmg.cli import cli

MICRO_CONFIG = {
    "dataset": {"num_frames": 10, "height": 32, "width": 32, "num_objects": 2, "speed": 1.5},
    "training": {"steps": 20, "batch_size": 2},
    "eval": {"num_frames": 6},
}


@pytest.fixture()
def runner():
    return CliRunner()


def write_config(tmp_path, data=None):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data or MICRO_CONFIG))
    return path


class TestSimulateCommand:
    def test_hand_trace_output(self, runner, tmp_path):
        trace = tmp_path / "trace.txt"
        trace.write_text("0.2\n0.2\n0.5\n0.4\n")
        result = runner.invoke(cli, ["simulate", "--trace", str(trace)])
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        parsed = [(int(a), b, float(c)) for a, b, c in (l.split() for l in lines)]
        assert [p[1] for p in parsed] == ["nonkey", "nonkey", "key", "nonkey"]
        assert [p[2] for p in parsed] == pytest.approx([0.2, 0.19, 1.0, 0.38])

    def test_json_output(self, runner, tmp_path):
        trace = tmp_path / "trace.txt"
        trace.write_text("0.1 0.2 0.3")
        out = tmp_path / "trace.json"
        result = runner.invoke(cli, ["simulate", "--trace", str(trace), "--out", str(out)])
        assert result.exit_code == 0
        data = json.loads(out.read_text())
        assert len(data) == 3 and data[0]["role"] == "nonkey"

    def test_bad_trace_exits_2(self, runner, tmp_path):
        trace = tmp_path / "trace.txt"
        trace.write_text("0.1\nbanana\n")
        result = runner.invoke(cli, ["simulate", "--trace", str(trace)], standalone_mode=False)
        assert result.exception is not None


class TestGendataCommand:
    def test_generates_and_is_deterministic(self, runner, tmp_path):
        for name in ("a", "b"):
            result = runner.invoke(
                cli,
                ["gendata", "--out", str(tmp_path / name), "--seed", "3", "--frames", "4"],
            )
            assert result.exit_code == 0, result.output
        a = (tmp_path / "a" / "labels.npy").read_bytes()
        b = (tmp_path / "b" / "labels.npy").read_bytes()
        assert a == b

    def test_invalid_config_exits_nonzero(self, runner, tmp_path):
        bad = write_config(tmp_path, {"dataset": {"height": -4}})
        result = runner.invoke(cli, ["gendata", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert result.exit_code != 0


class TestTrainEvalPlot:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("cli_train")
        runner = CliRunner()
        cfg = write_config(tmp)
        result = runner.invoke(cli, ["train", "--config", str(cfg), "--out", str(tmp / "run")])
        assert result.exit_code == 0, result.output
        return tmp / "run"

    def test_train_wrote_outputs(self, run_dir):
        assert (run_dir / "checkpoint.pt").exists()
        assert (run_dir / "metrics.jsonl").exists()
        assert (run_dir / "config.json").exists()

    def test_eval_policies_and_plot(self, runner, run_dir, tmp_path):
        ckpt = str(run_dir / "checkpoint.pt")
        eval_dirs = []
        for policy in ("full", "da"):
            out = tmp_path / f"eval_{policy}"
            result = runner.invoke(
                cli, ["eval", "--checkpoint", ckpt, "--policy", policy, "--out", str(out)]
            )
            assert result.exit_code == 0, result.output
            summary = json.loads((out / "summary.json").read_text())
            assert 0.0 <= summary["miou"] <= 1.0
            eval_dirs.append(str(out))
        result = runner.invoke(
            cli, ["plot", *eval_dirs, "--out", str(tmp_path / "figs")]
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "figs" / "tradeoff.png").exists()

    def test_eval_agg_modes(self, runner, run_dir, tmp_path):
        ckpt = str(run_dir / "checkpoint.pt")
        for agg in ("stmg", "fixed:0.8", "uniform", "random"):
            out = tmp_path / f"eval_{agg.replace(':', '_')}"
            result = runner.invoke(
                cli,
                ["eval", "--checkpoint", ckpt, "--agg", agg, "--out", str(out), "--no-dump-masks"],
            )
            assert result.exit_code == 0, result.output

    def test_eval_dbb_bias_flag(self, runner, run_dir, tmp_path):
        ckpt = str(run_dir / "checkpoint.pt")
        result = runner.invoke(
            cli,
            ["eval", "--checkpoint", ckpt, "--dbb-bias", "on", "--out", str(tmp_path / "dbb"),
             "--no-dump-masks"],
        )
        assert result.exit_code == 0, result.output
        summary = json.loads((tmp_path / "dbb" / "summary.json").read_text())
        assert summary["dbb_bias"] is True

    def test_eval_matching_config_ok_and_mismatch_rejected(self, runner, run_dir, tmp_path):
        ckpt = str(run_dir / "checkpoint.pt")
        good = tmp_path / "good.json"
        good.write_text((run_dir / "config.json").read_text())
        result = runner.invoke(
            cli, ["eval", "--checkpoint", ckpt, "--config", str(good),
                  "--out", str(tmp_path / "ok"), "--no-dump-masks"]
        )
        assert result.exit_code == 0, result.output
        bad = write_config(tmp_path, {**MICRO_CONFIG, "seed": 777})
        result = runner.invoke(
            cli, ["eval", "--checkpoint", ckpt, "--config", str(bad), "--out", str(tmp_path / "no")]
        )
        assert result.exit_code != 0


class TestExitCodes:
    def test_main_maps_validation_to_2(self, tmp_path, monkeypatch, capsys):
        import sys
        from stmg.cli import main

        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dataset": {"height": -1}}))
        monkeypatch.setattr(sys, "argv", ["stmg", "train", "--config", str(bad)])
        with pytest.raises(SystemExit) as exc:
            main()
        assert exc.value.code == 2

    def test_main_maps_missing_checkpoint_to_2(self, tmp_path, monkeypatch):
        import sys
        from stmg.cli import main

        monkeypatch.setattr(sys, "argv", ["stmg", "eval", "--checkpoint", str(tmp_path / "no.pt")])
        with pytest.raises(SystemExit) as exc:
            main()
        assert exc.value.code == 2

    def test_help_exits_zero(self, monkeypatch, capsys):
        import sys
        from stmg.cli import main

        monkeypatch.setattr(sys, "argv", ["stmg", "--help"])
        try:
            main()
        except SystemExit as exc:
            assert exc.code in (0, None)
        assert "Commands" in capsys.readouterr().out
