import json

import numpy as np
import pytest
import yaml

from sense import evaluation as E
from sense.cli import EFFECTIVE_CONFIG, env_overrides, load_config, main, UsageError
from sense.datagen import read_dataset
from sense.training import load_checkpoint

TINY_RUN = {
    "seed": 3,
    "data": {"n_stations": 4, "n_events": 10},
    "model": {"profile": "tiny", "head_kind": "discrete"},
    "train": {"epochs": [1, 0, 1], "draws_per_event": 1, "lr": 1e-3},
    "eval": {"cadence": 5.0, "grid": [0.3, 0.5, 0.7]},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump(TINY_RUN))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")], environ={}) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "ckpt")],
                environ={}) == 0
    return root, cfg


class TestConfig:
    def test_defaults_validate(self):
        cfg = load_config(environ={})
        assert cfg["train"]["lr"] == 1e-4 and cfg["eval"]["cadence"] == 0.5

    def test_env_parsing(self):
        over = env_overrides({"SENSE_TRAIN__LR": "1e-3", "SENSE_DATA__SPLIT": "[0.5, 0.25, 0.25]", "HOME": "/x"})
        assert over == {"train": {"lr": 1e-3}, "data": {"split": [0.5, 0.25, 0.25]}}

    def test_precedence(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("seed: 1\ntrain: {lr: 0.01}\n")
        cfg = load_config(f, environ={"SENSE_SEED": "2"}, flags={"seed": 5})
        assert cfg["seed"] == 5 and cfg["train"]["lr"] == 0.01
        assert load_config(f, environ={"SENSE_SEED": "2"})["seed"] == 2

    @pytest.mark.parametrize("env", [
        {"SENSE_TRAIN__LEARNING_RATE": "1"},
        {"SENSE_DATA__SPLIT": "[0.5, 0.5, 0.5]"},
        {"SENSE_EVAL__CADENCE": "0"},
        {"SENSE_SEED": "-1"},
        {"SENSE_MODEL__D_MODEL": "33"},
    ])
    def test_rejected(self, env):
        with pytest.raises(UsageError):
            load_config(environ=env)


class TestGenData:
    def test_summary_and_files(self, tmp_path, capsys):
        code = main(["gen-data", "--stations", "3", "--events", "5", "--seed", "9", "--out", str(tmp_path / "d")],
                    environ={})
        out = capsys.readouterr().out
        assert code == 0
        assert "events: 5" in out and "stations: 3" in out and "below" in out
        cat = read_dataset(tmp_path / "d")
        assert cat.n_stations == 3 and len(cat.events) == 5
        eff = yaml.safe_load((tmp_path / "d" / EFFECTIVE_CONFIG).read_text())
        assert eff["seed"] == 9 and eff["data"]["n_events"] == 5

    def test_env_override_reaches_output(self, tmp_path, capsys):
        assert main(["gen-data", "--stations", "2", "--out", str(tmp_path / "d")],
                    environ={"SENSE_DATA__N_EVENTS": "4"}) == 0
        assert "events: 4" in capsys.readouterr().out

    def test_non_empty_out_needs_force(self, tmp_path, capsys):
        d = tmp_path / "d"
        args = ["gen-data", "--stations", "2", "--events", "3", "--out", str(d)]
        assert main(args, environ={}) == 0
        assert main(args, environ={}) == 1
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"], environ={}) == 0

    def test_force_keeps_foreign_files(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        (d / "notes.txt").write_text("keep")
        assert main(["gen-data", "--stations", "2", "--events", "3", "--out", str(d), "--force"], environ={}) == 0
        assert (d / "notes.txt").read_text() == "keep"


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert main(["gen-data", "--bogus"], environ={}) == 1

    def test_missing_command(self):
        assert main([], environ={}) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        f = tmp_path / "c.yaml"
        f.write_text("trian: {lr: 1}\n")
        assert main(["gen-data", "--config", str(f), "--out", str(tmp_path / "o")], environ={}) == 1
        assert "trian" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)], environ={}) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")], environ={}) == 1

    def test_corrupt_dataset(self, tmp_path):
        d = tmp_path / "d"
        assert main(["gen-data", "--stations", "2", "--events", "3", "--out", str(d)], environ={}) == 0
        f = sorted((d / "events").glob("*.f32"))[0]
        f.write_bytes(f.read_bytes()[:10])
        assert main(["train", "--data", str(d), "--out", str(tmp_path / "o")], environ={}) == 2

    def test_bad_checkpoint(self, run, tmp_path):
        root, cfg = run
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        args = ["eval", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint", str(bad),
                "--out", str(tmp_path / "e")]
        assert main(args, environ={}) == 2


class TestTrainEvalStream:
    def test_checkpoints_and_log(self, run):
        root, _ = run
        ck = root / "ckpt"
        assert {p.name for p in ck.glob("*.ckpt")} == {"phase1.ckpt", "phase2.ckpt", "phase3.ckpt"}
        assert (ck / "metrics.csv").read_text().splitlines()[0] == "epoch,phase,loss,wall_seconds"
        assert load_checkpoint(ck / "phase3.ckpt").cursor == (3, 2)

    def test_eval_prints_one_row_per_level(self, run, tmp_path, capsys):
        root, cfg = run
        args = ["eval", "--config", str(cfg), "--data", str(root / "data"),
                "--checkpoint", str(root / "ckpt" / "phase3.ckpt"), "--out", str(tmp_path / "e")]
        assert main(args, environ={}) == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert rows[0].split(",") == list(E.EvalResult.CSV_HEADER)
        assert len(rows) == 1 + 5
        sweep = json.loads((tmp_path / "e" / "sweep.json").read_text())
        assert len(sweep["tau"]) == 5 and all(t in (0.3, 0.5, 0.7) for t in sweep["tau"])
        summary = json.loads((tmp_path / "e" / "summary.json").read_text())
        assert summary["split"] == "test" and summary["n_events"] == 3

    def test_eval_fixed_tau_skips_sweep(self, run, tmp_path, capsys):
        root, cfg = run
        args = ["eval", "--config", str(cfg), "--data", str(root / "data"), "--tau", "0.5", "--split", "val",
                "--checkpoint", str(root / "ckpt" / "phase3.ckpt"), "--out", str(tmp_path / "e")]
        assert main(args, environ={}) == 0
        assert not (tmp_path / "e" / "sweep.json").exists()
        assert json.loads((tmp_path / "e" / "summary.json").read_text())["n_events"] == 1

    def test_eval_config_mismatch(self, run, tmp_path, capsys):
        root, cfg = run
        args = ["eval", "--config", str(cfg), "--data", str(root / "data"), "--tau", "0.5",
                "--checkpoint", str(root / "ckpt" / "phase3.ckpt"), "--out", str(tmp_path / "e")]
        assert main(args, environ={"SENSE_MODEL__HEAD_KIND": "continuous"}) == 2
        assert "head_kind" in capsys.readouterr().err

    def test_stream_output_parses(self, run, tmp_path, capsys):
        root, cfg = run
        cat = read_dataset(root / "data")
        eid = cat.events[-1].event_id
        args = ["stream", "--config", str(cfg), "--data", str(root / "data"), "--event-id", str(eid),
                "--tau", "0.3", "--checkpoint", str(root / "ckpt" / "phase3.ckpt"), "--out", str(tmp_path / "s")]
        assert main(args, environ={}) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == E.STREAM_HEADER
        parsed = E.read_alarm_stream(lines)
        times = [a.t for a in parsed]
        assert times == sorted(times)
        assert all(a.t % 5.0 == 0 and a.prob > 0.3 for a in parsed)
        at = E.timeline_from_lines(parsed, 4, 5)
        # alarms are downward-closed per station
        fired = ~np.isnan(at)
        assert np.all(fired[:, :-1] >= fired[:, 1:])
        assert (tmp_path / "s" / f"alarms_{eid}.tsv").read_text().splitlines() == lines

    def test_stream_unknown_event(self, run, capsys):
        root, cfg = run
        args = ["stream", "--config", str(cfg), "--data", str(root / "data"), "--event-id", "999",
                "--checkpoint", str(root / "ckpt" / "phase3.ckpt")]
        assert main(args, environ={}) == 1

    def test_resume_reproduces(self, run, tmp_path):
        root, cfg = run
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "r"),
                     "--resume", str(root / "ckpt" / "phase1.ckpt")], environ={}) == 0
        assert (tmp_path / "r" / "phase3.ckpt").read_bytes() == (root / "ckpt" / "phase3.ckpt").read_bytes()

    def test_resume_seed_mismatch(self, run, tmp_path):
        root, cfg = run
        args = ["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "r"),
                "--resume", str(root / "ckpt" / "phase1.ckpt"), "--seed", "4"]
        assert main(args, environ={}) == 1
