import json

import numpy as np
import pytest

from fluorosynth import cli
from fluorosynth import workflow as wf
from fluorosynth.projector import read_pgm, write_pgm

MINI = {
    "phantom": {"cases": 3, "frames_per_case": 2},
    "datapipe": {"test_cases": 1},
    "model": {"generator_divisor": 16, "residual_blocks": 1, "discriminator_divisor": 16, "extractor_divisor": 16,
              "unet_base_channels": 2, "unet_depth": 2},
    "train": {"epochs": 1, "lr_drop_epoch": 1, "checkpoint_every": 1},
    "eval": {"kid_block_size": 2, "kid_blocks": 2},
}


def write_config(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"bogus": 1})
    assert cli.run(["phantom", "--config", str(cfg), "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG
    err = last_error(capsys)
    assert err["exit"] == 2 and "bogus" in err["message"]


def test_bad_value_type_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, {"train": {"epochs": "many"}})
    assert cli.run(["phantom", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "train.epochs" in last_error(capsys)["message"]


def test_missing_config_file_is_io_error(tmp_path, capsys):
    assert cli.run(["phantom", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "r")]) == cli.EXIT_IO
    assert last_error(capsys)["error"] == "io"


def test_missing_upstream_stage_is_io_error(tmp_path, capsys):
    assert cli.run(["project", "--toy", "--out", str(tmp_path / "r")]) == cli.EXIT_IO


def test_bad_thread_env_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FLUOROSYNTH_THREADS", "lots")
    assert cli.run(["phantom", "--toy", "--out", str(tmp_path / "r")]) == 2


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.run(["no-such-command"])
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp, MINI)
    run = tmp / "run"
    base = ["--toy", "--config", str(cfg), "--out", str(run), "--seed", "3"]
    codes = {}
    for stage in ("phantom", "project", "simulate-fpd", "make-dataset", "train"):
        codes[stage] = cli.run([stage, *base])
    codes["train-unet"] = cli.run(["train", "--baseline", "unet", *base])
    codes["evaluate"] = cli.run(["evaluate", "--baseline", "unet", *base])
    codes["report"] = cli.run(["report", "--baseline", "unet", *base])
    return run, base, codes


def test_chain_exit_codes(mini_run):
    _, _, codes = mini_run
    assert codes == {k: 0 for k in codes}


def test_effective_config_and_run_log(mini_run):
    run, _, _ = mini_run
    eff = json.loads((run / wf.PHANTOMS / "effective-config.json").read_text())
    assert eff["seed"] == 3 and eff["toy"] is True and eff["phantom"]["cases"] == 3
    assert eff["model"]["generator_divisor"] == 16
    assert (run / wf.UNET / "effective-config.json").exists()
    log = (run / "run.log").read_text()
    for stage in ("phantom", "project", "make-dataset", "train", "evaluate", "report"):
        assert f"{stage}: seed=3" in log and f"{stage} finished" in log


def test_report_artifacts(mini_run):
    run, _, _ = mini_run
    report = json.loads((run / wf.EVAL / "report.json").read_text())
    assert set(report["columns"]) == {"drr", "ours", "unet"}
    assert (run / wf.REPORT).is_dir() and any((run / wf.REPORT).iterdir())


def test_evaluate_prints_metric_lines(mini_run, capsys):
    _, base, _ = mini_run
    assert cli.run(["evaluate", *base]) == 0
    out = capsys.readouterr().out
    assert "drr:" in out and "ours:" in out and "KID" in out


def test_infer_writes_output_and_reports_times(mini_run, tmp_path, capsys):
    run, base, _ = mini_run
    src = tmp_path / "in.pgm"
    write_pgm(src, np.random.default_rng(0).random((64, 64)).astype(np.float32))
    dest = tmp_path / "out.pgm"
    assert cli.run(["infer", str(src), "-o", str(dest), "--repeat", "3", *base]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("model load:") and "load excluded" in lines[1] and "3 runs" in lines[1]
    assert read_pgm(dest).shape == (64, 64)
    assert '"repeats": 3' in (run / "run.log").read_text()


def test_infer_missing_model_is_io_error(tmp_path, capsys):
    src = tmp_path / "in.pgm"
    write_pgm(src, np.zeros((64, 64), np.float32))
    assert cli.run(["infer", str(src), "--toy", "--out", str(tmp_path / "empty")]) == cli.EXIT_IO
