import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rccmnet.cli import main
from rccmnet.metrics import MetricsReport
from rccmnet.synthdata import read_pgm

SUBCOMMANDS = ("generate-data", "train", "evaluate", "predict", "ablate", "report")
SMALL_DATA = ["--height", "32", "--width", "48", "--spacing", "0.25", "--area-range", "3,8"]
CONFIG = """
epochs = 2
batch_size = 4
lr = 0.003
seed = 0

[model]
depth = 3
base_channels = 4
input_shape = [1, 32, 48]
"""


def result_of(capsys, with_err=False):
    captured = capsys.readouterr()
    out = captured.out.strip().splitlines()
    assert out[-1].startswith("RESULT ")
    res = json.loads(out[-1][len("RESULT ") :])
    return (res, out, captured.err) if with_err else (res, out)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset plus a trained run shared by the slower CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--out", str(root / "d"), "--counts", "3,6,3", "--seed", "1", *SMALL_DATA]) == 0
    (root / "c.toml").write_text(CONFIG)
    assert main(["train", "--data", str(root / "d"), "--config", str(root / "c.toml"), "--out", str(root / "r1")]) == 0
    return root


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help(sub, capsys):
    with pytest.raises(SystemExit) as info:
        main([sub, "--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["generate-data", "--out", "x", "--bogus"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["generate-data", "--out", "x", "--counts", "1,2"])
    assert info.value.code == 2


def test_generate_data(tmp_path, capsys):
    assert main(["generate-data", "--out", str(tmp_path), "--counts", "3,6,3", "--seed", "1", *SMALL_DATA]) == 0
    res, _ = result_of(capsys)
    assert res["n_samples"] == 12 and res["exit_code"] == 0
    assert len(list((tmp_path / "images").glob("*.pgm"))) == 12
    assert len(list((tmp_path / "masks").glob("*.pgm"))) == 12
    assert len((tmp_path / "manifest.csv").read_text().splitlines()) == 13
    assert all(os.path.exists(p) for p in res["artifacts"])


def test_generate_data_idempotent(tmp_path, capsys):
    for name in ("a", "b"):
        main(["generate-data", "--out", str(tmp_path / name), "--counts", "1,1,1", "--seed", "4", *SMALL_DATA])
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_domain_error_exit_1(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 1
    res, _, err = result_of(capsys, with_err=True)
    assert res["exit_code"] == 1
    assert err.startswith("error:") and "missing" in err


def test_shape_mismatch_is_domain_error(workspace, tmp_path, capsys):
    # default config expects 96x144 images
    assert main(["train", "--data", str(workspace / "d"), "--out", str(tmp_path / "r")]) == 1
    res, _ = result_of(capsys)
    assert "input_shape" in res["summary"]


def test_train_then_evaluate(workspace, capsys):
    run = workspace / "r1"
    for name in ("split.json", "config.echo.json", "record.jsonl", "ckpt_final", "report.json"):
        assert (run / name).exists()
    assert main(["evaluate", "--run", str(run), "--split", "test"]) == 0
    res, _ = result_of(capsys)
    report = json.loads((run / "eval_test" / "report.json").read_text())
    expected_keys = {f for f in MetricsReport.__dataclass_fields__}
    assert set(report) == expected_keys
    assert set(report["aggregate"]) == {"dsc", "assd_mm", "hd_mm", "d_pa_mm2"}
    assert report["n_samples"] == res["n_samples"] == 2
    assert (run / "eval_test" / "per_sample.csv").exists()


def test_evaluate_twice_identical(workspace, tmp_path, capsys):
    for name in ("a", "b"):
        main(["evaluate", "--run", str(workspace / "r1"), "--split", "val", "--out", str(tmp_path / name)])
    for f in ("report.json", "per_sample.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_deterministic(workspace, tmp_path, capsys):
    args = ["train", "--data", str(workspace / "d"), "--config", str(workspace / "c.toml"), "--out"]
    assert main([*args, str(tmp_path / "r2")]) == 0
    for name in ("ckpt_final", "report.json", "record.jsonl", "config.echo.json"):
        assert (tmp_path / "r2" / name).read_bytes() == (workspace / "r1" / name).read_bytes()


def test_predict(workspace, capsys):
    image = sorted((workspace / "d" / "images").glob("*.pgm"))[0]
    outputs = []
    for _ in range(2):
        assert main(["predict", "--run", str(workspace / "r1"), "--image", str(image)]) == 0
        res, lines = result_of(capsys)
        line = [ln for ln in lines if ln.startswith("class=")][0]
        probs = [float(v) for v in line.split("probs=")[1].split(",")]
        assert abs(sum(probs) - 1) <= 1e-5 and len(probs) == 3
        assert line.split()[0][len("class=") :] in ("hyperechoic", "hypoechoic", "mixed")
        mask_path = f"{image}.mask.pgm"
        mask = read_pgm(mask_path)
        assert mask.shape == read_pgm(image).shape
        assert set(np.unique(mask)) <= {0, 255}
        outputs.append((line, open(mask_path, "rb").read(), res["predictions"]))
    assert outputs[0] == outputs[1]
    assert abs(sum(outputs[0][2][0]["probs"]) - 1) <= 1e-6


def test_predict_wrong_size(workspace, tmp_path, capsys):
    from rccmnet.synthdata import write_pgm

    write_pgm(tmp_path / "big.pgm", np.zeros((96, 144), np.uint8))
    assert main(["predict", "--run", str(workspace / "r1"), "--image", str(tmp_path / "big.pgm")]) == 1


def test_report_plots(workspace, tmp_path, capsys):
    assert main(["report", "--report", str(workspace / "r1" / "report.json"), "--plots", "--out", str(tmp_path)]) == 0
    res, lines = result_of(capsys)
    assert (tmp_path / "correlation.png").stat().st_size > 0
    assert (tmp_path / "bland_altman.png").stat().st_size > 0
    assert any("confusion matrix" in ln for ln in lines)


def test_ablate(workspace, tmp_path, capsys):
    out = tmp_path / "tbl.csv"
    args = ["ablate", "--data", str(workspace / "d"), "--config", str(workspace / "c.toml"), "--epochs", "1"]
    assert main([*args, "--seeds", "1", "--out", str(out)]) == 0
    res, _ = result_of(capsys)
    lines = out.read_text().splitlines()
    assert len(lines) == 5
    assert all(len(ln.split(",")) == 9 for ln in lines)
    assert res["n_runs"] == 4 and set(res["flags"]) == {"full_best_dsc", "full_best_acc"}
    assert json.loads(out.with_suffix(".json").read_text())["flags"] == res["flags"]


def test_module_entry_point_and_threads(tmp_path):
    env = dict(os.environ, RCCM_THREADS="1")
    code = "import torch, sys; from rccmnet.cli import main; rc = main(sys.argv[1:]); print('threads', torch.get_num_threads()); sys.exit(rc)"
    proc = subprocess.run(
        [sys.executable, "-c", code, "generate-data", "--out", str(tmp_path), "--counts", "1,0,0", *SMALL_DATA],
        capture_output=True,
        text=True,
        env=env,
    )
    assert proc.returncode == 0, proc.stderr
    assert "threads 1" in proc.stdout
