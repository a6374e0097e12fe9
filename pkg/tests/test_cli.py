import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from maxglavit import tensor as T
from maxglavit.cli import main
from maxglavit.dataio import HDV1_COUNTS, write_ppm
from maxglavit.model import build, preset, save_checkpoint

from conftest import make_tree, uniform_counts


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "tiny.ckpt"
    save_checkpoint(build(preset("tiny-test"), seed=3), path)
    return path


# ---------------------------------------------------------------- describe

def test_describe_expect_params(capsys):
    code, out, _ = run(capsys, "describe", "--preset", "maxvit_scaled", "--expect-params", "5300000..7100000")
    assert code == 0
    assert out.splitlines()[-1].startswith("total parameters: 6214307 ")


def test_describe_out_of_range_exits_1(capsys):
    code, _, err = run(capsys, "describe", "--preset", "maxvit_scaled", "--expect-params", "1..10")
    assert code == 1 and "outside expected range" in err


def test_describe_maxglavit_rows(capsys):
    code, out, _ = run(capsys, "describe", "--preset", "maxglavit")
    assert code == 0
    kinds = [line.split()[1] for line in out.splitlines()[1:] if line.startswith(("stem", "stages"))]
    assert kinds.count("eca") == 2 and "convnextv2" in kinds


def test_describe_byte_stable(capsys):
    a = run(capsys, "describe", "--preset", "tiny-test")
    b = run(capsys, "describe", "--preset", "tiny-test")
    assert a == b


@pytest.mark.parametrize("argv", [["describe", "--preset", "maxvit_huge"], ["describe", "--expect-params", "9..1"],
                                  ["frobnicate"], [], ["train"], ["train", "--synthetic", "--data", "x"]])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and "usage:" in err


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "maxvit_scaled", "num_classes": 5}))
    code, out, _ = run(capsys, "describe", "--config", str(cfg))
    assert code == 0 and "gap+linear" in out and " 5  " in [l for l in out.splitlines() if "head" in l][0]


@pytest.mark.parametrize("content, code_want", [("{nope", 2), ('{"colour": 1}', 2), ('{"preset": "xl"}', 2),
                                                ('{"window_size": 5}', 1), ("[1]", 2)])
def test_config_file_errors(capsys, tmp_path, content, code_want):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    code, _, err = run(capsys, "describe", "--config", str(cfg))
    assert code == code_want and "error:" in err


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "describe", "--config", str(tmp_path / "none.json"))
    assert code == 2 and "cannot read config" in err


# ---------------------------------------------------------------- grad-check

def test_grad_check_default_passes_and_is_stable(capsys):
    code, out, _ = run(capsys, "grad-check")
    assert code == 0 and out.splitlines()[1].startswith("PASS")
    assert run(capsys, "grad-check") == (code, out, "")


def test_grad_check_corrupted_backward_names_op(capsys, monkeypatch):
    good = T.BACKWARD["gelu"]
    monkeypatch.setitem(T.BACKWARD, "gelu", lambda g, node: tuple(1.05 * v for v in good(g, node)))
    code, out, _ = run(capsys, "grad-check", "--samples", "20")
    assert code == 1
    assert "FAIL" in out and "worst " in out
    failing = [l for l in out.splitlines() if l.startswith("failing op")]
    assert len(failing) == 1 and failing[0].startswith("failing op gelu:")


# ---------------------------------------------------------------- train

def test_train_synthetic_writes_outputs(capsys, tmp_path):
    out_path = tmp_path / "run.ckpt"
    code, out, _ = run(capsys, "train", "--synthetic", "--epochs", "2", "--per-class", "1", "--batch-size", "3",
                       "--out", str(out_path))
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("epoch 1/2 lr=0.001 ")
    assert any(l.startswith("final epoch=2 ") for l in lines)
    assert out_path.exists() and (tmp_path / "run.ckpt.last").exists()
    hist = (tmp_path / "run.ckpt.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,lr,train_loss,train_acc,val_loss,val_acc" and len(hist) == 3


def test_train_byte_stable(capsys, tmp_path):
    argv = ["train", "--synthetic", "--epochs", "2", "--per-class", "1", "--seed", "5"]
    assert run(capsys, *argv) == run(capsys, *argv)


def test_train_resume_matches_uninterrupted(capsys, tmp_path):
    base = ["train", "--synthetic", "--per-class", "1", "--batch-size", "2"]
    full = tmp_path / "full.ckpt"
    run(capsys, *base, "--epochs", "3", "--out", str(full))
    part = tmp_path / "part.ckpt"
    run(capsys, *base, "--epochs", "2", "--out", str(part))
    code, _, _ = run(capsys, *base, "--epochs", "3", "--out", str(tmp_path / "res.ckpt"), "--resume",
                     str(part) + ".last")
    assert code == 0
    assert (tmp_path / "res.ckpt.history.csv").read_text() == (tmp_path / "full.ckpt.history.csv").read_text()


def test_train_missing_data_dir_exits_1(capsys, tmp_path):
    missing = tmp_path / "nodata"
    code, _, err = run(capsys, "train", "--data", str(missing), "--epochs", "1")
    assert code == 1 and str(missing) in err


def test_train_on_directory_tree(capsys, tmp_path):
    root = make_tree(tmp_path / "data", uniform_counts(1), size=8)
    code, out, _ = run(capsys, "train", "--data", str(root), "--epochs", "1", "-q")
    assert code == 0 and out.startswith("final epoch=1 ")


def test_train_bad_hyperparameter_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "--synthetic", "--lr", "-1")
    assert code == 2 and "learning_rate" in err


# ---------------------------------------------------------------- eval

def _pred_csv(tmp_path, rows, header=True):
    path = tmp_path / "pred.csv"
    lines = (["true,pred"] if header else []) + [f"{a},{b}" for a, b in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_eval_perfect(capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--pred", str(_pred_csv(tmp_path, [(0, 0), (1, 1), (2, 2), (2, 2)])))
    assert code == 0
    assert out.splitlines()[1].split() == ["100.00"] * 5


def test_eval_hand_fixture(capsys, tmp_path):
    path = _pred_csv(tmp_path, [(0, 0), (0, 1), (1, 1), (1, 1)], header=False)
    code, out, _ = run(capsys, "eval", "--pred", str(path), "--num-classes", "2")
    assert code == 0
    acc, _, _, _, kappa = out.splitlines()[1].split()
    assert (acc, kappa) == ("75.00", "50.00")
    assert "Cohen's kappa,50.00" in out


def test_eval_class_names_and_csv_file(capsys, tmp_path):
    path = _pred_csv(tmp_path, [("advanced", "advanced"), ("normal", "early"), ("early", "early")])
    target = tmp_path / "rep.csv"
    code, out, _ = run(capsys, "eval", "--pred", str(path), "--csv", str(target))
    assert code == 0 and "class,precision" not in out
    rows = list(csv.reader(io.StringIO(target.read_text())))
    assert rows[0] == ["class", "precision", "recall", "f1", "support"]


def test_eval_unpredicted_class_warns_on_stderr(capsys, tmp_path):
    code, out, err = run(capsys, "eval", "--pred", str(_pred_csv(tmp_path, [(0, 0), (1, 0), (2, 2)])))
    assert code == 0
    assert err.startswith("warning: precision: zero denominator for classes [1]")
    assert "early,0.00,0.00,0.00,1" in out


@pytest.mark.parametrize("rows", [[(0, 1), (2,)], [(0, 5)], [(0, "x")]])
def test_eval_bad_csv_exits_1(capsys, tmp_path, rows):
    path = tmp_path / "p.csv"
    path.write_text("\n".join(",".join(map(str, r)) for r in rows) + "\n")
    code, _, err = run(capsys, "eval", "--pred", str(path))
    assert code == 1 and "error:" in err


def test_eval_empty_csv_exits_1(capsys, tmp_path):
    path = _pred_csv(tmp_path, [])
    code, _, err = run(capsys, "eval", "--pred", str(path))
    assert code == 1 and "empty" in err


def test_eval_needs_source(capsys):
    code, _, _ = run(capsys, "eval")
    assert code == 2


def test_eval_checkpoint_on_tree(capsys, tmp_path, ckpt):
    root = make_tree(tmp_path / "data", uniform_counts(2), size=8)
    code, out, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(root), "--split", "validation")
    assert code == 0
    assert [int(l.split()[-1]) for l in out.splitlines()[4:7]] == [2, 2, 2]


def test_eval_corrupt_checkpoint_exits_1(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 10)
    root = make_tree(tmp_path / "data", uniform_counts(1))
    code, _, err = run(capsys, "eval", "--ckpt", str(bad), "--data", str(root))
    assert code == 1 and "bad magic" in err


# ---------------------------------------------------------------- predict

def test_predict_outputs(capsys, tmp_path, ckpt):
    img = tmp_path / "a.ppm"
    write_ppm(img, np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8))
    code, out, _ = run(capsys, "predict", "--ckpt", str(ckpt), "--image", str(img), str(img))
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["path", "label", "p_advanced", "p_early", "p_normal"]
    assert rows[1] == rows[2]
    probs = [float(v) for v in rows[1][2:]]
    assert abs(sum(probs) - 1) <= 1e-6
    assert rows[1][1] == ("advanced", "early", "normal")[int(np.argmax(probs))]


def test_predict_partial_failure(capsys, tmp_path, ckpt):
    good = tmp_path / "g.ppm"
    write_ppm(good, np.zeros((64, 64, 3), np.uint8))
    bad = tmp_path / "b.png"
    bad.write_bytes(b"nope")
    code, out, err = run(capsys, "predict", "--ckpt", str(ckpt), "--image", str(bad), str(good))
    assert code == 1
    assert len(out.splitlines()) == 2 and out.splitlines()[1].startswith(str(good))
    assert "b.png" in err and "1 of 2 images failed" in err


def test_predict_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "predict", "--ckpt", str(tmp_path / "none.ckpt"), "--image", "x.png")
    assert code == 1 and "none.ckpt" in err


# ---------------------------------------------------------------- verify-data

def test_verify_data_hdv1(capsys, tmp_path):
    root = make_tree(tmp_path, HDV1_COUNTS, size=1)
    code, out, _ = run(capsys, "verify-data", "--data", str(root), "--expect-hdv1")
    assert code == 0
    assert "Total" in out and out.splitlines()[-2].split()[-1] == "1542"
    assert out.splitlines()[-1] == "HDV1 counts match"


def test_verify_data_off_by_one(capsys, tmp_path):
    counts = {s: dict(v) for s, v in HDV1_COUNTS.items()}
    counts["test"]["early"] -= 1
    root = make_tree(tmp_path, counts, size=1)
    code, _, err = run(capsys, "verify-data", "--data", str(root), "--expect-hdv1")
    assert code == 1 and "test/early: expected 87, found 86" in err


def test_verify_data_missing_split(capsys, tmp_path):
    counts = uniform_counts(1)
    del counts["validation"]
    code, _, err = run(capsys, "verify-data", "--data", str(make_tree(tmp_path, counts)))
    assert code == 1 and "validation" in err


def test_verify_data_json(capsys, tmp_path):
    root = make_tree(tmp_path, uniform_counts(1))
    code, out, _ = run(capsys, "verify-data", "--data", str(root), "--json")
    assert code == 0 and json.loads(out)["counts"]["train"] == {"advanced": 1, "early": 1, "normal": 1}


# ---------------------------------------------------------------- entry points

def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "maxglavit", "describe", "--preset", "tiny-test"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "total parameters:" in res.stdout
    res = subprocess.run([sys.executable, "-m", "maxglavit", "--bogus"], capture_output=True, text=True,
                         check=False)
    assert res.returncode == 2
