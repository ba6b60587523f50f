import hashlib
import json

import numpy as np
import pytest

from spfnet import io as sio
from spfnet.cli import _order, build_parser, main, train_config


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_is_deterministic(tmp_path, capsys):
    args = ["synth", "--count", "3", "--val-count", "1", "--size", "32", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert len((tmp_path / "a" / "train.txt").read_text().splitlines()) == 2
    assert sorted(p.name for p in (tmp_path / "a" / "scenes").iterdir()) == ["00000", "00001", "00002"]


def test_infer_fresh_model_is_bicubic(tmp_path, capsys):
    main(["synth", "--count", "1", "--size", "32", "--out", str(tmp_path / "s")])
    capsys.readouterr()
    rc = main(["infer", "--input", str(tmp_path / "s" / "scenes" / "00000"), "--out", str(tmp_path / "o"),
               "--variant", "spfnet-t", "--stages", "1"])
    assert rc == 0
    res = json.loads(capsys.readouterr().out)
    assert res["max_abs_vs_bicubic"] == 0.0
    assert sio.load_pfm(tmp_path / "o" / "depth_hr.pfm").shape == (1, 32, 32)


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2


def test_validation_failure_prints_one_line(tmp_path, capsys):
    rc = main(["infer", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error kind=")


def test_bad_config_value_exits_one(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"crop": 30}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "r")]) == 1
    assert "crop" in capsys.readouterr().err


def test_config_layering(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 3, "lr": 0.01}))
    args = build_parser().parse_args(["train", "--config", str(tmp_path / "c.json"), "--lr", "0.5"])
    cfg = train_config(args)
    assert cfg.epochs == 3 and cfg.lr == 0.5


@pytest.mark.parametrize("text", ["nsr", "n,s,r", "n+s+r", "N,S,R"])
def test_order_spellings(text):
    assert _order(text) == ("n", "s", "r")


def test_train_then_eval(tmp_path, capsys):
    budget = ["--epochs", "1", "--n-train", "4", "--n-val", "2", "--batch-size", "2", "--crop", "16",
              "--scene-size", "32", "--variant", "spfnet-t", "--channels", "4", "--stages", "1", "--deterministic"]
    assert main(["train", *budget, "--out", str(tmp_path / "r")]) == 0
    trained = json.loads(capsys.readouterr().out)
    assert (tmp_path / "r" / "train_log.csv").read_text().startswith("epoch,train_l1,val_rmse_cm")
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.spft")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 2 and res["mean_rmse_cm"] == trained["val_rmse_cm"]


def test_inspect_kernels_outputs(tmp_path, capsys):
    rc = main(["inspect-kernels", "--variant", "spfnet-t", "--stages", "1", "--n-scenes", "2",
               "--out", str(tmp_path / "k")])
    assert rc == 0
    assert "pass_fraction" in json.loads(capsys.readouterr().out)
    fields = sio.load_container(tmp_path / "k" / "kernel_fields.spft")
    assert set(fields) == {"n", "s", "r"}
    hist = (tmp_path / "k" / "kernel_grad_hist.csv").read_text().splitlines()
    assert hist[0] == "modality,bin_center,mass"
    for m in "nsr":
        mass = [float(r.split(",")[2]) for r in hist[1:] if r.startswith(m + ",")]
        assert abs(sum(mass) - 1.0) < 1e-9 or sum(mass) == 0.0


def test_gradcheck_ops_only(capsys):
    assert main(["gradcheck", "--ops-only"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[-1].endswith("PASS") and "tol=0.0001" in out[-1]


def test_eval_external_reports_rejections(tmp_path, capsys):
    budget = ["--epochs", "1", "--n-train", "2", "--n-val", "1", "--batch-size", "2", "--crop", "16",
              "--scene-size", "32", "--variant", "spfnet-t", "--channels", "4", "--stages", "1"]
    assert main(["train", *budget, "--out", str(tmp_path / "r")]) == 0
    main(["synth", "--count", "2", "--size", "32", "--out", str(tmp_path / "s")])
    (tmp_path / "s" / "scenes" / "00001" / "semantic.pfm").unlink()
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.spft"),
                 "--data", str(tmp_path / "s" / "scenes")]) == 0
    io_ = capsys.readouterr()
    assert json.loads(io_.out)["n"] == 1 and "semantic.pfm" in io_.err
    assert np.isfinite(json.loads(io_.out)["mean_rmse_cm"])


def test_ablate_priors_table(tmp_path, capsys):
    budget = ["--epochs", "1", "--n-train", "2", "--n-val", "1", "--batch-size", "2", "--crop", "16",
              "--scene-size", "32", "--variant", "spfnet-t", "--channels", "4", "--stages", "1"]
    assert main(["ablate", "--suite", "priors", *budget, "--out", str(tmp_path / "a")]) == 0
    rows = (tmp_path / "a" / "priors.csv").read_text().splitlines()
    assert rows[0] == "variant,rmse_cm,val_rmse_cm,bicubic_rmse_cm,params"
    assert [r.split(",")[0] for r in rows[1:]] == ["RGB", "RGB+N", "RGB+S", "RGB+N+S"]
