import json

import pytest

from upliftlab import experiment
from upliftlab.cli import main
from upliftlab.config import ALL_STRATEGIES, load_config
from upliftlab.datagen import load_csv
from upliftlab.model import DrcfrModel

TINY = """
[experiment]
n_train = 300
n_test = 600
periods = 2
seeds = 0
incr_frac = 0.2

[model]
rep_hidden = 6
prop_hidden = 4
clf_hidden = 4
trunk_hidden = 6, 6
head_hidden = 6
epochs = 2
batch_size = 64
sinkhorn_iters = 10

[icepkd]
epochs = 2
batch_size = 64
restarts = 2
corrector_hidden = 4
"""

REPORTS = ("metrics_by_period.csv", "metrics_per_seed.csv", "stability.csv", "report.md", "report.json")


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def test_gen_writes_stream(tmp_path, tiny_cfg):
    out = tmp_path / "data"
    assert main(["gen", "--config", str(tiny_cfg), "--seed", "5", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == sorted(f"period_{k}_{s}.csv" for k in range(3) for s in ("train", "test"))
    b = load_csv(out / "period_1_test.csv", n_arms=3, period=1)
    assert len(b) == 600 and b.true_probs is not None
    again = tmp_path / "again"
    main(["gen", "--config", str(tiny_cfg), "--seed", "5", "--out", str(again)])
    assert (out / "period_2_train.csv").read_bytes() == (again / "period_2_train.csv").read_bytes()


def test_gen_10d(tmp_path, tiny_cfg):
    out = tmp_path / "d10"
    assert main(["gen", "--config", str(tiny_cfg), "--dataset", "synth10d", "--out", str(out)]) == 0
    assert load_csv(out / "period_0_train.csv").dim == 10


def test_run_writes_reports_checkpoints_and_is_byte_stable(tmp_path, tiny_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["run", "--config", str(tiny_cfg), "--strategies", ",".join(ALL_STRATEGIES)]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    for name in REPORTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ck = a / "seed_0" / "checkpoints"
    for name in ("initial", "a_k1", "a_k2", "b_k2", "ice-pkd_k2"):
        assert (ck / f"{name}.model.json").exists(), name
    man = json.loads((ck / "ice-pkd_k2.manifest.json").read_text())
    assert man["stage"] == 2
    assert (ck / man["buffer"]).exists() and (ck / man["checkpoint"]).exists()
    assert man["n_replay"] + man["n_new"] == man["n_save"]
    curves = a / "seed_0" / "curves"
    assert (curves / "ice-pkd_k1_qini.csv").exists() and (curves / "a_k2_ras.csv").exists()
    run = json.loads((a / "run_manifest.json").read_text())
    assert run["errors"] == {} and run["strategies"] == list(ALL_STRATEGIES)
    assert load_config(a / "config.ini").hash() == run["config_hash"]
    report = json.loads((a / "report.json").read_text())
    assert set(report["stability"]["ICE-PKD"]) == {"ate_error", "pehe", "qini", "ras_aucc"}
    assert report["stability"]["A"]["pehe"]["ad"] == 0.0


def test_ablate_default_strategies(tmp_path, tiny_cfg):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["strategies"] == ["A", "ICE-PKD", "ICE-PKD w/o PT", "ICE-PKD w/o RM", "ICE-PKD w/o KD"]


def test_eval_with_model_and_preds(tmp_path, tiny_cfg):
    data, run = tmp_path / "data", tmp_path / "run"
    main(["gen", "--config", str(tiny_cfg), "--out", str(data)])
    main(["run", "--config", str(tiny_cfg), "--strategies", "B", "--out", str(run)])
    ckpt = run / "seed_0" / "checkpoints" / "b_k1.model.json"
    test = data / "period_1_test.csv"
    assert main(["eval", "--data", str(test), "--model", str(ckpt), "--out", str(tmp_path / "e1")]) == 0
    m1 = json.loads((tmp_path / "e1" / "metrics.json").read_text())
    # the in-run evaluation of the same checkpoint on the same data agrees exactly
    per_seed = json.loads((run / "report.json").read_text())["per_seed"]["0"]["B"][0]
    assert m1 == per_seed

    preds = DrcfrModel.load(ckpt).predict_all(load_csv(test).x)
    lines = ["yhat0,yhat1,yhat2"] + [",".join(repr(float(v)) for v in r) for r in preds]
    (tmp_path / "p.csv").write_text("\n".join(lines) + "\n")
    assert main(["eval", "--data", str(test), "--preds", str(tmp_path / "p.csv"),
                 "--out", str(tmp_path / "e2")]) == 0
    assert json.loads((tmp_path / "e2" / "metrics.json").read_text()) == m1
    for name in ("metrics.csv", "qini_curve.csv", "ras_curve.csv"):
        assert (tmp_path / "e2" / name).read_bytes() == (tmp_path / "e1" / name).read_bytes()


def test_run_on_csv_dataset(tmp_path, tiny_cfg):
    data = tmp_path / "data"
    main(["gen", "--config", str(tiny_cfg), "--out", str(data)])
    out = tmp_path / "csvrun"
    assert main(["run", "--config", str(tiny_cfg), "--dataset", "csv", "--csv-dir", str(data),
                 "--strategies", "A,ICE-PKD", "--out", str(out)]) == 0
    synth = tmp_path / "synth"
    main(["run", "--config", str(tiny_cfg), "--strategies", "A,ICE-PKD", "--out", str(synth)])
    # the CSV round trip is exact, so both runs see the same stream
    a = json.loads((out / "report.json").read_text())["per_seed"]
    b = json.loads((synth / "report.json").read_text())["per_seed"]
    assert a == b


def test_report_merges_seed_directories(tmp_path, tiny_cfg):
    base = ["run", "--config", str(tiny_cfg), "--strategies", "A,B"]
    main(base + ["--seed", "0", "--out", str(tmp_path / "s0")])
    main(base + ["--seed", "1", "--out", str(tmp_path / "s1")])
    assert main(["report", str(tmp_path / "s0"), str(tmp_path / "s1"), "--out", str(tmp_path / "m")]) == 0
    merged = json.loads((tmp_path / "m" / "report.json").read_text())
    assert merged["seeds"] == [0, 1]
    text = TINY.replace("seeds = 0", "seeds = 0, 1")
    (tmp_path / "both.ini").write_text(text)
    main(["run", "--config", str(tmp_path / "both.ini"), "--strategies", "A,B", "--out", str(tmp_path / "both")])
    for name in ("metrics_by_period.csv", "stability.csv", "report.md"):
        assert (tmp_path / "m" / name).read_bytes() == (tmp_path / "both" / name).read_bytes(), name
    assert main(["report", str(tmp_path / "s0"), str(tmp_path / "s0"), "--out", str(tmp_path / "dup")]) == 2


def test_failed_strategy_exits_1(tmp_path, tiny_cfg, monkeypatch, capsys):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(experiment, "train", boom)
    out = tmp_path / "fail"
    assert main(["run", "--config", str(tiny_cfg), "--strategies", "A,C", "--out", str(out)]) == 1
    run = json.loads((out / "run_manifest.json").read_text())
    assert "FloatingPointError" in run["errors"]["0"]["A"]
    assert "C" not in run["errors"]["0"]
    assert "failed" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["run", "--config", "/nonexistent.ini", "--out", "x"],
    ["gen", "--dataset", "csv", "--csv-dir", "d", "--out", "x"],
    ["run", "--dataset", "csv", "--out", "x"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    argv = [a if a != "x" else str(tmp_path / "x") for a in argv]
    assert main(argv) == 2
    assert "upliftlab: error" in capsys.readouterr().err


def test_bad_data_and_checkpoint_exit_2(tmp_path, tiny_cfg, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1,t,y\n0.1,0.2,0,7\n")
    (tmp_path / "m.json").write_text("{}")
    assert main(["eval", "--data", str(bad), "--preds", str(bad), "--out", str(tmp_path / "o")]) == 2
    data = tmp_path / "data"
    main(["gen", "--config", str(tiny_cfg), "--out", str(data)])
    assert main(["eval", "--data", str(data / "period_1_test.csv"), "--model", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_strategy_is_argparse_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--strategies", "A,Z", "--out", str(tmp_path)])
    assert exc.value.code == 2
