import json
import struct

import pytest

from protofg3d.cli import run
from protofg3d.data import read_dataset

FAST = ["--set", "epochs=2", "--set", "K=3", "--set", "embed_dim=8", "--set", "warmup_epochs=1"]


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.pfge"
    assert run(["synth", "--classes", "3", "--views", "4", "--dim", "8", "--counts", "15,15,15", "--seed", "2", "-o", str(path)]) == 0
    return path


def test_synth_header(tmp_path):
    path = tmp_path / "d.pfge"
    code = run(["synth", "--classes", "4", "--subclusters", "3", "--views", "12", "--dim", "32",
                "--counts", "100,100,100,100", "--seed", "7", "-o", str(path)])
    assert code == 0
    _, _, _, N, V, D, C = struct.unpack_from("<4sHBIIII", path.read_bytes())
    assert (C, V, D, N) == (4, 12, 32, 400)


@pytest.mark.parametrize("cmd", ["synth", "import", "train", "eval", "inspect", "sweep", "ot-solve"])
def test_help_exits_zero_without_side_effects(cmd, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out
    assert list(tmp_path.iterdir()) == []


def test_train_twice_bit_identical(dataset, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("K=3\nepochs=2\nembed_dim=8\nwarmup_epochs=1\n")
    for out in ("run1", "run2"):
        assert run(["train", "-c", str(cfg), "--data", str(dataset), "-o", str(tmp_path / out)]) == 0
    assert (tmp_path / "run1/model.pfgm").read_bytes() == (tmp_path / "run2/model.pfgm").read_bytes()
    assert (tmp_path / "run1/metrics.log").read_text() == (tmp_path / "run2/metrics.log").read_text()


def test_overrides_beat_config_file(dataset, tmp_path):
    from protofg3d.pipeline import load_model

    cfg = tmp_path / "cfg.txt"
    cfg.write_text("K=5\nepochs=1\n")
    assert run(["train", "-c", str(cfg), "--set", "K=2", "--set", "embed_dim=8", "--data", str(dataset), "-o", str(tmp_path / "r")]) == 0
    model = load_model(tmp_path / "r/model.pfgm")
    assert model.config.K == 2 and model.config.epochs == 1 and model.pool.per_class_prototypes == 2


def test_train_eval_inspect(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--data", str(dataset), "-o", str(out), "--baseline"] + FAST) == 0
    assert {p.name for p in out.iterdir()} == {"model.pfgm", "metrics.log", "baseline_metrics.log", "baseline_eval.json"}
    assert len((out / "metrics.log").read_text().splitlines()) == 2
    assert run(["eval", "--model", str(out / "model.pfgm"), "--data", str(dataset), "-o", str(out)]) == 0
    assert "AIA" in capsys.readouterr().out
    report = json.loads((out / "eval.json").read_text())
    assert set(report) >= {"aia", "aca", "per_class_accuracy", "confusion"}
    assert run(["inspect", "--model", str(out / "model.pfgm"), "--data", str(dataset), "-m", "2", "-o", str(out)]) == 0
    entries = json.loads((out / "inspect.json").read_text())
    assert len(entries) == 9 and all(len(e["top_prototypes"]) == 2 for e in entries)


def test_sweep_one_row_per_value(dataset, tmp_path, capsys):
    out = tmp_path / "sw"
    assert run(["sweep", "--data", str(dataset), "--grid", "K=2,3,4", "-o", str(out)] + FAST) == 0
    rows = (out / "sweep.tsv").read_text().splitlines()
    assert rows[0].split("\t")[:3] == ["K", "aia", "aca"]
    assert [r.split("\t")[0] for r in rows[1:]] == ["2", "3", "4"]


def test_sweep_parallel_matches_sequential(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("PROTO_FG3D_THREADS", "2")
    args = ["sweep", "--data", str(dataset), "--grid", "alpha=0,0.2"] + FAST
    assert run(args + ["-o", str(tmp_path / "a")]) == 0
    assert run(args + ["-o", str(tmp_path / "b"), "--parallel"]) == 0
    assert (tmp_path / "a/sweep.tsv").read_text() == (tmp_path / "b/sweep.tsv").read_text()


def test_import_csv(tmp_path):
    src = tmp_path / "e.csv"
    src.write_text("shape_id,view_id,label,f0,f1\n0,0,0,1,0\n0,1,0,1,0.1\n1,0,1,0,1\n1,1,1,0.1,1\n")
    assert run(["import", str(src), "-o", str(tmp_path / "e.pfge")]) == 0
    ds = read_dataset(tmp_path / "e.pfge")
    assert ds.payload_kind == "embedded" and ds.views.shape == (2, 2, 2)


def test_ot_solve(tmp_path, capsys):
    m = tmp_path / "m.csv"
    m.write_text("0.9,0.2\n0.1,0.8\n")
    assert run(["ot-solve", str(m), "--kappa", "0.5", "-o", str(tmp_path / "r.txt")]) == 0
    text = capsys.readouterr().out
    assert "Z (2 x 2)" in text and text == (tmp_path / "r.txt").read_text()
    assert run(["ot-solve", str(m), "--solver", "apdagd"]) == 0


def test_exit_codes(dataset, tmp_path, capsys):
    assert run([]) == 1
    assert run(["train", "--data", str(dataset), "-o", str(tmp_path / "x"), "--set", "bogus=1"]) == 1
    assert "bogus" in capsys.readouterr().err
    assert run(["train", "--data", str(dataset), "-o", str(tmp_path / "x"), "--set", "eta0=2"]) == 1
    assert run(["train", "--data", str(tmp_path / "missing.pfge"), "-o", str(tmp_path / "x")]) == 2
    assert "missing.pfge" in capsys.readouterr().err
    bad = tmp_path / "bad.pfge"
    bad.write_bytes(b"PFGE\x02\x00" + bytes(20))
    assert run(["eval", "--model", str(bad), "--data", str(dataset)]) == 2
    m = tmp_path / "m.csv"
    m.write_text("0.9,0.2,0.4\n0.1,0.8,0.3\n")
    assert run(["ot-solve", str(m), "--kappa", "0.001", "--max-iters", "1", "--tol", "1e-15"]) == 3
    m.write_text("0.9,x\n")
    assert run(["ot-solve", str(m)]) == 2
