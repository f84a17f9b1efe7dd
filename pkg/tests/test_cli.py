import csv

import numpy as np
import pytest

from stum.cli import main
from stum.data import load_dataset

SMALL = ["synth.nodes=6", "synth.frames=120", "model.input_len=4", "model.horizon=12",
         "model.embed_dim=4", "model.num_mlrf=1", "model.astucs_per_block=2",
         "model.hidden_dims=8", "train.max_epochs=2", "train.batch_size=16", "seed=0"]


def run(*argv, sets=SMALL):
    args = list(argv)
    for s in sets:
        args += ["--set", s]
    return main(args)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("STUM_SEED", raising=False)
    monkeypatch.delenv("STUM_THREADS", raising=False)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_train_twice_gives_identical_history(tmp_path):
    assert run("train", "--out", str(tmp_path / "a")) == 0
    assert run("train", "--out", str(tmp_path / "b")) == 0
    ha = read_rows(tmp_path / "a" / "history.csv")
    hb = read_rows(tmp_path / "b" / "history.csv")
    assert [r[:3] for r in ha] == [r[:3] for r in hb]
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    cfg_a, cfg_b = ((tmp_path / d / "resolved.cfg").read_text().splitlines() for d in "ab")
    assert [x for x in cfg_a if not x.startswith("run.out")] == [x for x in cfg_b if not x.startswith("run.out")]


def test_train_then_eval_reports_four_rows(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run("train", "--out", out) == 0
    assert run("eval", "--out", out, "--horizons", "3,6,12") == 0
    rows = read_rows(tmp_path / "run" / "report.csv")
    assert [r[0] for r in rows[1:]] == ["3", "6", "12", "avg"]
    for name in ("val_report.csv", "predictions.csv", "embeddings.csv", "report.json"):
        assert (tmp_path / "run" / name).exists()
    assert "avg" in capsys.readouterr().out


def test_eval_detects_architecture_mismatch(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run("train", "--out", out) == 0
    assert run("eval", "--out", out, sets=SMALL + ["model.embed_dim=6"]) == 2
    assert "CheckpointMismatch" in capsys.readouterr().err


def test_missing_data_file_is_named(tmp_path, capsys):
    code = run("train", "--out", str(tmp_path), sets=SMALL + [f"data.path={tmp_path / 'gone.bin'}"])
    assert code == 2
    assert "gone.bin" in capsys.readouterr().err


def test_graphconv_without_graph(tmp_path, capsys):
    assert run("synth", "--out", str(tmp_path / "d"), sets=SMALL) == 0
    sets = SMALL + [f"data.path={tmp_path / 'd' / 'flow.bin'}", "model.backbone=graphconv"]
    assert run("train", "--out", str(tmp_path / "r"), sets=sets) == 2
    assert "MissingGraph" in capsys.readouterr().err


def test_regions_above_nodes_is_config_error(tmp_path, capsys):
    assert run("synth", "--out", str(tmp_path), sets=SMALL + ["synth.regions=9"]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert run("train", "--out", str(tmp_path), sets=["model.wings=2"]) == 2
    assert "ConfigError" in capsys.readouterr().err


@pytest.mark.parametrize("fmt, name", [("flatbin", "flow.bin"), ("csv", "flow.csv")])
def test_synth_is_byte_stable_and_loads_back(tmp_path, fmt, name):
    sets = ["synth.nodes=20", "synth.frames=500", "seed=0"]
    assert run("synth", "--format", fmt, "--out", str(tmp_path / "a"), sets=sets) == 0
    assert run("synth", "--format", fmt, "--out", str(tmp_path / "b"), sets=sets) == 0
    for f in (name, "edges.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    series, graph = load_dataset(tmp_path / "a" / name, tmp_path / "a" / "edges.csv", fmt)
    assert (series.frames, series.nodes) == (500, 20)
    assert graph.num_nodes == 20 and np.count_nonzero(graph.adjacency) > 0


def test_ablate_table_is_sorted_with_growing_params(tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "--axis", "astuc", "--values", "4,2", "--out", str(out)) == 0
    rows = read_rows(out / "ablate_astuc.csv")
    assert rows[0] == ["value", "mae", "rmse", "mape", "trainable_params", "seconds_per_step"]
    body = rows[1:]
    assert [int(r[0]) for r in body] == [2, 4]
    assert int(body[0][4]) < int(body[1][4])


def test_bench_writes_table(tmp_path):
    out = tmp_path / "bench"
    assert run("bench", "--axis", "astuc", "--values", "2,4", "--steps", "2", "--out", str(out)) == 0
    rows = read_rows(out / "bench.csv")
    assert len(rows) == 3 and int(rows[1][1]) < int(rows[2][1])


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "max relative error" in capsys.readouterr().out
