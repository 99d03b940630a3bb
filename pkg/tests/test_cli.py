import csv
import json

import jsonschema
import pytest

from fedsilo import cli

CONFIG = """
[scenario]
kind = "clustered_sources"
n_clients = 4
n_sources = 2
samples_per_client = 30

[scheme]
name = "hcct"

[model]
hidden = [6]

[train]
epochs = 3

[hcct]
alpha = 30.0

[run]
seeds = [0, 1]
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(CONFIG)
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def schema():
    return json.loads(cli.SCHEMA_PATH.read_text())


def test_run_outputs_and_schema(cfg_path, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg_path, "--out", str(out)]) == 0
    for name in ("metrics.csv", "summary.json", "partitions.jsonl"):
        assert (out / name).exists()
    for seed in (0, 1):
        for name in ("metrics.csv", "summary.json", "partitions.jsonl", "events.jsonl"):
            assert (out / f"seed-{seed}" / name).exists()
        jsonschema.validate(json.loads((out / f"seed-{seed}" / "summary.json").read_text()), schema())
    summary = json.loads((out / "summary.json").read_text())
    jsonschema.validate(summary, schema())
    assert summary["seeds"] == [0, 1] and len(summary["final_partition"]) == 2
    rows = read_rows(out / "metrics.csv")
    assert len(rows) == 2 * 4 * 4  # seeds x records x clients


def test_schema_rejects_bad_summary():
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"scheme": "hcct", "mean": 2.0}, schema())


def test_run_is_byte_reproducible(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--config", cfg_path, "--out", str(a)])
    cli.main(["run", "--config", cfg_path, "--out", str(b)])
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_override_scheme(cfg_path, tmp_path):
    out = tmp_path / "g"
    cli.main(["run", "--config", cfg_path, "--out", str(out), "--override", "scheme=global",
              "--override", "seeds=[3]"])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["scheme"] == "global" and summary["seeds"] == [3]


def test_seed_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDSILO_SEED", "7")
    out = tmp_path / "e"
    cli.main(["run", "--config", cfg_path, "--out", str(out), "--threads", "2"])
    assert json.loads((out / "summary.json").read_text())["seeds"] == [7]


def test_errors_exit_nonzero(cfg_path, tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "not found" in capsys.readouterr().err
    assert cli.main(["run", "--config", cfg_path, "--override", "hcct.alpha=-1"]) == 2
    assert "hcct.alpha" in capsys.readouterr().err
    bad = tmp_path / "bad.csv.toml"
    bad.write_text('[scenario]\nkind = "csv"\nn_clients = 2\npaths = ["x.csv", "y.csv"]\n'
                   '[scheme]\nname = "hcct"\n')
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "z")]) != 0


def test_sweep_grid_and_resume(cfg_path, tmp_path, monkeypatch):
    out = tmp_path / "sw"
    args = ["sweep", "--config", cfg_path, "--out", str(out),
            "--grid", "alpha=1,100", "--grid", "seeds=1,2"]
    assert cli.main(args) == 0
    rows = read_rows(out / "sweep.csv")
    assert [(r["alpha"], r["seed"]) for r in rows] == [("1", "1"), ("1", "2"), ("100", "1"), ("100", "2")]

    def boom(*a, **k):
        raise AssertionError("completed cell was rerun")

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(args) == 0
    assert read_rows(out / "sweep.csv") == rows


def test_sweep_forced_k(cfg_path, tmp_path):
    out = tmp_path / "k"
    cli.main(["sweep", "--config", cfg_path, "--out", str(out), "--grid", "forced_k=1,2,N",
              "--grid", "seeds=0"])
    rows = read_rows(out / "sweep.csv")
    assert [(r["forced_k"], r["n_groups"]) for r in rows] == [("1", "1"), ("2", "2"), ("4", "4")]


def test_sweep_empty_grid(cfg_path, tmp_path, capsys):
    assert cli.main(["sweep", "--config", cfg_path, "--out", str(tmp_path)]) == 2
    assert "grid" in capsys.readouterr().err


def test_compare(cfg_path, tmp_path, capsys):
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", cfg_path, "--out", str(out),
                     "--schemes", "hcct,hcct_e,hcct_p"]) == 0
    rows = read_rows(out / "compare.csv")
    assert [r["scheme"] for r in rows] == ["hcct", "hcct_e", "hcct_p"]
    assert set(rows[0]) >= {"mean", "mean_sd", "std", "min", "max"}
    digests = json.loads((out / "datasets.json").read_text())
    assert set(digests) == {"0", "1"} and all(len(v) == 4 for v in digests.values())
    assert "+-" in capsys.readouterr().out
    assert cli.main(["compare", "--config", cfg_path, "--schemes", "nope"]) == 2
