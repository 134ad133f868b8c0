import csv
import json
import struct

import numpy as np
import pytest

from contistream.cli import DEFAULT_GRIDS, ExperimentConfig, main, select_value, summarize
from contistream.errors import ConfigError

TINY = """\
strategy: {strategy}
seeds: [0, 1, 2, 3, 4]
scenario:
  per_class: 30
  feature_dim: 6
train:
  epochs: 1
  hidden: [8]
  embedding_dim: 8
  memory_capacity: 20
"""


def write_config(tmp_path, text=None, strategy="replay", name="exp.yaml"):
    path = tmp_path / name
    path.write_text(text if text is not None else TINY.format(strategy=strategy), encoding="utf-8")
    return path


def read_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_defaults_echoed(self, tmp_path):
        cfg = ExperimentConfig.parse("strategy: md\n")
        assert cfg.seeds == [0, 1, 2, 3, 4]
        assert cfg.train["epochs"] == 20 and cfg.train["learning_rate"] == 0.01
        assert cfg.scenario["feature_dim"] == 16
        assert cfg.to_dict()["train"]["momentum"] == 0.8

    def test_non_md_uses_plain_heads(self):
        assert ExperimentConfig.parse("strategy: replay\n").train["head_mode"] == "incremental"

    @pytest.mark.parametrize("text, line", [
        ("strategy: md\ntrain:\n  epochs: 2\n  bogus: 1\n", 4),
        ("strategy: md\nextra: 1\n", 2),
        ("strategy: md\ntrain:\n  epochs: two\n", 3),
        ("strategy: nope\n", 1),
        ("strategy: md\nseeds: 3\n", 2),
        ("strategy: md\ntrain:\n  head_mode: wide\n", 3),
        ("seeds: [1]\n", 1),
    ])
    def test_line_precise_errors(self, text, line):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.parse(text)
        assert info.value.line == line
        assert str(info.value).startswith(f"line {line}:")

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.parse("strategy: md\ntrain: [1\n")
        assert info.value.line is not None

    def test_semantic_errors(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("strategy: md\ntrain:\n  epochs: 0\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("strategy: md\nseeds: []\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.parse("strategy: replay\ntrain:\n  memory_capacity: 5\n")


class TestRun:
    def test_fan_out(self, tmp_path):
        config = write_config(tmp_path)
        assert run_cli("run", "--config", config, "--out", tmp_path / "out") == 0
        runs = sorted((tmp_path / "out" / "runs").glob("*.json"))
        assert len(runs) == 5
        rows = read_rows(tmp_path / "out" / "metrics-replay-incremental.csv")
        assert [r["seed"] for r in rows] == ["0", "1", "2", "3", "4"]
        assert list(rows[0])[:13] == ["run_id", "strategy", "head_mode", "seed", "memory", "lambda", "alpha",
                                      "acc", "bwt", "forgetting", "scaler_params", "O", "O_CG"]
        assert rows[0]["O"] == str(6 * 20)
        assert json.loads(rows[0]["config"])["train"]["epochs"] == 1
        doc = json.loads(runs[0].read_text())
        assert doc["experiment"]["scenario"]["per_class"] == 30
        assert len(doc["R"]) == 5

    def test_rerun_is_identical(self, tmp_path):
        config = write_config(tmp_path)
        for out in ("a", "b"):
            assert run_cli("run", "--config", config, "--out", tmp_path / out, "--seeds", "1") == 0
        a, b = (json.loads(next((tmp_path / o / "runs").glob("*.json")).read_text()) for o in ("a", "b"))
        assert a["R"] == b["R"] and a["epoch_log"] == b["epoch_log"]

    def test_parallel_matches_serial(self, tmp_path):
        config = write_config(tmp_path)
        run_cli("run", "--config", config, "--out", tmp_path / "s", "--seeds", "0,1")
        run_cli("run", "--config", config, "--out", tmp_path / "p", "--seeds", "0,1", "--parallel", "2")
        serial, parallel = ([{k: v for k, v in r.items() if k != "config"} for r in
                             read_rows(tmp_path / d / "metrics-replay-incremental.csv")] for d in "sp")
        assert serial == parallel

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CONTISTREAM_SEED", "3")
        config = write_config(tmp_path)
        assert run_cli("run", "--config", config, "--out", tmp_path / "out") == 0
        assert [p.name for p in (tmp_path / "out" / "runs").iterdir()] == ["replay-incremental-m20-s3.json"]

    def test_missing_field_writes_nothing(self, tmp_path, capsys):
        config = write_config(tmp_path, "seeds: [0]\nout: {}\n".format(tmp_path / "out"))
        assert run_cli("run", "--config", config) == 2
        assert not (tmp_path / "out").exists()
        assert "line 1" in capsys.readouterr().err

    def test_bad_seeds_flag(self, tmp_path):
        assert run_cli("run", "--config", write_config(tmp_path), "--seeds", "a,b") == 2

    def test_missing_file(self, tmp_path):
        assert run_cli("run", "--config", tmp_path / "absent.yaml") == 2

    def test_runtime_failure_exit_1(self, tmp_path):
        # missing data files only surface once the run starts
        idx = "scenario:\n  source: idx\n  train_images: x\n  train_labels: y\n  test_images: z\n  test_labels: w\n"
        text = TINY.format(strategy="replay").replace("scenario:\n", idx)
        assert run_cli("run", "--config", write_config(tmp_path, text), "--out", tmp_path / "o") == 1

    def test_idx_source(self, tmp_path):
        rng = np.random.default_rng(0)

        def write(name, labels):
            images = rng.integers(0, 256, size=(len(labels), 3, 3), dtype=np.uint8)
            images[:, 0, 0] = labels * 25
            (tmp_path / f"{name}-images").write_bytes(struct.pack(">IIII", 0x803, len(labels), 3, 3)
                                                       + images.tobytes())
            (tmp_path / f"{name}-labels").write_bytes(struct.pack(">II", 0x801, len(labels))
                                                       + labels.astype(np.uint8).tobytes())

        write("train", np.repeat(np.arange(4), 20))
        write("test", np.repeat(np.arange(4), 5))
        text = ("strategy: naive\nseeds: [0]\nscenario:\n  source: idx\n  task_count: 2\n  class_count: 4\n"
                "  train_images: train-images\n  train_labels: train-labels\n"
                "  test_images: test-images\n  test_labels: test-labels\n"
                "train:\n  epochs: 1\n  hidden: []\n  embedding_dim: 4\n")
        assert run_cli("run", "--config", write_config(tmp_path, text), "--out", tmp_path / "o") == 0
        row = read_rows(tmp_path / "o" / "metrics-naive-incremental.csv")[0]
        assert row["O"] == "0"
        doc = json.loads(next((tmp_path / "o" / "runs").glob("*.json")).read_text())
        assert doc["sample_shape"] == [3, 3]


class TestGrid:
    def test_default_grids(self):
        assert DEFAULT_GRIDS["md"] == [1.0, 0.5, 0.25, 0.1, 0.05, 0.025, 0.01]
        assert len(DEFAULT_GRIDS["md"]) == 7

    def test_tie_goes_to_larger_value(self):
        results = [{"value": 0.1, "dev_acc": 0.8}, {"value": 0.5, "dev_acc": 0.8}, {"value": 0.05, "dev_acc": 0.7}]
        assert select_value(results) == 0.5
        assert select_value([{"value": 0.1, "dev_acc": 0.9}, {"value": 0.5, "dev_acc": 0.8}]) == 0.1

    def test_single_value(self, tmp_path):
        text = TINY.format(strategy="md") + "grid:\n  values: [0.25]\n"
        assert run_cli("grid", "--config", write_config(tmp_path, text), "--out", tmp_path / "g") == 0
        summary = json.loads((tmp_path / "g" / "grid-md.json").read_text())
        assert summary["best"] == 0.25 and summary["parameter"] == "lam"
        assert summary["selection_seed"] == 0
        rows = read_rows(tmp_path / "g" / "grid-md.csv")
        assert len(rows) == 1 and rows[0]["selected"] == "True"

    def test_ld_grid(self, tmp_path):
        text = TINY.format(strategy="ld") + "grid:\n  values: [0.1, 1.0]\n  selection_seed: 2\n"
        assert run_cli("grid", "--config", write_config(tmp_path, text), "--out", tmp_path / "g") == 0
        summary = json.loads((tmp_path / "g" / "grid-ld.json").read_text())
        assert summary["parameter"] == "alpha" and summary["selection_seed"] == 2
        best = max(summary["grid"], key=lambda r: (r["dev_acc"], r["value"]))
        assert summary["best"] == best["value"]

    def test_empty_grid(self, tmp_path):
        text = TINY.format(strategy="md") + "grid:\n  values: []\n"
        assert run_cli("grid", "--config", write_config(tmp_path, text), "--out", tmp_path / "g") == 2
        assert not (tmp_path / "g").exists()

    def test_wrong_strategy(self, tmp_path):
        assert run_cli("grid", "--config", write_config(tmp_path), "--out", tmp_path / "g") == 2


def fake_record(path, strategy, acc_last, seed, memory=200, head="incremental"):
    n = len(acc_last)
    R = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            R[i][j] = acc_last[j] if i == n - 1 else 1.0
    doc = {"strategy": strategy, "R": R, "config": {"head_mode": head, "memory_capacity": memory, "seed": seed},
           "scenario": {}, "run_id": f"{strategy}-{seed}", "experiment": {"train": {"head_mode": head}}}
    path.write_text(json.dumps(doc), encoding="utf-8")


class TestReport:
    def test_population_std(self, tmp_path):
        fake_record(tmp_path / "a.json", "replay", [0.6, 0.6], 0)
        fake_record(tmp_path / "b.json", "replay", [0.8, 0.8], 1)
        assert run_cli("report", tmp_path) == 0
        row = read_rows(tmp_path / "report.csv")[0]
        assert float(row["acc_mean"]) == pytest.approx(0.7, abs=1e-12)
        assert float(row["acc_std"]) == pytest.approx(0.1, abs=1e-12)
        assert "population" in (tmp_path / "report.txt").read_text()

    def test_identical_runs(self, tmp_path):
        for s in range(5):
            fake_record(tmp_path / f"{s}.json", "md", [0.7, 0.7], s, head="cascaded_gates")
        rows = summarize([json.loads(p.read_text()) for p in sorted(tmp_path.glob("*.json"))])
        assert len(rows) == 1
        assert rows[0]["acc_mean"] == pytest.approx(0.7) and rows[0]["acc_std"] == pytest.approx(0.0, abs=1e-15)
        assert rows[0]["runs"] == 5

    def test_groups(self, tmp_path):
        fake_record(tmp_path / "a.json", "md", [0.5, 0.5], 0, head="cascaded_gates")
        fake_record(tmp_path / "b.json", "md", [0.5, 0.5], 0, head="single_gate")
        fake_record(tmp_path / "c.json", "md", [0.5, 0.5], 0, memory=500, head="single_gate")
        rows = summarize([json.loads(p.read_text()) for p in sorted(tmp_path.glob("*.json"))])
        assert [(r["head_mode"], r["memory"]) for r in rows] == [
            ("cascaded_gates", 200), ("single_gate", 200), ("single_gate", 500)]
        assert all(r["runs"] == 1 and r["acc_std"] == 0 for r in rows)

    def test_empty_dir(self, tmp_path):
        assert run_cli("report", tmp_path) == 2
        assert run_cli("report", tmp_path / "missing") == 2


def test_timing(tmp_path, capsys):
    assert run_cli("timing", "--tasks", "4", "--repeats", "10", "--out", tmp_path) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "tasks,gates,incremental_ms,cascaded_gates_ms"
    assert len(lines) == 5
    assert [r["gates"] for r in read_rows(tmp_path / "timing.csv")] == ["0", "1", "3", "6"]
    assert run_cli("timing", "--repeats", "2") == 2


def test_timing_defaults():
    from contistream.cli import build_parser, defaults

    args = build_parser().parse_args(["timing"])
    assert args.tasks is None and defaults()["timing"] == {"task_count": 20, "repeats": 100}


def test_overhead_default(capsys):
    assert run_cli("overhead") == 0
    out = capsys.readouterr().out.splitlines()
    row = dict(zip(out[0].split(","), out[1].split(",")))
    assert row["O"] == "1536000"
    assert int(row["O_CG"]) == 1536000 + int(row["scaler_weights"])
    assert row["scaler_weights"] == row["formula_scaler_floats"]


def test_overhead_from_config(tmp_path, capsys):
    text = "strategy: md\noverhead:\n  sample_shape: [28, 28]\n  memory: 100\n  task_count: 3\n"
    assert run_cli("overhead", "--config", write_config(tmp_path, text)) == 0
    out = capsys.readouterr().out.splitlines()
    row = dict(zip(out[0].split(","), out[1].split(",")))
    assert row["O"] == str(784 * 100)
    assert row["scaler_weights"] == str(64 * (0 + 2 + 4))


def test_example_config_documents_the_defaults():
    from pathlib import Path

    from contistream.cli import defaults

    cfg = ExperimentConfig.load(Path(__file__).parent.parent / "configs" / "toy-md.yaml")
    expected = defaults()
    for section in ("scenario", "train", "grid", "overhead", "timing"):
        assert getattr(cfg, section) == expected[section], section
    assert cfg.seeds == expected[""]["seeds"] and cfg.strategy == "md"
