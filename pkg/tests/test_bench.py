import csv
import io
import json
import math

import numpy as np
import pytest

from conftest import random_weights
from gap_prune.bench.config import RunConfig
from gap_prune.bench.data import BACKGROUND, generate_dataset, load_dataset, save_dataset
from gap_prune.bench.evaluate import CSV_COLUMNS, cross_sweep, evaluate, misalignment_experiments
from gap_prune.bench.timing import counted_prefill_flops, estimate_flops, measure_ttft_many
from gap_prune.cli import main
from gap_prune.core import Rng
from gap_prune.model import ModelConfig, save_weights
from gap_prune.rope import ConfigError

CFG = ModelConfig(grid_size=4, num_colors=6, d_model=32, num_heads=4, encoder_layers=2, decoder_layers=2)


def test_dataset_is_seeded():
    a = generate_dataset(50, CFG, Rng(3))
    b = generate_dataset(50, CFG, Rng(3))
    assert [x.to_json() for x in a] == [x.to_json() for x in b]
    assert [x.to_json() for x in generate_dataset(50, CFG, Rng(4))] != [x.to_json() for x in a]


def test_dataset_uniqueness_invariant():
    for ex in generate_dataset(500, CFG, Rng(1)):
        flat = ex.image.reshape(-1)
        assert ex.query_color != BACKGROUND
        assert np.flatnonzero(flat == ex.query_color).tolist() == [ex.answer_cell]
        objs = flat[flat != BACKGROUND]
        assert 1 <= objs.size <= 4 and len(set(objs.tolist())) == objs.size


def test_answer_cells_uniform_within_three_sigma():
    n, cells = 10_000, CFG.num_visual
    counts = np.bincount([ex.answer_cell for ex in generate_dataset(n, CFG, Rng(7))], minlength=cells)
    p = 1 / cells
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_dataset_errors_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, CFG, Rng(0))
    with pytest.raises(ValueError):
        generate_dataset(5, ModelConfig(num_colors=1), Rng(0))
    data = generate_dataset(10, CFG, Rng(2))
    save_dataset(data, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert [x.to_json() for x in back] == [x.to_json() for x in data]


@pytest.mark.parametrize("seq_len", [4, 11, 19, 35])
def test_flops_estimate_matches_counted(seq_len):
    w = random_weights(CFG)
    counted = counted_prefill_flops(w, seq_len)
    est = estimate_flops(CFG, seq_len)
    assert abs(est - counted) / counted < 0.02


def test_flops_estimate_shape():
    # linear plus quadratic in n: third difference vanishes
    f = [estimate_flops(CFG, n) for n in range(1, 5)]
    assert f[3] - 3 * f[2] + 3 * f[1] - f[0] == 0
    assert estimate_flops(CFG, 10) < estimate_flops(CFG, 20)
    with pytest.raises(ValueError):
        estimate_flops(CFG, 0)


def test_evaluate_independent_of_worker_count():
    w = random_weights(CFG)
    data = generate_dataset(24, CFG, Rng(0))
    one = evaluate(w, data, "random", 0.5, "gap", Rng(5), workers=1)
    many = evaluate(w, data, "random", 0.5, "gap", Rng(5), workers=3)
    assert one == many and 0.0 <= one <= 1.0


def test_cross_sweep_rows_and_delta():
    w = random_weights(CFG)
    data = generate_dataset(12, CFG, Rng(0))
    strategies, ratios = ["cls_visual", "random"], [0.5, 1.0]
    rep = cross_sweep(w, data, strategies, ratios, ["gap", "shifted"], seed=1, workers=1)
    assert len(rep.rows) == 2 * 2 * 2
    for s in strategies:
        for r in ratios:
            g, sh = rep.row(s, r, "gap"), rep.row(s, r, "shifted")
            assert g.delta == sh.delta == g.accuracy - sh.accuracy
            assert 0 < g.token_percent <= 100
        assert rep.row(s, 1.0, "gap").delta == 0
        assert rep.row(s, 1.0, "gap").accuracy == rep.unpruned_accuracy
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 9
    d = json.loads(rep.to_json())
    assert set(d) == {"meta", "unpruned_accuracy", "rows", "misalignment", "timing"}
    assert set(rep.misalignment) == {"aligned", "permuted_full", "shifted_full", "shift"}


def test_sweep_skips_spatial_permuted():
    w = random_weights(CFG)
    data = generate_dataset(4, CFG, Rng(0))
    rep = cross_sweep(w, data, ["spatial", "random"], [0.5], ["gap", "permuted"], workers=1)
    assert sorted((r.strategy, r.alignment) for r in rep.rows) == [
        ("random", "gap"), ("random", "permuted"), ("spatial", "gap")]
    assert all(r.delta is None for r in rep.rows)


def test_misalignment_shift_size():
    w = random_weights(CFG)
    data = generate_dataset(4, CFG, Rng(0))
    assert misalignment_experiments(w, data, 0.25, workers=1)["shift"] == 16 - 4


def test_ttft_measurement_keys():
    w = random_weights(CFG)
    data = generate_dataset(2, CFG, Rng(0))
    configs = [("none", 1.0, "gap"), ("cls_visual", 0.25, "gap")]
    res = measure_ttft_many(w, data, configs, runs=3, warmup=1)
    assert set(res) == set(configs)
    assert all(v["mean_ms"] > 0 and v["runs"] == 3 for v in res.values())
    with pytest.raises(ValueError):
        measure_ttft_many(w, [], configs)


def test_run_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sweep": {"ratios": [0.0]}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sweep": {"strategies": []}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"data": {"size": 3}})
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    run = RunConfig.from_dict({"seeds": {"eval": 3}})
    assert run.seeds.eval == 3 and run.model == RunConfig().model
    assert RunConfig.from_dict(json.loads(json.dumps(run.to_dict()))) == run


TINY_RUN = {
    "model": {"grid_size": 3, "num_colors": 4, "d_model": 16, "num_heads": 2,
              "encoder_layers": 1, "decoder_layers": 1},
    "data": {"train_size": 40, "val_size": 6},
    "train": {"steps": 5, "batch_size": 8, "warmup": 2, "log_every": 0},
    "sweep": {"strategies": ["cls_visual"], "ratios": [0.5, 1.0]},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY_RUN))
    return p


def test_cli_gen_data(tmp_path, tiny_config, capsys):
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "o")]) == 0
    assert len(load_dataset(tmp_path / "o" / "train.jsonl")) == 40
    assert len(load_dataset(tmp_path / "o" / "val.jsonl")) == 6


def test_cli_train_eval_sweep(tmp_path, tiny_config, capsys):
    out = str(tmp_path / "o")
    assert main(["train", "--config", str(tiny_config), "--out", out]) == 0
    assert "val_accuracy=" in capsys.readouterr().out
    assert main(["eval", "--config", str(tiny_config), "--out", out, "--ratio", "0.5",
                 "--alignment", "shifted"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("strategy=cls_visual ratio=0.5 alignment=shifted accuracy=")
    assert main(["sweep", "--config", str(tiny_config), "--out", out]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert len(report["rows"]) == 4
    assert (tmp_path / "o" / "report.csv").read_text().startswith(",".join(CSV_COLUMNS))


def test_cli_probe_and_ttft(tmp_path, tiny_config, capsys):
    w = random_weights(ModelConfig(**TINY_RUN["model"]), seed=1)
    save_weights(w, tmp_path / "w.bin")
    out = str(tmp_path / "o")
    assert main(["probe", "--config", str(tiny_config), "--out", out, "--weights", str(tmp_path / "w.bin"),
                 "--images", "10", "--epochs", "20"]) == 0
    assert capsys.readouterr().out.count("layer=") == 2
    assert main(["bench-ttft", "--config", str(tiny_config), "--out", out, "--weights",
                 str(tmp_path / "w.bin"), "--runs", "2"]) == 0
    assert "ttft_ms=" in capsys.readouterr().out


def test_cli_errors(tmp_path, tiny_config, capsys):
    assert main(["eval", "--config", str(tiny_config), "--out", str(tmp_path / "none")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == 2
