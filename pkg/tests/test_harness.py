import json
import random
from dataclasses import replace

import numpy as np
import pytest

from diversim import bench
from diversim.bench import get_benchmark
from diversim.cli import main
from diversim.coproc import CoProcessor, DiversityConfig, PrngState
from diversim.errors import ExecutionError
from diversim.harness import (
    ExperimentConfig,
    NoiseModel,
    apply_noise,
    compare_solutions,
    derive_seed,
    run_experiment,
    sweep_dl,
)
from diversim.machine import CostModel, execute


def test_derive_seed_separates_trials():
    rng = random.Random(5)
    for _ in range(10**4):
        s = rng.getrandbits(64)
        assert derive_seed(s, 0, 0) != derive_seed(s, 0, 1)


def test_derive_seed_nonzero_and_stable():
    seeds = {derive_seed(m, k, t) for m in range(4) for k in range(2) for t in range(500)}
    assert 0 not in seeds
    assert len(seeds) == 4 * 2 * 500
    # frozen from a separate splitmix64 implementation
    assert derive_seed(1, 0, 0) == 0x7AB40E090F363A7D
    assert derive_seed(7, 1, 5) == 0x2E7114A68DB8FD0B


def test_nearby_masters_give_different_streams():
    a = {derive_seed(1, 0, t) for t in range(1000)}
    b = {derive_seed(2, 0, t) for t in range(1000)}
    assert not a & b


def test_noise_mean():
    m = NoiseModel("os", 5.0)
    rng = PrngState(123)
    jitter = []
    for _ in range(10**5):
        c, rng = apply_noise(100, m, rng)
        jitter.append(c - 100)
    assert min(jitter) >= 0
    assert abs(np.mean(jitter) - 5) < 0.2


@pytest.mark.parametrize("model", [NoiseModel(), NoiseModel("os", 0.0)])
def test_noise_free_models_pass_through(model):
    rng = PrngState(9)
    state = rng.state
    assert apply_noise(1234, model, rng)[0] == 1234
    assert rng.state == state


def test_noise_parse():
    assert NoiseModel.parse("bare") == NoiseModel()
    assert NoiseModel.parse("os:2.5") == NoiseModel("os", 2.5)
    assert str(NoiseModel.parse("os:5")) == "os:5"
    with pytest.raises(ValueError):
        NoiseModel.parse("linux")


def test_equal_keys_rejected():
    with pytest.raises(ValueError):
        run_experiment(ExperimentConfig("modexp", "BL", key_pair=(7, 7), samples_per_key=2))


def test_bl_leak_between_extreme_keys():
    rep = run_experiment(ExperimentConfig("modexp", "BL", key_pair=(0x0001, 0xFFFF)))
    assert rep.capacity_bits >= 0.9


def test_report_is_byte_identical_and_parallel_safe():
    cfg = ExperimentConfig("modexp", "PrLR", dl=4, samples_per_key=60, noise=NoiseModel("os", 3))
    a = run_experiment(cfg).to_json()
    b = run_experiment(cfg).to_json()
    c = run_experiment(cfg, workers=3).to_json()
    assert a == b == c


def test_bare_metal_bl_has_one_output_per_key():
    rep = run_experiment(ExperimentConfig("mulmod16", "BL", samples_per_key=25, dl=7))
    for label in rep.labels:
        assert len(rep.histogram(label)) == 1


def test_report_contents():
    cfg = ExperimentConfig("mulmod16", "PrBL", dl=3, samples_per_key=50)
    rep = run_experiment(cfg)
    d = json.loads(rep.to_json())
    assert d["schema"] == 1
    assert list(d) == ["schema", "tool", "config", "seeds", "program", "results", "notes"]
    assert d["config"]["key_pair"] == list(rep.config.key_pair)
    for key in d["results"]["keys"]:
        assert sum(n for _, n in key["histogram"]) == key["samples"] == 50
    assert rep.histogram_csv().splitlines()[0] == "label,cycles,count"
    assert len(rep.samples_csv().splitlines()) == 101


def test_samples_checked_against_oracle(monkeypatch):
    # a result that disagrees with the oracle aborts the experiment
    monkeypatch.setattr(bench, "modexp_oracle", lambda y, k, n: 12345678)
    with pytest.raises(ExecutionError, match="oracle"):
        run_experiment(ExperimentConfig("modexp", "BL", samples_per_key=2))


def test_sweep_shape_and_time_growth():
    cfg = ExperimentConfig("modexp", "PrBL", samples_per_key=40)
    table = sweep_dl(cfg, [0, 2, 4])
    assert [r["dl"] for r in table["rows"]] == [0, 2, 4]
    means = [r["mean_cycles"] for r in table["rows"]]
    assert means == sorted(means)


def test_degenerate_sweep_matches_plain_bl_run():
    cfg = ExperimentConfig("modexp", "BL", samples_per_key=30)
    row = sweep_dl(cfg, [0])["rows"][0]
    rep = run_experiment(cfg)
    assert row["capacity_bits"] == rep.capacity_bits
    assert row["mean_cycles"] == rep.mean_cycles()


def test_pr_at_dl0_with_unit_costs_matches_plain_variant():
    # one-cycle CIs and one-cycle base ops make diversification invisible
    unit = CostModel.constant(mul=1, rem=1)
    bl, pr = get_benchmark("modexp", "BL"), get_benchmark("modexp", "PrBL")
    for key in (0x9D2B, 0x1111, 0xFFFF):
        args = bl.args_for(key)
        a = execute(bl.program, args, unit).total_cycles
        b = execute(pr.program, args, unit, CoProcessor(DiversityConfig(0, 3))).total_cycles
        assert a == b


def test_compare_solutions_table():
    base = ExperimentConfig("modexp", "BL", samples_per_key=30)
    configs = {v: replace(base, variant=v) for v in ("BL", "Cc", "Ca", "LR")}
    configs["PrLR"] = replace(base, variant="PrLR", dl=5)
    table = compare_solutions("modexp", configs)
    assert len(table["rows"]) == 5
    bl = table["rows"][0]
    assert bl["label"] == "BL" and bl["overhead_percent"] == 0.0


def test_cli_experiment_and_capacity(tmp_path, capsys):
    out, samples = tmp_path / "rep.json", tmp_path / "s.csv"
    argv = ["experiment", "--benchmark", "modexp", "--variant", "BL", "--samples", "20", "--out", str(out)]
    assert main(argv + ["--samples-out", str(samples)]) == 0
    first = out.read_text()
    assert main(argv) == 0
    assert out.read_text() == first
    assert main(["capacity", str(samples)]) == 0
    cap = json.loads(capsys.readouterr().out)
    assert cap["capacity_bits"] == pytest.approx(json.loads(first)["results"]["capacity"]["capacity_bits"])


def test_cli_sweep_is_deterministic(tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for path, workers in zip(paths, ("1", "2")):
        argv = ["sweep", "--benchmark", "mulmod16", "--variant", "PrBL", "--dls", "0-2", "--samples", "20"]
        assert main(argv + ["--workers", workers, "--out", str(path)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_cli_transform(tmp_path, capsys):
    src = tmp_path / "f.ir"
    src.write_text("func @f(a, b) critical {\n  beq b, 0, Lj\n  mul a, a, b\nLj:\n  ret a\n}\n")
    assert main(["transform", str(src), "--pass", "cond-assign"]) == 0
    out = capsys.readouterr()
    assert "beq" not in out.out
    assert json.loads(out.err)["regions_matched"] == 1


def test_cli_reports_syntax_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ir"
    bad.write_text("func @f() { jmp nowhere }")
    assert main(["run", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
