import json
from dataclasses import replace

import numpy as np
import pytest

from mape_unlearn.cli import main
from mape_unlearn.config import ExperimentConfig, preset, splitmix64, sub_seed
from mape_unlearn.evalattack import METRIC_FIELDS, evaluate
from mape_unlearn.harness import (
    ExperimentError,
    RunRecord,
    export_plotdata,
    fresh_samples,
    make_data,
    read_metrics,
    read_plotdata,
    run_experiment,
)
from mape_unlearn.maskselect import load_mask
from mape_unlearn.tinyformer import TrainHParams, load_state
from mape_unlearn.unlearn import UnlearnHParams

from conftest import TINY_MODEL, TINY_TASK


def tiny(scenario="single", **over):
    cfg = ExperimentConfig(model=TINY_MODEL, task=TINY_TASK,
                           train=TrainHParams(epochs=2, batch_size=16, lr=0.05),
                           unlearn=UnlearnHParams(method="GA", lr=0.05, epochs=1, batch_size=8,
                                                  clip=1.0, mask_source="MLF"),
                           scenario=scenario)
    if scenario in ("successive", "batch"):
        cfg = replace(cfg, unlearn=UnlearnHParams(method="SO", lr=1e-3, mask_source="MLR"))
        cfg = replace(cfg, successive=replace(cfg.successive, num_requests=3))
    if scenario == "relearn":
        cfg = replace(cfg, relearn=replace(cfg.relearn, epochs=2))
    return replace(cfg, **over)


def test_splitmix_reference_values():
    # first outputs of the reference generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4
    seeds = {sub_seed(7, p) for p in ("data", "init", "unlearn", "attack")}
    assert len(seeds) == 4


def test_config_roundtrip_and_hash(tmp_path):
    cfg = tiny(sparsities=[0.5, 0.9], seed=3)
    p = tmp_path / "c.json"
    cfg.save(p)
    back = ExperimentConfig.load(p)
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    assert replace(cfg, seed=4).config_hash() == cfg.config_hash()
    assert replace(cfg, sparsities=[0.9]).config_hash() != cfg.config_hash()
    assert cfg.run_name() == f"{cfg.config_hash()}-s3"
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        tiny(scenario="nope")


def test_presets():
    assert preset("successive").unlearn.method == "SO"
    assert preset("sweep").sparsities == [0.0, 0.5, 0.7, 0.9, 0.95]
    assert preset().model.module_count == 136


def test_single_run_artifacts_and_replay(tmp_path):
    cfg = tiny()
    rec = run_experiment(cfg, tmp_path)
    d = tmp_path / cfg.run_name()
    for name in ("config.json", "metrics.csv", "record.json", "theta_star.bin"):
        assert (d / name).exists()
    rows = read_metrics(d / "metrics.csv")
    assert [r["phase"] for r in rows] == ["original", "unlearned"]
    assert rows[1]["method"] == "MAPE-GA"
    assert "wall_time" not in (d / "metrics.csv").read_text().splitlines()[0]
    # replayability: stored models re-evaluate to the recorded numbers
    bundle = make_data(cfg)
    star = load_state(d / "theta_star.bin")
    key = next(k for k in rec.model_paths if k.startswith("MAPE-GA"))
    out = load_state(d / rec.model_paths[key])
    rep = evaluate(out, bundle.forget, bundle.retain, bundle.test, reference=star)
    assert rep.metrics() == {k: rows[1][k] for k in METRIC_FIELDS}
    mask = load_mask(d / rec.mask_paths[key])
    assert mask.active_count() == int(0.1 * TINY_MODEL.module_count + 1e-9)


def test_rerun_is_bit_identical(tmp_path):
    cfg = tiny("sweep", sparsities=[0.0, 0.9])
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    run_experiment(cfg, tmp_path / "b")  # overwrite in place, now with a cached model
    a = (tmp_path / "a" / cfg.run_name() / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / cfg.run_name() / "metrics.csv").read_bytes()
    assert a == b
    assert len(read_metrics(tmp_path / "a" / cfg.run_name() / "metrics.csv")) == 3


def test_rt_has_no_mask(tmp_path):
    cfg = tiny(unlearn=UnlearnHParams(method="RT", mask_source="MLF"))
    rec = run_experiment(cfg, tmp_path)
    assert rec.mask_paths == {}
    assert rec.metrics[-1]["method"] == "RT"


def test_successive_and_batch_rows(tmp_path):
    rec = run_experiment(tiny("successive"), tmp_path)
    steps = [m for m in rec.metrics if m["phase"] == "successive"]
    assert [m["step"] for m in steps] == [1, 2, 3, 1, 2, 3]
    header = (tmp_path / rec.run_dir.split("/")[-1] / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,method,sparsity,forget_acc,retain_acc,test_acc,mia,params_changed_fraction"
    stored = run_experiment(tiny("successive", successive=replace(
        tiny("successive").successive, mode="stored-info", refine=True)), tmp_path)
    assert len(stored.trajectory) == 6
    batch = run_experiment(tiny("batch"), tmp_path)
    assert [m["method"] for m in batch.metrics[1:]] == ["SO", "MAPE-SO"]


def test_relearn_rows(tmp_path):
    rec = run_experiment(tiny("relearn"), tmp_path)
    assert {r["method"] for r in rec.relearn} == {"GA", "MAPE-GA"}
    assert len(rec.relearn) == 4
    assert len(rec.recovery) == 2


def test_fresh_relearn_source(tmp_path):
    cfg = tiny("relearn")
    cfg = replace(cfg, relearn=replace(cfg.relearn, source="fresh"))
    b = make_data(cfg)
    fresh = fresh_samples(cfg, 10)
    assert len(fresh) == 10
    assert not set(fresh.sample_ids) & set(np.concatenate([b.train.sample_ids, b.test.sample_ids]))
    rec = run_experiment(cfg, tmp_path)
    assert len(rec.recovery) == 2
    with pytest.raises(ValueError):
        replace(cfg.relearn, source="forget")


def test_successive_masks_cover_final_model(tmp_path):
    rec = run_experiment(tiny("successive"), tmp_path)
    keys = sorted(k for k in rec.mask_paths if k.startswith("MAPE-SO_t"))
    assert keys == ["MAPE-SO_t01", "MAPE-SO_t02", "MAPE-SO_t03"]


def test_failure_is_recorded_with_phase(tmp_path):
    cfg = tiny(unlearn=UnlearnHParams(method="GA", mask_source="file", mask_path="/nonexistent"))
    with pytest.raises(ExperimentError) as err:
        run_experiment(cfg, tmp_path)
    assert err.value.phase == "select-mask"
    rec = json.loads((tmp_path / cfg.run_name() / "record.json").read_text())
    assert rec["error"]["phase"] == "select-mask"


def test_export_roundtrip_and_median(tmp_path):
    recs = [run_experiment(tiny("sweep", seed=s, sparsities=[0.9]), tmp_path) for s in (0, 1)]
    path = tmp_path / "plot.csv"
    rows = export_plotdata(recs, path)
    assert len(rows) == 2 * 2 * len(METRIC_FIELDS)
    back = read_plotdata(path)
    values = {(r["seed"], r["phase"], r["metric"]): r["value"] for r in back}
    for rec in recs:
        for m in rec.metrics:
            for k in METRIC_FIELDS:
                assert values[(rec.seed, m["phase"], k)] == m[k]
    for r in back:
        group = [x["value"] for x in back if (x["phase"], x["method"], x["metric"]) ==
                 (r["phase"], r["method"], r["metric"])]
        assert r["median"] == float(np.median(group))
    single = export_plotdata(recs[:1], tmp_path / "one.csv")
    assert len(single) == len(recs[0].metrics) * len(METRIC_FIELDS)
    with pytest.raises(ValueError):
        export_plotdata([], tmp_path / "none.csv")
    broken = RunRecord(**{**recs[0].__dict__, "metrics": [{"phase": "x"}]})
    with pytest.raises(ValueError):
        export_plotdata([recs[0], broken], tmp_path / "bad.csv")


def test_cli_end_to_end(tmp_path, monkeypatch, capsys):
    cfg = tiny()
    cp = tmp_path / "cfg.json"
    cfg.save(cp)
    out = tmp_path / "out"
    monkeypatch.setenv("MAPE_OUT_DIR", str(out))
    assert main(["train", "--config", str(cp)]) == 0
    model = out / cfg.run_name() / "theta_star.bin"
    assert model.exists()
    assert main(["select-mask", "--config", str(cp), "--model", str(model),
                 "--source", "MLR", "--output", str(tmp_path / "m.txt")]) == 0
    assert main(["unlearn", "--config", str(cp), "--model", str(model),
                 "--mask", str(tmp_path / "m.txt"), "--output", str(tmp_path / "u.bin")]) == 0
    assert main(["evaluate", "--config", str(cp), "--model", str(tmp_path / "u.bin"),
                 "--reference", str(model), "--output", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text().startswith("model,forget_acc")
    assert main(["sweep", "--config", str(cp), "--sparsity", "0.5,0.9", "--seeds", "0,1"]) == 0
    runs = sorted(p for p in out.iterdir() if p.name != "_cache" and (p / "record.json").exists())
    assert main(["export", *map(str, runs), "--output", str(tmp_path / "plot.csv")]) == 0
    assert main(["unlearn", "--config", str(cp), "--method", "BOGUS"]) == 1
    capsys.readouterr()


def test_cli_scenarios(tmp_path, monkeypatch):
    monkeypatch.setenv("MAPE_OUT_DIR", str(tmp_path))
    cp = tmp_path / "s.json"
    tiny("successive").save(cp)
    assert main(["successive", "--config", str(cp), "--requests", "2"]) == 0
    assert main(["successive", "--config", str(cp), "--batch"]) == 0
    rp = tmp_path / "r.json"
    tiny("relearn").save(rp)
    assert main(["relearn", "--config", str(rp), "--epochs", "1"]) == 0
