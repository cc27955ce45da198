import csv
import json

import numpy as np
import pytest

from fastddc import harness
from fastddc.estimator import EstimateResult
from fastddc.harness import (
    TABLE_FILES,
    McConfig,
    child_seed,
    component_names,
    load_records,
    read_table,
    record_name,
    report_rmse,
    report_runtime,
    run_experiment,
    scaled_rmse,
    write_reports,
    write_table,
)

TIMING = ("wall_clock", "per_init_seconds", "seconds")


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _record(n, rep, target="H", tilde=None, hat=None, star=None, clock=None, per=None):
    zero = [0.0] * 11
    return {
        "replication": rep,
        "n": n,
        "target": target,
        "child_seed": 1,
        "status": "ok",
        "theta_tilde": zero if tilde is None else tilde,
        "theta_hat": zero if hat is None else hat,
        "theta_star": zero if star is None else star,
        "wall_clock": clock or {"theta_tilde": 1.0, "theta_hat": 2.0, "theta_star": 10.0},
        "per_init_seconds": per or {"theta_tilde": [0.5, 0.5], "theta_star": [1.0, 3.0]},
    }


def _fake_estimate(panel, config):
    # cheap deterministic stand-in for the estimator: summary statistics of the panel
    base = [float(panel.A.mean()), float(panel.N.mean())] + [float(c) for c in panel.W.mean(axis=(0, 1))[None]] * 9
    return EstimateResult(
        target=config.target,
        theta_tilde=base,
        theta_hat=[b + 1e-3 for b in base],
        theta_star=[b + 2e-3 for b in base],
        nuisance={},
        loglik={},
        wall_clock={"theta_tilde": 1.0, "theta_hat": 2.0, "theta_star": 5.0},
        per_init_seconds={"theta_tilde": [0.1], "theta_star": [0.2]},
        newton_trace=[],
        retry_count=0,
        search_dim={},
        diagnostics={"seed": config.seed},
    )


def test_config_validation():
    with pytest.raises(ValueError):
        McConfig(replications=0)
    with pytest.raises(ValueError):
        McConfig(sample_sizes=(1, 100))
    with pytest.raises(ValueError):
        McConfig(targets=("GMM",))
    with pytest.raises(ValueError):
        McConfig.from_dict({"replicates": 3})
    with pytest.raises(ValueError):
        McConfig(estimator={"L": 0})


def test_config_json_roundtrip(tmp_path):
    cfg = McConfig(sample_sizes=(50,), replications=2, targets=("h",), estimator={"L": 3})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = McConfig.from_json(path)
    assert back.targets == ("H",) and back.dgp == cfg.dgp and back.estimator == {"L": 3}
    est = back.estimator_config("H", 11)
    assert est.L == 3 and est.seed == 11


def test_child_seed_stable_and_distinct():
    assert child_seed(20240611, 100, 3) == child_seed(20240611, 100, 3)
    seeds = {child_seed(20240611, n, r) for n in (100, 200) for r in range(50)}
    assert len(seeds) == 100
    assert all(0 <= s < 2**63 for s in seeds)
    assert child_seed(1, 100, 0) != child_seed(2, 100, 0)


def test_record_name():
    assert record_name(3, 100, "H") == "rep0003_n100_H.json"


def test_runtime_single_record_means():
    rec = _record(100, 0)
    t1, t2 = report_runtime([rec])
    assert t1 == [(100, "H", "theta_tilde", 1.0), (100, "H", "theta_hat", 2.0), (100, "H", "theta_star", 10.0)]
    assert t2 == [(100, "H", "theta_tilde", 0.5), (100, "H", "theta_star", 2.0)]
    with pytest.raises(ValueError):
        report_runtime([])


def test_runtime_skips_failed_records():
    bad = {"replication": 1, "n": 100, "target": "H", "child_seed": 1, "status": "failed"}
    t1, _ = report_runtime([_record(100, 0), bad])
    assert t1[0][3] == 1.0


def test_rmse_zero_for_identical_estimates():
    recs = [_record(100, r, tilde=[r] * 11, hat=[r] * 11, star=[r] * 11) for r in range(3)]
    t3, t4 = report_rmse(recs)
    assert len(t3) == 11 and all(v == 0.0 for *_, v in t3 + t4)


def test_rmse_matches_hand_arithmetic():
    rng = np.random.default_rng(0)
    recs = []
    for n in (100, 200):
        for r in range(4):
            star = rng.normal(size=11).tolist()
            hat = (np.array(star) + rng.normal(0, 0.01, 11)).tolist()
            tilde = (np.array(star) + rng.normal(0, 0.1, 11)).tolist()
            recs.append(_record(n, r, tilde=tilde, hat=hat, star=star))
    t3, t4 = report_rmse(recs)
    names = component_names(9)
    for table, est in ((t3, "theta_hat"), (t4, "theta_tilde")):
        got = {(n, c): v for n, _, c, v in table}
        for n in (100, 200):
            cell = [r for r in recs if r["n"] == n]
            for k, name in enumerate(names):
                sq = [n * (r[est][k] - r["theta_star"][k]) ** 2 for r in cell]
                assert got[(n, name)] == pytest.approx(np.sqrt(sum(sq) / len(sq)), rel=1e-14)


def test_rmse_skips_thin_cells():
    t3, t4 = report_rmse([_record(100, 0)])
    assert t3 == [] and t4 == []
    with pytest.raises(ValueError):
        scaled_rmse([{**_record(100, 0), "theta_star": None}], "theta_hat")


def test_table_floats_round_trip(tmp_path):
    x = 0.1 + 0.2
    path = tmp_path / "t.csv"
    write_table([(100, "H", "theta_fc", x)], path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["n", "target", "component", "value"]
    assert rows[1][3] == "0.30000000000000004"
    assert read_table(path) == [(100, "H", "theta_fc", x)]


def test_write_reports_creates_four_tables(tmp_path):
    recs = [_record(n, r) for n in (100, 200) for r in range(2)]
    paths = write_reports(recs, tmp_path)
    assert [p.name for p in paths] == list(TABLE_FILES)
    assert all(p.exists() for p in paths)


@pytest.fixture
def fake_estimator(monkeypatch):
    monkeypatch.setattr(harness, "fast_estimate", _fake_estimate)


def test_experiment_resumes_to_same_records(tmp_path, fake_estimator):
    cfg = McConfig(sample_sizes=(20, 30), replications=3, T=4, targets=("H", "EM"), output_dir=str(tmp_path / "a"))
    first = run_experiment(cfg)
    assert len(first) == 12
    victim = tmp_path / "a" / record_name(1, 30, "EM")
    victim.unlink()
    (tmp_path / "a" / record_name(2, 20, "H")).unlink()
    assert run_experiment(cfg) == first
    index = list(csv.DictReader((tmp_path / "a" / "index.csv").open()))
    assert len(index) == 12 and {r["status"] for r in index} == {"ok"}
    assert {int(r["child_seed"]) for r in index} == {child_seed(cfg.master_seed, n, r) for n in (20, 30) for r in range(3)}


def test_experiment_records_failures(tmp_path, monkeypatch):
    def boom(panel, config):
        raise RuntimeError("no convergence")

    monkeypatch.setattr(harness, "fast_estimate", boom)
    cfg = McConfig(sample_sizes=(20,), replications=2, T=4, targets=("H",), output_dir=str(tmp_path))
    recs = run_experiment(cfg)
    assert [r["status"] for r in recs] == ["failed", "failed"]
    assert "no convergence" in recs[0]["error"]


def test_single_replication_end_to_end(tmp_path):
    est = {"opt_maxfun": 8, "L": 1, "starts_multiplier": 1}
    runs = []
    for sub in ("a", "b"):
        cfg = McConfig(sample_sizes=(50,), replications=1, T=8, targets=("H",), estimator=est, output_dir=str(tmp_path / sub))
        runs.append(run_experiment(cfg))
    (rec,) = runs[0]
    assert rec["status"] == "ok"
    for key in ("theta_tilde", "theta_hat", "theta_star"):
        assert len(rec[key]) == 11
    assert rec["wall_clock"]["theta_hat"] >= rec["wall_clock"]["theta_tilde"]
    a, b = (load_records(tmp_path / sub)[0] for sub in ("a", "b"))
    assert json.dumps(_strip_timing(a), sort_keys=True) == json.dumps(_strip_timing(b), sort_keys=True)
