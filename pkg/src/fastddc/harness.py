"""Monte Carlo harness: replicated panels, all estimators per replication, summary tables.

Each (replication, n, target) produces one JSON record in the output
directory.  Existing records are skipped, so an interrupted run resumes
where it stopped.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dp import EntryModelParams, default_params, simulate_panel
from .estimator import TARGETS, EstimatorConfig, fast_estimate

log = logging.getLogger(__name__)

ESTIMATES = ("theta_tilde", "theta_hat", "theta_star")
INDEX_FIELDS = ("replication", "n", "target", "child_seed", "status", "file")


@dataclass
class McConfig:
    sample_sizes: tuple = (100, 200)
    replications: int = 10
    T: int = 8
    dgp: EntryModelParams = field(default_factory=default_params)
    targets: tuple = ("H", "EM")
    estimator: dict = field(default_factory=dict)
    master_seed: int = 20240611
    output_dir: str = "mc_records"
    jobs: int = 1

    def __post_init__(self):
        self.sample_sizes = tuple(int(n) for n in self.sample_sizes)
        self.targets = tuple(t.upper() for t in self.targets)
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not self.sample_sizes or min(self.sample_sizes) < 2:
            raise ValueError("sample sizes must be at least 2")
        if not self.targets or any(t not in TARGETS for t in self.targets):
            raise ValueError(f"targets must be a non-empty subset of {TARGETS}")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        EstimatorConfig.from_dict(self.estimator)  # validate early

    def estimator_config(self, target, seed):
        return EstimatorConfig.from_dict({**self.estimator, "target": target, "seed": seed})

    def to_dict(self):
        d = asdict(self)
        d["dgp"] = json.loads(self.dgp.to_json())
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "dgp" in d and not isinstance(d["dgp"], EntryModelParams):
            d["dgp"] = EntryModelParams.from_dict(d["dgp"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def child_seed(master_seed, n, replication):
    """Replication seed derived from the master seed; stable across runs and job layouts."""
    return int(np.random.SeedSequence([int(master_seed), int(n), int(replication)]).generate_state(1, np.uint64)[0] >> 1)


def record_name(replication, n, target):
    return f"rep{replication:04d}_n{n}_{target}.json"


def _dump(obj, path):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


def run_replication(config, n, replication, targets=None):
    """Simulate one panel and run every requested target on it; returns the records."""
    targets = config.targets if targets is None else targets
    seed = child_seed(config.master_seed, n, replication)
    panel = simulate_panel(config.dgp, n, config.T, seed)
    out = []
    for target in targets:
        rec = {"replication": replication, "n": n, "target": target, "child_seed": seed}
        try:
            res = fast_estimate(panel, config.estimator_config(target, seed))
            rec.update(status="ok", error=None, **res.to_dict())
        except Exception as exc:  # recorded, not fatal
            log.warning("replication %d, n=%d, %s failed: %s", replication, n, target, exc)
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
        out.append(rec)
    return out


def _job(config, n, replication, targets, out_dir):
    recs = run_replication(config, n, replication, targets)
    for rec in recs:
        _dump(rec, out_dir / record_name(replication, n, rec["target"]))
    return recs


def run_experiment(config):
    """Run every missing (replication, n, target) cell; returns all records in the directory."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump(config.to_dict(), out_dir / "config.json")
    todo = []
    for n in config.sample_sizes:
        for rep in range(config.replications):
            missing = tuple(t for t in config.targets if not (out_dir / record_name(rep, n, t)).exists())
            if missing:
                todo.append((n, rep, missing))
    log.info("%d replication jobs to run", len(todo))
    if config.jobs == 1:
        for n, rep, missing in todo:
            _job(config, n, rep, missing, out_dir)
    else:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            futures = [pool.submit(_job, config, n, rep, missing, out_dir) for n, rep, missing in todo]
            for fut in as_completed(futures):
                fut.result()
    records = [
        r
        for r in load_records(out_dir)
        if r["n"] in config.sample_sizes and r["target"] in config.targets and r["replication"] < config.replications
    ]
    write_index(records, out_dir / "index.csv")
    failed = [r for r in records if r["status"] != "ok"]
    if failed:
        log.warning("%d failed records: %s", len(failed), [record_name(r["replication"], r["n"], r["target"]) for r in failed])
    return records


def load_records(out_dir):
    records = []
    for path in sorted(Path(out_dir).glob("rep*_n*_*.json")):
        with open(path) as fh:
            records.append(json.load(fh))
    records.sort(key=lambda r: (r["n"], r["target"], r["replication"]))
    return records


def write_index(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_FIELDS)
        for r in records:
            w.writerow([r["replication"], r["n"], r["target"], r["child_seed"], r["status"], record_name(r["replication"], r["n"], r["target"])])


# --------------------------------------------------------------------------
# tables


def fmt(x):
    return format(float(x), ".17g")


def write_table(rows, path):
    """CSV with columns (n, target, component, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "target", "component", "value"])
        for n, target, comp, value in rows:
            w.writerow([n, target, comp, fmt(value)])


def read_table(path):
    with open(path, newline="") as fh:
        return [(int(r["n"]), r["target"], r["component"], float(r["value"])) for r in csv.DictReader(fh)]


def _cells(records):
    cells = {}
    for r in records:
        if r.get("status") == "ok":
            cells.setdefault((r["n"], r["target"]), []).append(r)
    return dict(sorted(cells.items()))


def report_runtime(records):
    """Mean total wall time per estimator, and mean time per initialization, by (n, target).

    Returns ``(table1, table2)`` as lists of ``(n, target, component, seconds)``.
    """
    if not records:
        raise ValueError("no records")
    t1, t2 = [], []
    for (n, target), recs in _cells(records).items():
        for est in ESTIMATES:
            vals = [r["wall_clock"][est] for r in recs if est in r["wall_clock"]]
            if vals:
                t1.append((n, target, est, float(np.mean(vals))))
        for est in ("theta_tilde", "theta_star"):
            per = [s for r in recs for s in r["per_init_seconds"].get(est, [])]
            if per:
                t2.append((n, target, est, float(np.mean(per))))
    return t1, t2


def component_names(d_w):
    return [f"theta_w{k + 1}" for k in range(d_w)] + ["theta_fc", "theta_ec"]


def scaled_rmse(records, estimate, reference="theta_star"):
    """sqrt(mean over replications of n * (estimate - reference)^2), per component."""
    recs = [r for r in records if r.get(reference) is not None]
    if len(recs) < 1:
        raise ValueError("no records with the reference estimate")
    diff = np.array([np.asarray(r[estimate]) - np.asarray(r[reference]) for r in recs])
    n = np.array([r["n"] for r in recs], dtype=float)
    return np.sqrt(np.mean(n[:, None] * diff**2, axis=0))


def report_rmse(records):
    """sqrt(n)-scaled RMSE of theta_hat - theta_star and theta_tilde - theta_star.

    Returns ``(table3, table4)``; cells with fewer than two records are skipped.
    """
    t3, t4 = [], []
    for (n, target), recs in _cells(records).items():
        recs = [r for r in recs if r.get("theta_star") is not None]
        if len(recs) < 2:
            log.warning("n=%d %s: fewer than two records with theta_star, skipped", n, target)
            continue
        names = component_names(len(recs[0]["theta_hat"]) - 2)
        for table, est in ((t3, "theta_hat"), (t4, "theta_tilde")):
            for name, val in zip(names, scaled_rmse(recs, est)):
                table.append((n, target, name, float(val)))
    return t3, t4


TABLE_FILES = ("table1_runtime.csv", "table2_runtime_per_init.csv", "table3_rmse_newton.csv", "table4_rmse_step1.csv")


def write_reports(records, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = (*report_runtime(records), *report_rmse(records))
    paths = []
    for rows, name in zip(tables, TABLE_FILES):
        write_table(rows, out_dir / name)
        paths.append(out_dir / name)
    return paths
