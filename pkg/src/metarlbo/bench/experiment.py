"""Multi-seed experiments, aggregate curves, summary tables and surrogate analysis.

Layout under an output root::

    <hash>-seed<k>/     one campaign: rounds.csv, dataset.tsv, manifest.json,
                        config.ini, theta0 checkpoints, analysis CSVs
    <hash>-report/      aggregate.csv, summary.csv, config_diff.txt, report.json

``<hash>`` digests every campaign setting except the seed.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bayesopt import Campaign, CampaignConfig, RoundRecord, config_to_dict, derive_rng
from ..seqcore import Dataset
from ..surrogate import (RegressorSpec, TrainConfig, build_ensemble, calibration_curve,
                         ensemble_nll, nll_summary)
from .config import AnalysisSettings, ExperimentConfig, dump_config, load_config

log = logging.getLogger(__name__)

# Published Ising20 results (final cumulative max), reported alongside ours
# for orientation only; they come from a different scoring normalization.
REFERENCE_ROWS = [
    ("Single Mutant", 14.67, 14.67),
    ("Regularized Evol", 14.67, 14.67),
    ("BO + Single Mutant", 15.33, 13.67),
    ("BO + Regularized Evol", 16.67, 15.00),
    ("BO + DES", 16.67, 16.33),
    ("MetaRLBO", 18.00, 17.00),
]
SUMMARY_COLUMNS = ("method", "task", "acquisition", "proxy", "seeds", "final_min",
                   "final_median", "final_max", "source")


def task_name(cfg: CampaignConfig) -> str:
    o = cfg.oracle
    size = f"{o.min_length}-{o.length}" if o.variable_length else str(o.length)
    return f"{o.kind}:L{size}:A{len(o.alphabet)}"


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: dict[int, list[RoundRecord]] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)
    run_dirs: dict[int, Path] = field(default_factory=dict)
    tag: str = ""

    def final_values(self) -> np.ndarray:
        return np.array([recs[-1].cumulative_max for recs in self.runs.values()])

    def curve(self) -> np.ndarray:
        """(rounds, 3) array of min / median / max cumulative max across seeds."""
        return aggregate_curve([[r.cumulative_max for r in recs] for recs in self.runs.values()])

    def summary_row(self) -> dict[str, object]:
        c = self.config.campaign
        finals = self.final_values()
        stats = (finals.min(), np.median(finals), finals.max()) if len(finals) else (np.nan,) * 3
        return {"method": c.method, "task": task_name(c), "acquisition": c.acquisition.kind,
                "proxy": c.tasks.proxy_arch, "seeds": len(finals), "final_min": stats[0],
                "final_median": stats[1], "final_max": stats[2], "source": "measured"}


def aggregate_curve(traces: list[list[float]]) -> np.ndarray:
    if not traces:
        return np.zeros((0, 3))
    n = min(len(t) for t in traces)
    m = np.array([t[:n] for t in traces], dtype=float)
    return np.stack([m.min(axis=0), np.median(m, axis=0), m.max(axis=0)], axis=1)


def reference_rows(cfg: CampaignConfig) -> list[dict[str, object]]:
    """Published rows, attached only to the task they were measured on."""
    o = cfg.oracle
    if o.kind != "ising_alternating" or o.length != 20 or len(o.alphabet) != 20:
        return []
    rows = []
    for method, ucb, post in REFERENCE_ROWS:
        for acq, value in (("ucb", ucb), ("posterior_mean", post)):
            rows.append({"method": method, "task": task_name(cfg), "acquisition": acq,
                         "proxy": "", "seeds": "", "final_min": "", "final_median": value,
                         "final_max": "", "source": "published"})
    return rows


def config_diff(a, b, prefix: str = "") -> list[tuple[str, object, object]]:
    """Paths at which two (nested) config dataclasses differ."""
    da = a if isinstance(a, dict) else config_to_dict(a)
    db = b if isinstance(b, dict) else config_to_dict(b)
    out = []
    for key in sorted(set(da) | set(db)):
        va, vb = da.get(key), db.get(key)
        path = f"{prefix}{key}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out += config_diff(va, vb, path + ".")
        elif va != vb:
            out.append((path, va, vb))
    return out


def run_dir_for(root: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return root / f"{cfg.hash()}-seed{seed}"


def _run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> list[RoundRecord]:
    out.mkdir(parents=True, exist_ok=True)
    seeded = dataclasses.replace(cfg, campaign=cfg.campaign.with_seed(seed))
    (out / "config.ini").write_text(dump_config(seeded))
    return Campaign(seeded.campaign, out).run()


def run_experiment(cfg: ExperimentConfig | str | Path, out_root: str | Path = "runs",
                   reference: ExperimentConfig | None = None, workers: int = 1,
                   tag: str = "") -> ExperimentReport:
    """Run every seed of `cfg`; failed seeds are recorded and the rest continue."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    root = Path(out_root)
    report = ExperimentReport(cfg, tag=tag or cfg.experiment.name)
    seeds = list(cfg.experiment.seeds)
    dirs = {s: run_dir_for(root, cfg, s) for s in seeds}
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = {s: pool.submit(_run_seed, cfg, s, dirs[s]) for s in seeds}
            results = {}
            for s, fut in futures.items():
                try:
                    results[s] = fut.result()
                except Exception as err:
                    results[s] = err
    else:
        results = {}
        for s in seeds:
            try:
                results[s] = _run_seed(cfg, s, dirs[s])
            except Exception as err:
                results[s] = err
    for s in seeds:
        if isinstance(results[s], Exception):
            report.failures[s] = str(results[s])
            log.error("seed %d failed: %s", s, results[s])
        else:
            report.runs[s] = results[s]
            report.run_dirs[s] = dirs[s]
    write_report(report, root, reference)
    return report


def write_report(report: ExperimentReport, root: Path,
                 reference: ExperimentConfig | None = None) -> Path:
    out = root / f"{report.config.hash()}-report"
    out.mkdir(parents=True, exist_ok=True)
    _write_aggregate(out / "aggregate.csv", report.curve(), len(report.runs))
    rows = [report.summary_row()] + reference_rows(report.config.campaign)
    _write_rows(out / "summary.csv", SUMMARY_COLUMNS, rows)
    if reference is not None:
        diff = config_diff(reference.campaign, report.config.campaign)
        lines = [f"{path}: {a!r} -> {b!r}" for path, a, b in diff if path != "master_seed"]
        (out / "config_diff.txt").write_text("\n".join(lines) + "\n")
    meta = {"tag": report.tag, "hash": report.config.hash(),
            "note": "bands are min/median/max of cumulative max across seeds",
            "runs": {str(s): str(d) for s, d in report.run_dirs.items()},
            "failures": {str(s): msg for s, msg in report.failures.items()}}
    (out / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def _write_aggregate(path: Path, curve: np.ndarray, n_seeds: int) -> None:
    rows = [{"round": r, "seeds": n_seeds, "min": lo, "median": med, "max": hi}
            for r, (lo, med, hi) in enumerate(curve)]
    _write_rows(path, ("round", "seeds", "min", "median", "max"), rows)


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_rounds(run_dir: str | Path) -> list[dict[str, float]]:
    with open(Path(run_dir) / "rounds.csv") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def plot_data(path: str | Path) -> list[Path]:
    """Re-emit plot CSVs from a run directory or a report directory."""
    path = Path(path)
    if (path / "rounds.csv").exists():
        rows = read_rounds(path)
        out = path / "curve.csv"
        _write_rows(out, ("round", "cum_max", "batch_max", "batch_mean"),
                    [{"round": int(r["round"]), "cum_max": r["cum_max"],
                      "batch_max": r["batch_max"], "batch_mean": r["batch_mean"]} for r in rows])
        return [out]
    if (path / "report.json").exists():
        meta = json.loads((path / "report.json").read_text())
        traces = [[r["cum_max"] for r in read_rounds(d)] for d in meta["runs"].values()]
        out = path / "aggregate.csv"
        _write_aggregate(out, aggregate_curve(traces), len(traces))
        return [out]
    raise FileNotFoundError(f"{path}: neither a run directory (rounds.csv) "
                            "nor a report directory (report.json)")


def analyze_uncertainty(run_dir: str | Path, rounds: int | list[int] | None = None,
                        settings: AnalysisSettings | None = None) -> dict:
    """Fit surrogates on rounds <= n, score calibration and NLL on round n + 1.

    Writes ``calibration_<arch>_round<n>.csv`` and ``nll_<arch>_round<n>.csv``
    into the run directory and returns the per-(arch, round) summaries.
    """
    run_dir = Path(run_dir)
    data = Dataset.load(run_dir / "dataset.tsv")
    cfg = load_config(run_dir / "config.ini") if (run_dir / "config.ini").exists() else None
    settings = settings or (cfg.analysis if cfg else AnalysisSettings())
    train_cfg = cfg.campaign.tasks.proxy_train if cfg else TrainConfig()
    seed = cfg.campaign.master_seed if cfg else 0
    last = max(data.rounds())
    if rounds is None:
        rounds = list(range(last))
    elif isinstance(rounds, int):
        rounds = [rounds]
    for n in rounds:
        if n < 0 or n + 1 > last:
            raise ValueError(f"round {n} needs rounds 0..{n + 1}; {run_dir} has 0..{last}")
    length = max(len(s) for s in data.sequences())
    report = {}
    for n in rounds:
        train, test = data.upto_round(n), list(data.in_round(n + 1))
        for k, arch in enumerate(settings.archs):
            spec = RegressorSpec(arch, length, data.alphabet.size)
            ens = build_ensemble(spec, train, settings.members, settings.p, train_cfg,
                                 derive_rng(seed, 100, n, k))
            curve = calibration_curve(ens, test)
            nll = ensemble_nll(ens, test)
            _write_rows(run_dir / f"calibration_{arch}_round{n:02d}.csv", ("expected", "observed"),
                        [{"expected": e, "observed": o} for e, o in curve])
            _write_rows(run_dir / f"nll_{arch}_round{n:02d}.csv", ("index", "nll"),
                        [{"index": i, "nll": v} for i, v in enumerate(nll)])
            report[(arch, n)] = {"calibration": curve, "nll": nll_summary(nll)}
    rows = [{"arch": a, "round": n, **v["nll"]} for (a, n), v in sorted(report.items())]
    _write_rows(run_dir / "nll_summary.csv",
                ("arch", "round", "min", "q1", "median", "q3", "max", "mean"), rows)
    return report
