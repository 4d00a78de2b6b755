"""
How well do the proxy ensembles know what they don't know?
==========================================================

A short campaign collects data round by round. Ensembles fitted on the
first n rounds are then scored on round n + 1: a calibration curve
(observed vs nominal coverage of Gaussian intervals) and per-point NLL.
Both conv1d and MLP regressors are compared.

Run:  python demos/uncertainty.py [--out runs/uncertainty]
"""
import argparse
from pathlib import Path

from metarlbo.bayesopt import Campaign, CampaignConfig
from metarlbo.bench.config import ExperimentConfig, dump_config
from metarlbo.bench.experiment import analyze_uncertainty
from metarlbo.oracles import OracleSpec

ap = argparse.ArgumentParser()
ap.add_argument("--out", type=Path, default=Path("runs/uncertainty"))
args = ap.parse_args()

cfg = CampaignConfig(OracleSpec("ising_alternating", "ABCD", 8), rounds=4, batch_size=100)
args.out.mkdir(parents=True, exist_ok=True)
(args.out / "config.ini").write_text(dump_config(ExperimentConfig(cfg)))
Campaign(cfg, args.out).run()

# train on rounds <= n, test on round n + 1, for every n
report = analyze_uncertainty(args.out)
for (arch, n), v in sorted(report.items()):
    curve = " ".join(f"{o:.2f}" for _, o in v["calibration"])
    print(f"{arch:6s} round {n}: coverage at 0.1..0.9 = {curve}; "
          f"NLL median {v['nll']['median']:.3f} (IQR {v['nll']['q1']:.3f}..{v['nll']['q3']:.3f})")
print(f"CSV files in {args.out}")
