"""
Does the meta-learned initialization matter?
============================================

The ablation trains Q=8 policies from scratch on the same proxy tasks and
draws 256 sequences from each (the same 2,048-sample budget as 32 x 64).
Everything else, including the round-0 batch, is shared with MetaRLBO.

Run:  python demos/ablation.py [--seeds 5]
"""
import argparse
import dataclasses

import numpy as np

from metarlbo.bayesopt import CampaignConfig, run_campaign
from metarlbo.metarl import GenPhaseConfig
from metarlbo.oracles import OracleSpec

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, default=5)
args = ap.parse_args()

oracle = OracleSpec("ising_alternating", "ABCD", 8)
finals = {"metarlbo": [], "policy_ensemble": []}
for seed in range(args.seeds):
    base = CampaignConfig(oracle, rounds=6, batch_size=100, master_seed=seed)
    ablation = dataclasses.replace(base, method="policy_ensemble",
                                   gen=GenPhaseConfig(Q=8, per_policy=256))
    for name, cfg in (("metarlbo", base), ("policy_ensemble", ablation)):
        trace = [r.cumulative_max for r in run_campaign(cfg)]
        finals[name].append(trace)
        print(f"seed {seed} {name:16s} {[int(v) for v in trace]}")

for name, traces in finals.items():
    print(f"{name:16s} median curve {np.median(np.array(traces), axis=0).tolist()}")
