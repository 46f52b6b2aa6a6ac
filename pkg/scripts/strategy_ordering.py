"""Compare fusion strategies and probe the hard modality's encoder, averaged over seeds.

    python3 scripts/strategy_ordering.py --config configs/easy_hard.json --seeds 0-4 \
        --strategies JT,FusT*,FusT,DF --out runs/ordering.csv
"""
import argparse
import csv

import numpy as np

from avfuse.cli import parse_seeds
from avfuse.config import resolve_config
from avfuse.data.synthetic import generate_synthetic
from avfuse.fusion import run_strategy
from avfuse.fusion.probe import linear_probe
from avfuse.fusion.strategies import STRATEGIES


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--strategies", default="JT,FusT*,FusT")
    p.add_argument("--hard", default="v", choices=("a", "v"), help="modality whose encoder is probed")
    p.add_argument("--out")
    a = p.parse_args()
    strategies = a.strategies.split(",")
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        p.error(f"unknown strategies {sorted(unknown)}")
    base = resolve_config(a.config, a.set)
    records = []
    for seed in parse_seeds(a.seeds):
        cfg = base.with_seed(seed)
        data = generate_synthetic(cfg.synthetic_spec())
        k = data.train.n_classes
        configs = {m: cfg.model_config(m, data.train.modality(m).shape[1:], k) for m in "av"}
        probe = lambda enc: linear_probe(enc, data.train.modality(a.hard), data.train.labels,
                                         data.test.modality(a.hard), data.test.labels)
        for s in strategies:
            res = run_strategy(cfg.section("plan", strategy=s), data, cfg.section("masking"), configs)
            rec = {"seed": seed, "strategy": s, "accuracy": res.test["accuracy"], "map": res.test["map"],
                   "probe_hard": probe(res.encoders[a.hard]) if s != "DF" else float("nan"),
                   "probe_hard_stage1": probe(res.stage1[a.hard].encoder) if res.stage1 else float("nan")}
            records.append(rec)
            print(f"seed {seed} {s:>9}: accuracy {rec['accuracy']:.4f}, probe[{a.hard}] {rec['probe_hard']:.4f}",
                  flush=True)
    print("mean over seeds:")
    for s in strategies:
        rows = [r for r in records if r["strategy"] == s]
        print(f"  {s:>9}: accuracy {100 * np.mean([r['accuracy'] for r in rows]):.2f}, "
              f"probe[{a.hard}] {100 * np.mean([r['probe_hard'] for r in rows]):.2f}, "
              f"stage-1 probe {100 * np.mean([r['probe_hard_stage1'] for r in rows]):.2f}")
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(records[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(records)


if __name__ == "__main__":
    main()
