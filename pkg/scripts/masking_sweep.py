"""FusT test accuracy as a function of the masking strengths rho_a and rho_v.

    python3 scripts/masking_sweep.py --config configs/easy_hard.json --seeds 0-2 --rho 0,0.5,1.0
"""
import argparse

import numpy as np

from avfuse.cli import parse_seeds
from avfuse.config import resolve_config
from avfuse.data.synthetic import generate_synthetic
from avfuse.fusion import run_strategy


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--seeds", default="0-2")
    p.add_argument("--rho", default="0,0.5,1.0", help="values for rho_a; rho_v is scaled by 0.4")
    a = p.parse_args()
    base = resolve_config(a.config, a.set)
    for rho in (float(r) for r in a.rho.split(",")):
        accs = []
        for seed in parse_seeds(a.seeds):
            cfg = base.with_seed(seed)
            data = generate_synthetic(cfg.synthetic_spec())
            k = data.train.n_classes
            configs = {m: cfg.model_config(m, data.train.modality(m).shape[1:], k) for m in "av"}
            policy = cfg.section("masking", rho_a=rho, rho_v=0.4 * rho)
            accs.append(run_strategy(cfg.section("plan", strategy="FusT"), data, policy, configs).test["accuracy"])
        print(f"rho_a {rho:.2f}: accuracy {100 * np.mean(accs):.2f} +- {100 * np.std(accs):.2f}", flush=True)


if __name__ == "__main__":
    main()
