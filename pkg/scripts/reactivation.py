"""Dead-channel reactivation: vanilla vs ABRi fine-tuning after injected abnormal BN parameters.

    python3 scripts/reactivation.py --seeds 0-4 --out runs/reactivation.csv
"""
import argparse
import csv
import dataclasses
import json

import numpy as np

from avfuse.cli import parse_seeds
from avfuse.reactivation import ReactivationSettings, reactivation_trial


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--channels", type=json.loads, help="e.g. [16,32,64]")
    p.add_argument("--inject-fraction", type=float)
    p.add_argument("--init-alpha", type=float)
    p.add_argument("--out", help="per-seed CSV")
    a = p.parse_args()
    overrides = {k: v for k, v in (("channels", a.channels), ("inject_fraction", a.inject_fraction),
                                   ("init_alpha", a.init_alpha)) if v is not None}
    settings = ReactivationSettings(**overrides)
    print(json.dumps(dataclasses.asdict(settings)))
    trials = []
    for seed in parse_seeds(a.seeds):
        t = reactivation_trial(seed, settings)
        trials.append(t)
        print(f"seed {seed}: injected {t['injected']}, dead {t['vanilla_dead']} -> {t['abri_dead']}, "
              f"accuracy {t['vanilla_acc']:.4f} -> {t['abri_acc']:.4f}", flush=True)
    gain = 100 * np.array([t["abri_acc"] - t["vanilla_acc"] for t in trials])
    print(f"mean dead {np.mean([t['vanilla_dead'] for t in trials]):.1f} -> "
          f"{np.mean([t['abri_dead'] for t in trials]):.1f}; accuracy gain {gain.mean():+.2f} points "
          f"(positive on {int(np.sum(gain > 0))}/{len(gain)} seeds)")
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(trials[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(trials)


if __name__ == "__main__":
    main()
