"""Size of the search space before and after pruning, per depth and block kind.

    python3 scripts/space_stats.py --out runs/space.json
"""
from __future__ import annotations

import argparse
import json

from seqnas.space import SpaceConfig, compose_space, save_space, space_stats, unpruned_size


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tau", type=float, default=0.5, help="log-distance threshold for greedy pruning")
    ap.add_argument("--out", help="optional path list JSON")
    a = ap.parse_args()
    cfg = SpaceConfig(seed=a.seed, tau_dist=a.tau)
    paths = compose_space(cfg)
    stats = space_stats(paths, cfg.h0)
    stats["unpruned"] = unpruned_size(cfg)
    stats["reduction"] = round(stats["unpruned"] / stats["paths"], 1)
    if a.out:
        save_space(paths, a.out)
    print(json.dumps(stats, indent=1))


if __name__ == "__main__":
    main()
