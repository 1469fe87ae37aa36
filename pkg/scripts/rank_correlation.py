"""Spearman correlation between inherited-weight and scratch fine-tuning rankings.

Runs (or resumes) the experiment in ``configs/rank_toy.toml`` and compares the
masked-modeling ranking with the scratch ranking over the same paths.

    python3 scripts/rank_correlation.py --out-dir runs/rank_toy
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from seqnas.experiment import load_config, run_experiment
from seqnas.metrics import spearman_rho
from seqnas.ranking import filter_records, zscore_rank

ROOT = Path(__file__).resolve().parent.parent


def rank_correlation(config: str | Path, out_dir: str | Path, inherited: str = "mask-ft",
                     scratch: str = "only-ft") -> dict:
    cfg = load_config(config, str(out_dir))
    t0 = time.time()
    store = run_experiment(cfg, stages=("pretrain", "finetune"))
    tasks = [t.load()[0] for t in cfg.tasks]
    records = store.records()
    a = zscore_rank(filter_records(records, inherited), tasks)
    b = zscore_rank(filter_records(records, scratch), tasks)
    return {"rho": spearman_rho(a.scores, b.scores), "n_paths": len(a.order),
            inherited: list(a.order), scratch: list(b.order), "seconds": round(time.time() - t0, 1)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "rank_toy.toml"))
    ap.add_argument("--out-dir", default="runs/rank_toy")
    ap.add_argument("--inherited", default="mask-ft")
    ap.add_argument("--scratch", default="only-ft")
    a = ap.parse_args()
    print(json.dumps(rank_correlation(a.config, a.out_dir, a.inherited, a.scratch), indent=1))


if __name__ == "__main__":
    main()
