"""Train the performance predictor on a planted linear table over the 360-path space.

Each task's metric is a noisy linear function of the mean node features, so a
working predictor should recover the within-task order of held-out paths.

    python3 scripts/predictor_synthetic.py --epochs 50 --held-out 72
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from seqnas.metrics import spearman
from seqnas.predictor import PredictorConfig, embed_text, encode_arch, train_predictor
from seqnas.ranking import PerfRecord
from seqnas.space import SpaceConfig, compose_space

DESCRIPTIONS = ["promoter detection in human dna", "splice site donor classification",
                "enhancer activity in mouse cells", "transcription factor binding sites"]


def run(epochs: int, held_out: int, spread: float, seed: int) -> dict:
    paths = compose_space(SpaceConfig())
    encs = {p.path_id: encode_arch(p) for p in paths}
    embs = {t: embed_text(d) for t, d in enumerate(DESCRIPTIONS)}
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=encs[paths[0].path_id].features.shape[1])
    ws = {t: w0 + spread * rng.normal(size=w0.shape) for t in embs}
    value = {(pid, t): float(e.features.mean(axis=0) @ ws[t]) for pid, e in encs.items() for t in embs}
    ids = sorted(encs)
    held = sorted(ids[i] for i in rng.permutation(len(ids))[:held_out])
    train = [PerfRecord(pid, t, "only-ft", "kmer1", value[pid, t], 0) for pid in ids if pid not in held
             for t in embs]
    t0 = time.time()
    model = train_predictor(train, encs, embs, cfg=PredictorConfig(epochs=epochs, seed=seed))
    rho = {t: spearman(model.predict([encs[p] for p in held], embs[t]), [value[p, t] for p in held])
           for t in embs}
    return {"spearman": rho, "first_loss": model.history[0], "final_loss": model.history[-1],
            "seconds": round(time.time() - t0, 1)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--held-out", type=int, default=72)
    ap.add_argument("--spread", type=float, default=0.3, help="per-task deviation from the shared weights")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print(json.dumps(run(a.epochs, a.held_out, a.spread, a.seed), indent=1))


if __name__ == "__main__":
    main()
