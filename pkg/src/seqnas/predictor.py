"""Graph encoding of paths, a message-passing performance surrogate, and top-k prediction metrics."""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence as Seq

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import BlockKind, xavier
from .data import TaskSpec
from .metrics import spearman
from .optim import AdamW, AdamWConfig, load_arrays, save_arrays
from .ranking import PerfRecord
from .space import Path

MODULE_ORDER = (BlockKind.CNN, BlockKind.HYENA, BlockKind.TRANSFORMER, BlockKind.LSTM, BlockKind.MAMBA)
EMBED_DIM = 128

SPLIT_PRESETS: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {
    "supervised": ((0, 1, 4, 5, 7, 8, 9, 11, 12, 13, 14, 16), (2, 3, 6, 10, 15, 17)),
    "transfer": ((5, 6, 7, 8, 9, 10, 12, 13, 14), (2, 11, 16, 17)),
}


@dataclass(frozen=True)
class ArchEncoding:
    adjacency: np.ndarray
    features: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.features)


REFERENCE_BOUNDS = (64, 512)


def dim_bounds_for(widths: Iterable[int], h0: int) -> tuple[int, int]:
    """Smallest range covering h0, the widths and the reference range 64..512."""
    widths = list(widths)
    return min(min(widths), h0, REFERENCE_BOUNDS[0]), max(max(widths), REFERENCE_BOUNDS[1])


def encode_arch(path: Path, dim_bounds: tuple[int, int] = REFERENCE_BOUNDS, h0: int = 64) -> ArchEncoding:
    """Super-diagonal adjacency plus rows [one-hot kind | Z(dim_in) | Z(dim_out)].

    Z is min-max scaling over ``dim_bounds``.
    """
    lo, hi = dim_bounds
    if hi == lo:
        raise ValueError(f"degenerate dimension bounds ({lo}, {hi})")
    n = path.depth
    adj = np.eye(n, k=1)
    feats = np.zeros((n, len(MODULE_ORDER) + 2))
    pos = {m: i for i, m in enumerate(MODULE_ORDER)}
    for i, (kind, din, dout) in enumerate(path.layers(h0)):
        feats[i, pos[kind]] = 1.0
        feats[i, -2] = (din - lo) / (hi - lo)
        feats[i, -1] = (dout - lo) / (hi - lo)
    return ArchEncoding(adj, feats)


def _bucket(word: str, dim: int) -> int:
    return int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little") % dim


def embed_text(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Hashed bag of lowercase words, L2-normalized."""
    words = re.findall(r"[a-z0-9]+", text.lower())
    if not words:
        raise ValueError("cannot embed an empty description")
    v = np.zeros(dim)
    for w in words:
        v[_bucket(w, dim)] += 1.0
    return v / np.linalg.norm(v)


def embed_task(spec: TaskSpec | str, dim: int = EMBED_DIM) -> np.ndarray:
    return embed_text(spec.description if isinstance(spec, TaskSpec) else spec, dim)


def per_task_zscores(records: Iterable[PerfRecord], directions: Mapping[int, int]) -> dict[tuple[str, int], float]:
    """direction * (P - mu_t) / sigma_t with population sigma; 0 where sigma_t = 0."""
    by_task: dict[int, list[PerfRecord]] = {}
    for r in records:
        by_task.setdefault(r.task_id, []).append(r)
    out = {}
    for t, recs in by_task.items():
        vals = np.array([r.metric_value for r in recs])
        mu, sd = vals.mean(), vals.std()
        for r, v in zip(recs, vals):
            out[(r.path_id, t)] = 0.0 if sd == 0 else directions.get(t, 1) * (v - mu) / sd
    return out


@dataclass
class PredictorConfig:
    hidden: int = 64
    mlp_hidden: int = 64
    rounds: int = 2
    dropout: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0


def _batch(encs: Seq[ArchEncoding]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to the largest graph: features (B,N,F), in-degree-normalized predecessor matrix, node mask."""
    n = max(e.n_nodes for e in encs)
    f = encs[0].features.shape[1]
    x = np.zeros((len(encs), n, f))
    agg = np.zeros((len(encs), n, n))
    mask = np.zeros((len(encs), n), dtype=bool)
    for b, e in enumerate(encs):
        k = e.n_nodes
        x[b, :k] = e.features
        mask[b, :k] = True
        pred = e.adjacency.T
        deg = pred.sum(axis=1, keepdims=True)
        agg[b, :k, :k] = np.divide(pred, deg, out=np.zeros_like(pred), where=deg > 0)
    return x, agg, mask


class Predictor:
    """Message passing over the path graph, mean readout, task embedding concat, 2-layer MLP."""

    def __init__(self, n_features: int, embed_dim: int, cfg: PredictorConfig):
        self.cfg = cfg
        self.n_features, self.embed_dim = n_features, embed_dim
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        d_in = n_features
        for r in range(cfg.rounds):
            self.params[f"gnn.{r}.msg"] = xavier((d_in, cfg.hidden), d_in, cfg.hidden, rng)
            self.params[f"gnn.{r}.self"] = xavier((d_in, cfg.hidden), d_in, cfg.hidden, rng)
            self.params[f"gnn.{r}.bias"] = Tensor(np.zeros(cfg.hidden), requires_grad=True)
            d_in = cfg.hidden
        cat = cfg.hidden + embed_dim
        self.params["mlp.0.weight"] = xavier((cat, cfg.mlp_hidden), cat, cfg.mlp_hidden, rng)
        self.params["mlp.0.bias"] = Tensor(np.zeros(cfg.mlp_hidden), requires_grad=True)
        self.params["mlp.1.weight"] = xavier((cfg.mlp_hidden, 1), cfg.mlp_hidden, 1, rng)
        self.params["mlp.1.bias"] = Tensor(np.zeros(1), requires_grad=True)
        self.history: list[float] = []

    def forward(self, encs: Seq[ArchEncoding], task_embs: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        x, agg, mask = _batch(encs)
        h: Tensor = Tensor(x)
        p = self.params
        for r in range(self.cfg.rounds):
            msg = Tensor(agg) @ (h @ p[f"gnn.{r}.msg"])
            h = ad.relu(msg + h @ p[f"gnn.{r}.self"] + p[f"gnn.{r}.bias"])
        ha = ad.mean_pool(h, axis=1, mask=mask)
        z = ad.concat([ha, Tensor(np.asarray(task_embs, dtype=float))], axis=1)
        z = ad.relu(z @ p["mlp.0.weight"] + p["mlp.0.bias"])
        z = ad.dropout(z, self.cfg.dropout, rng, training=train)
        return (z @ p["mlp.1.weight"] + p["mlp.1.bias"]).reshape(-1)

    def predict(self, encs: Seq[ArchEncoding], task_emb: np.ndarray) -> np.ndarray:
        embs = np.repeat(np.asarray(task_emb, dtype=float)[None], len(encs), axis=0)
        return self.forward(encs, embs, train=False).data

    def save(self, path) -> None:
        meta = {"config": vars(self.cfg), "n_features": self.n_features, "embed_dim": self.embed_dim,
                "history": self.history}
        save_arrays(path, {k: t.data for k, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> Predictor:
        arrays, meta = load_arrays(path)
        out = cls(meta["n_features"], meta["embed_dim"], PredictorConfig(**meta["config"]))
        for k, t in out.params.items():
            t.data = arrays[k].copy()
        out.history = list(meta["history"])
        return out


def train_predictor(records: Iterable[PerfRecord], encodings: Mapping[str, ArchEncoding],
                    embeddings: Mapping[int, np.ndarray], directions: Mapping[int, int] | None = None,
                    split: Iterable[int] | None = None, cfg: PredictorConfig | None = None) -> Predictor:
    """Fit the surrogate by MSE against per-task z-scored metrics of the ``split`` tasks."""
    cfg = cfg or PredictorConfig()
    records = list(records)
    if split is not None:
        keep = set(split)
        records = [r for r in records if r.task_id in keep]
    if not records:
        raise ValueError("no training records in the requested split")
    targets = per_task_zscores(records, directions or {})
    samples = sorted(targets)
    missing = sorted({t for _, t in samples} - set(embeddings))
    if missing:
        raise KeyError(f"tasks without embeddings: {missing}")
    any_enc = next(iter(encodings.values()))
    model = Predictor(any_enc.features.shape[1], len(next(iter(embeddings.values()))), cfg)
    opt = AdamW(AdamWConfig(lr=cfg.lr, beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=cfg.weight_decay))
    rng = np.random.default_rng(cfg.seed)
    y_all = np.array([targets[s] for s in samples])
    for _ in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            encs = [encodings[samples[j][0]] for j in idx]
            embs = np.stack([embeddings[samples[j][1]] for j in idx])
            loss = ad.mse(model.forward(encs, embs, train=True, rng=rng), y_all[idx])
            for p in model.params.values():
                p.grad = None
            loss.backward()
            opt.step(model.params)
            total += loss.item() * len(idx)
        model.history.append(total / len(samples))
    return model


def predict_topk(model: Predictor, candidates: Seq[Path], encodings: Mapping[str, ArchEncoding],
                 task_emb: np.ndarray, k: int) -> list[str]:
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    # rounding keeps batch-position noise in the last ulp from breaking exact ties
    scores = np.round(model.predict([encodings[p.path_id] for p in candidates], task_emb), 12)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i].path_id))
    return [candidates[i].path_id for i in order[:k]]


def prediction_metrics(pred: Seq[str], truth: set[str], k: int) -> dict[str, float]:
    if not truth:
        raise ValueError("ground-truth set is empty")
    if k > len(pred):
        raise ValueError(f"k={k} exceeds {len(pred)} predictions")
    hits = len(set(pred[:k]) & set(truth))
    return {"precision": hits / k, "recall": hits / len(truth), "hit_rate": float(hits >= 1)}


def ground_truth_sets(records: Iterable[PerfRecord], directions: Mapping[int, int],
                      frac: float = 0.1) -> dict[int, set[str]]:
    """Top ``ceil(frac * n)`` architectures per task (at least one), path_id tie-break."""
    by_task: dict[int, list[PerfRecord]] = {}
    for r in records:
        by_task.setdefault(r.task_id, []).append(r)
    out = {}
    for t, recs in by_task.items():
        s = directions.get(t, 1)
        ranked = sorted(recs, key=lambda r: (-s * r.metric_value, r.path_id))
        out[t] = {r.path_id for r in ranked[:max(1, math.ceil(frac * len(ranked)))]}
    return out


@dataclass
class PredictorReport:
    spearman: dict[int, float]
    metrics: dict[int, dict[int, dict[str, float]]] = field(default_factory=dict)

    @property
    def mean_spearman(self) -> float:
        return float(np.mean(list(self.spearman.values())))


def evaluate_predictor(model: Predictor, records: Iterable[PerfRecord], candidates: Seq[Path],
                       encodings: Mapping[str, ArchEncoding], embeddings: Mapping[int, np.ndarray],
                       directions: Mapping[int, int], tasks: Iterable[int],
                       ks: Seq[int] = (5, 10, 15, 20, 25, 30), frac: float = 0.1) -> PredictorReport:
    """Within-task Spearman over ``candidates`` plus precision/recall/hit-rate sweeps over k."""
    tasks = list(tasks)
    cand_ids = {p.path_id for p in candidates}
    records = [r for r in records if r.path_id in cand_ids and r.task_id in set(tasks)]
    truth = ground_truth_sets(records, directions, frac)
    rep = PredictorReport({})
    for t in tasks:
        recs = sorted((r for r in records if r.task_id == t), key=lambda r: r.path_id)
        if len(recs) < 2:
            continue
        pred = model.predict([encodings[r.path_id] for r in recs], embeddings[t])
        rep.spearman[t] = spearman(pred, [directions.get(t, 1) * r.metric_value for r in recs])
        ranked = predict_topk(model, [p for p in candidates if p.path_id in {r.path_id for r in recs}],
                              encodings, embeddings[t], len(recs))
        rep.metrics[t] = {k: prediction_metrics(ranked, truth[t], k) for k in ks if k <= len(ranked)}
    return rep
