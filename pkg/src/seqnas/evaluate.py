"""Per-path fine-tuning under scratch or inherited initialization, and the foundation flow."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence as Seq

import numpy as np

from . import autodiff as ad
from .data import Alphabet, LabeledDataset, Problem, TaskSpec
from .metrics import metric
from .optim import AdamW, AdamWConfig
from .ranking import EvalProtocol, PerfRecord
from .space import Path
from .supernet import Objective, PretrainConfig, Supernet, TaskHead, encode_corpus, pretrain

log = logging.getLogger(__name__)


def derive_seed(*parts) -> int:
    h = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass
class FinetuneConfig:
    lr: float = 3e-5
    batch_size: int = 32
    epochs: int = 3
    warmup_steps: int = 50
    weight_decay: float = 0.01
    max_len: int = 256

    @classmethod
    def paper_defaults(cls, modality: Alphabet | str) -> FinetuneConfig:
        if Alphabet(modality) is Alphabet.PROTEIN:
            return cls(lr=5e-5, epochs=5)
        return cls()


@dataclass
class FinetuneResult:
    record: PerfRecord
    best_epoch: int
    valid_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)


class MissingCheckpoint(ValueError):
    pass


def _labels(ds: LabeledDataset, split: str, task: TaskSpec) -> np.ndarray:
    y = ds.labels(split)
    return y if task.problem is Problem.REGRESSION else y.astype(np.int64)


def _predict(model, ids: np.ndarray, task: TaskSpec, batch: int) -> np.ndarray:
    outs = []
    for i in range(0, len(ids), batch):
        out = model.predict(ids[i:i + batch], train=False).data
        outs.append(out[:, 0] if task.problem is Problem.REGRESSION else out.argmax(axis=1))
    return np.concatenate(outs)


def _task_loss(out: ad.Tensor, y: np.ndarray, task: TaskSpec) -> ad.Tensor:
    if task.problem is Problem.REGRESSION:
        return ad.mse(out[:, 0], y)
    return ad.cross_entropy(out, y)


def finetune_detailed(path: Path, protocol: EvalProtocol | str, task: TaskSpec,
                      dataset: LabeledDataset, tokenizer, hyper: FinetuneConfig, *,
                      checkpoint: Supernet | None = None, seed: int = 0, h0: int = 64,
                      block_kwargs: dict | None = None) -> FinetuneResult:
    """Train one path on one task in isolation and score its best-validation state on test.

    Head initialization and batch order depend only on (seed, path, task,
    tokenizer), so protocols differ solely in how the path is initialized.
    """
    protocol = EvalProtocol(protocol)
    base = derive_seed(seed, path.path_id, task.task_id, tokenizer.id)
    if protocol.inherits:
        if checkpoint is None:
            raise MissingCheckpoint(f"protocol {protocol.value} needs a pretrained supernet")
        net = checkpoint.subnet(path)
    else:
        net = Supernet([path], len(tokenizer.vocab), h0, seed=derive_seed(base, "init"),
                       max_len=hyper.max_len, block_kwargs=block_kwargs)
    if len(tokenizer.vocab) != net.vocab_size:
        raise ValueError(f"tokenizer vocab {len(tokenizer.vocab)} != supernet vocab {net.vocab_size}")
    head = TaskHead.create(path.dims[-1], task.output_dim, np.random.default_rng(derive_seed(base, "head")))
    model = net.assemble(path, head)
    params = model.parameters()

    enc = {s: encode_corpus(tokenizer, [x for x, _ in dataset.subset(s)], hyper.max_len)
           for s in ("train", "valid", "test")}
    ys = {s: _labels(dataset, s, task) for s in ("train", "valid", "test")}
    n_train = len(enc["train"])
    per_epoch = max(1, -(-n_train // hyper.batch_size))
    opt = AdamW(AdamWConfig(lr=hyper.lr, beta1=0.9, beta2=0.98, eps=1e-6,
                            weight_decay=hyper.weight_decay, warmup_steps=hyper.warmup_steps,
                            total_steps=per_epoch * hyper.epochs))
    rng = np.random.default_rng(derive_seed(base, "data"))
    sign = task.direction
    best, best_epoch, best_state = -np.inf, -1, None
    valid_hist, loss_hist = [], []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_train)
        for i in range(0, n_train, hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            loss = _task_loss(model.predict(enc["train"][idx], train=True, rng=rng), ys["train"][idx], task)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite fine-tune loss on {path.path_id}, epoch {epoch}")
            for p in params.values():
                p.grad = None
            loss.backward()
            opt.step(params)
            loss_hist.append(loss.item())
        score = metric(_predict(model, enc["valid"], task, hyper.batch_size), ys["valid"], task.metric)
        valid_hist.append(score)
        if sign * score > best:
            best, best_epoch = sign * score, epoch
            best_state = _snapshot(net, head)
    _restore(net, head, best_state)
    test = metric(_predict(model, enc["test"], task, hyper.batch_size), ys["test"], task.metric)
    rec = PerfRecord(path.path_id, task.task_id, protocol.value, tokenizer.id, float(test), seed)
    return FinetuneResult(rec, best_epoch, valid_hist, loss_hist)


def finetune(path: Path, protocol: EvalProtocol | str, task: TaskSpec, dataset: LabeledDataset,
             tokenizer, hyper: FinetuneConfig, **kw) -> PerfRecord:
    return finetune_detailed(path, protocol, task, dataset, tokenizer, hyper, **kw).record


def _snapshot(net: Supernet, head: TaskHead) -> dict[str, np.ndarray]:
    state = {k: v.copy() for k, v in net.state_arrays().items()}
    state["__task_weight"] = head.weight.data.copy()
    state["__task_bias"] = head.bias.data.copy()
    return state


def _restore(net: Supernet, head: TaskHead, state: dict[str, np.ndarray] | None) -> None:
    if state is None:
        return
    net.load_state_arrays(state)
    head.weight.data = state["__task_weight"].copy()
    head.bias.data = state["__task_bias"].copy()


def foundation_flow(top_path: Path, corpus: Seq, tokenizer, pretrain_cfg: PretrainConfig,
                    tasks: Seq[tuple[TaskSpec, LabeledDataset]], hyper: FinetuneConfig, *,
                    seed: int = 0, h0: int = 64, block_kwargs: dict | None = None) -> list[PerfRecord]:
    """Fresh parameters for the top path, pretrained alone, then fine-tuned on every task."""
    net = Supernet([top_path], len(tokenizer.vocab), h0, seed=derive_seed(seed, top_path.path_id, "foundation"),
                   max_len=hyper.max_len, block_kwargs=block_kwargs)
    ids = encode_corpus(tokenizer, corpus, hyper.max_len)
    pretrain(net, [top_path], ids, pretrain_cfg)
    return [finetune(top_path, EvalProtocol.FOUNDATION, task, ds, tokenizer, hyper,
                     checkpoint=net, seed=seed, h0=h0, block_kwargs=block_kwargs)
            for task, ds in tasks]


def objective_for(protocol: EvalProtocol | str) -> Objective:
    obj = EvalProtocol(protocol).objective
    if obj is None:
        raise ValueError(f"protocol {protocol} does not inherit from a pretrained supernet")
    return Objective(obj)
