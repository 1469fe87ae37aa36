"""Weight-sharing supernet: unique-block registry, path assembly, SSL objectives, pretraining.

Every distinct (kind, dim_in, dim_out) layer across the path list is built
once and shared by every path that uses it.  The token embedding, the
per-width adapters and the language-model head sit outside the searched
space and are shared by all paths.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path as FsPath
from typing import Sequence as Seq

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Block, BlockKind, BlockSpec, build_block, xavier
from .optim import AdamW, AdamWConfig, load_arrays, save_arrays
from .space import Path
from .tokenizers import CLS, MASK, PAD, SPECIALS

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class BlockKey:
    kind: BlockKind
    dim_in: int
    dim_out: int

    def __str__(self):
        return f"{BlockKind(self.kind).value}_{self.dim_in}_{self.dim_out}"

    @classmethod
    def parse(cls, s: str) -> BlockKey:
        kind, din, dout = s.rsplit("_", 2)
        return cls(BlockKind(kind), int(din), int(dout))


def path_keys(path: Path, h0: int) -> list[BlockKey]:
    return [BlockKey(k, din, dout) for k, din, dout in path.layers(h0)]


def path_slots(keys: Seq[BlockKey]) -> list[int]:
    """Occurrence index of each layer's key among the earlier layers of the same path."""
    seen: dict[BlockKey, int] = {}
    out = []
    for k in keys:
        out.append(seen.get(k, 0))
        seen[k] = out[-1] + 1
    return out


class Objective(str, Enum):
    MM = "mm"
    CL = "cl"
    NTP = "ntp"


@dataclass
class SslConfig:
    objective: Objective = Objective.MM
    mask_rate: float = 0.15
    temperature: float = 0.1
    cl_mask_rate: float = 0.15
    crop_frac: float = 0.8

    def __post_init__(self):
        self.objective = Objective(self.objective)
        if not 0 < self.mask_rate < 1:
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _normal(shape, std, rng) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Supernet:
    """Shared weights W: the block registry plus the shared peripherals."""

    def __init__(self, paths: Seq[Path], vocab_size: int, h0: int, seed: int = 0,
                 max_len: int = 256, block_kwargs: dict | None = None):
        if not paths:
            raise ValueError("supernet needs at least one path")
        self.h0 = h0
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.block_kwargs = dict(block_kwargs or {})
        rng = np.random.default_rng(seed)
        keys = sorted({k for p in paths for k in path_keys(p, h0)})
        self.registry: dict[BlockKey, Block] = {}
        for key in keys:
            spec = BlockSpec(key.kind, key.dim_in, key.dim_out, max_len=max_len, **self.block_kwargs)
            self.registry[key] = build_block(spec, rng)
        for p in paths:
            keys_p = path_keys(p, h0)
            for key, slot in zip(keys_p, path_slots(keys_p)):
                self.registry[key].ensure_slots(slot + 1)
        self.shared: dict[str, Tensor] = {
            "emb.tok": _normal((vocab_size, h0), 0.02, rng),
            "emb.pos": _normal((max_len, h0), 0.02, rng),
            "head.ln.weight": Tensor(np.ones(h0), requires_grad=True),
            "head.ln.bias": Tensor(np.zeros(h0), requires_grad=True),
            "head.weight": _normal((h0, vocab_size), 0.02, rng),
            "head.bias": Tensor(np.zeros(vocab_size), requires_grad=True),
        }
        for w in sorted({p.dims[-1] for p in paths}):
            self._add_adapter(w, rng)

    def _add_adapter(self, width: int, rng: np.random.Generator):
        self.shared[f"adapter.{width}.weight"] = xavier((width, self.h0), width, self.h0, rng)
        self.shared[f"adapter.{width}.bias"] = Tensor(np.zeros(self.h0), requires_grad=True)

    def __len__(self):
        return len(self.registry)

    def assemble(self, path: Path, task_head: TaskHead | None = None) -> Model:
        return Model(self, path, task_head)

    def subnet(self, path: Path) -> Supernet:
        """Independent deep copy holding only ``path``'s blocks and the peripherals."""
        keys = path_keys(path, self.h0)
        missing = [str(k) for k in keys if k not in self.registry]
        if missing:
            raise KeyError(f"blocks missing from registry: {missing}")
        out = copy.copy(self)
        out.registry = {k: copy.deepcopy(self.registry[k]) for k in keys}
        out.shared = copy.deepcopy(self.shared)
        out.block_kwargs = dict(self.block_kwargs)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.shared.items()}
        for key, blk in self.registry.items():
            for name, t in blk.params.items():
                out[f"block/{key}/{name}"] = t.data
            for name, buf in blk.buffers.items():
                out[f"buffer/{key}/{name}"] = buf
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_arrays()
        if strict:
            missing = sorted(set(own) - set(arrays))
            if missing:
                raise KeyError(f"checkpoint lacks {len(missing)} arrays, e.g. {missing[:3]}")
        for name, arr in arrays.items():
            if name.startswith("__"):
                continue
            if name in self.shared:
                self.shared[name].data = arr.copy()
                continue
            kind, key, pname = name.split("/", 2)
            bkey = BlockKey.parse(key)
            if bkey not in self.registry:
                if strict:
                    raise KeyError(f"checkpoint block {key} not in registry")
                continue
            blk = self.registry[bkey]
            if kind == "block":
                blk.params[pname].data = arr.copy()
            elif pname in blk.buffers:
                blk.buffers[pname][...] = arr
            else:
                blk.buffers[pname] = arr.copy()
                blk.n_slots = max(blk.n_slots, int(pname.rsplit("@", 1)[1]) + 1)

    def save(self, path: str | FsPath, meta: dict | None = None, extra: dict | None = None) -> None:
        arrays = dict(self.state_arrays())
        arrays.update(extra or {})
        base = {"h0": self.h0, "vocab_size": self.vocab_size, "max_len": self.max_len,
                "block_kwargs": self.block_kwargs, "blocks": [str(k) for k in self.registry]}
        base.update(meta or {})
        save_arrays(path, arrays, base)


def load_supernet(path: str | FsPath, paths: Seq[Path]) -> tuple[Supernet, dict, dict]:
    arrays, meta = load_arrays(path)
    net = Supernet(paths, meta["vocab_size"], meta["h0"], max_len=meta["max_len"],
                   block_kwargs=meta.get("block_kwargs"))
    net.load_state_arrays(arrays)
    return net, arrays, meta


@dataclass
class TaskHead:
    """Mean-pool over valid positions, then one linear layer."""
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim_in: int, dim_out: int, rng: np.random.Generator) -> TaskHead:
        return cls(xavier((dim_in, dim_out), dim_in, dim_out, rng),
                   Tensor(np.zeros(dim_out), requires_grad=True))

    def __call__(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        return ad.mean_pool(feats, axis=1, mask=mask) @ self.weight + self.bias


class Model:
    """One path through the supernet; holds references, never copies."""

    def __init__(self, net: Supernet, path: Path, task_head: TaskHead | None = None):
        self.net = net
        self.path = path
        self.keys = path_keys(path, net.h0)
        missing = [str(k) for k in self.keys if k not in net.registry]
        if missing:
            raise KeyError(f"path {path.path_id} needs blocks missing from registry: {missing}")
        self.blocks = [net.registry[k] for k in self.keys]
        self.slots = path_slots(self.keys)
        for blk, slot in zip(self.blocks, self.slots):
            blk.ensure_slots(slot + 1)
        self.task_head = task_head
        self.width = path.dims[-1]
        if f"adapter.{self.width}.weight" not in net.shared:
            net._add_adapter(self.width, np.random.default_rng(self.width))

    def features(self, ids: np.ndarray, train: bool = False, causal: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.net.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.net.max_len}")
        s = self.net.shared
        x = ad.embedding(s["emb.tok"], ids) + s["emb.pos"][: ids.shape[1]]
        for blk, slot in zip(self.blocks, self.slots):
            x = blk(x, train=train, causal=causal, rng=rng, slot=slot)
        return x

    def project(self, feats: Tensor) -> Tensor:
        """Per-width adapter into the shared head width, then layer norm."""
        s = self.net.shared
        z = feats @ s[f"adapter.{self.width}.weight"] + s[f"adapter.{self.width}.bias"]
        return ad.layernorm(z, s["head.ln.weight"], s["head.ln.bias"])

    def lm_logits(self, feats: Tensor) -> Tensor:
        s = self.net.shared
        return self.project(feats) @ s["head.weight"] + s["head.bias"]

    def predict(self, ids: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        if self.task_head is None:
            raise ValueError("model has no task head")
        return self.task_head(self.features(ids, train=train, rng=rng), ids != PAD)

    def block_parameters(self) -> dict[str, Tensor]:
        out = {}
        for key, blk in zip(self.keys, self.blocks):
            for name, t in blk.params.items():
                out[f"block/{key}/{name}"] = t
        return out

    def parameters(self, objective: Objective | None = None) -> dict[str, Tensor]:
        """w(a) plus the peripherals the given objective touches."""
        s = self.net.shared
        out = self.block_parameters()
        out["emb.tok"], out["emb.pos"] = s["emb.tok"], s["emb.pos"]
        if objective is not None:
            for name in (f"adapter.{self.width}.weight", f"adapter.{self.width}.bias",
                         "head.ln.weight", "head.ln.bias"):
                out[name] = s[name]
            if objective is not Objective.CL:
                out["head.weight"], out["head.bias"] = s["head.weight"], s["head.bias"]
        if self.task_head is not None:
            out["task.weight"], out["task.bias"] = self.task_head.weight, self.task_head.bias
        return out


def sample_path(paths: Seq[Path], rng: np.random.Generator) -> Path:
    if not paths:
        raise ValueError("cannot sample from an empty path list")
    return paths[int(rng.integers(len(paths)))]


# ------------------------------------------------------------------ objectives

def _normal_ids(ids: np.ndarray) -> np.ndarray:
    return ids >= len(SPECIALS)


def mm_corrupt(ids: np.ndarray, mask_rate: float, vocab_size: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption; returns (corrupted ids, boolean mask of selected positions)."""
    eligible = _normal_ids(ids) | (ids == 1)
    if not eligible.any():
        raise ValueError("batch has no maskable tokens")
    while True:
        sel = (rng.random(ids.shape) < mask_rate) & eligible
        if sel.any():
            break
    roll = rng.random(ids.shape)
    out = ids.copy()
    out[sel & (roll < 0.8)] = MASK
    rand = sel & (roll >= 0.8) & (roll < 0.9)
    out[rand] = rng.integers(len(SPECIALS), vocab_size, size=int(rand.sum()))
    return out, sel


def mm_loss(model: Model, ids: np.ndarray, mask_rate: float, rng: np.random.Generator,
            train: bool = True) -> Tensor:
    """Mean cross-entropy of the original tokens at the masked positions only."""
    corrupted, sel = mm_corrupt(ids, mask_rate, model.net.vocab_size, rng)
    logits = model.lm_logits(model.features(corrupted, train=train, rng=rng))
    return ad.cross_entropy(logits, ids, weights=sel)


def ntp_loss(model: Model, ids: np.ndarray, rng: np.random.Generator | None = None,
             train: bool = True) -> Tensor:
    """Shifted cross-entropy under a causal forward, averaged over non-pad targets."""
    ids = np.asarray(ids)
    if ids.shape[1] < 2:
        raise ValueError("next-token prediction needs sequences of length >= 2")
    logits = model.lm_logits(model.features(ids, train=train, causal=True, rng=rng))
    targets = ids[:, 1:]
    return ad.cross_entropy(logits[:, :-1], targets, weights=targets != PAD)


def nt_xent(z1: Tensor, z2: Tensor, temperature: float) -> Tensor:
    """Normalized-temperature cross-entropy over 2B views.

    Each view's positive is its partner; the other 2B - 2 views are negatives.
    """
    if z1.shape != z2.shape:
        raise ValueError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    b = z1.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    z = ad.concat([z1, z2], axis=0)
    sim = ad.cosine_similarity(z, z) * (1.0 / temperature)
    sim = sim + np.diag(np.full(2 * b, -1e30))
    targets = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return ad.cross_entropy(sim, targets)


def cl_views(ids: np.ndarray, cfg: SslConfig, rng: np.random.Generator) -> np.ndarray:
    """Random token masking then a random contiguous crop; all crops share one length."""
    out = ids.copy()
    hit = (rng.random(ids.shape) < cfg.cl_mask_rate) & _normal_ids(ids)
    out[hit] = MASK
    length = ids.shape[1]
    crop = max(1, int(round(cfg.crop_frac * length)))
    starts = rng.integers(0, length - crop + 1, size=ids.shape[0])
    return np.stack([out[i, s:s + crop] for i, s in enumerate(starts)])


def cl_loss(model: Model, ids: np.ndarray, cfg: SslConfig, rng: np.random.Generator,
            train: bool = True) -> Tensor:
    if ids.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    zs = []
    for _ in range(2):
        view = cl_views(ids, cfg, rng)
        feats = model.features(view, train=train, rng=rng)
        zs.append(model.project(ad.mean_pool(feats, axis=1, mask=view != PAD)))
    return nt_xent(zs[0], zs[1], cfg.temperature)


def objective_loss(model: Model, ids: np.ndarray, cfg: SslConfig, rng: np.random.Generator,
                   train: bool = True) -> Tensor:
    if cfg.objective is Objective.MM:
        return mm_loss(model, ids, cfg.mask_rate, rng, train)
    if cfg.objective is Objective.NTP:
        return ntp_loss(model, ids, rng, train)
    return cl_loss(model, ids, cfg, rng, train)


# ------------------------------------------------------------------ pretraining

def encode_corpus(tokenizer, seqs, max_len: int) -> np.ndarray:
    """Token ids, truncated to ``max_len`` and right-padded with PAD to the longest."""
    rows = [tokenizer.encode(s)[:max_len] for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


@dataclass
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    ssl: SslConfig = field(default_factory=SslConfig)
    opt: AdamWConfig = field(default_factory=lambda: AdamWConfig(lr=1e-3, weight_decay=1e-5))
    checkpoint_every: int = 0


@dataclass
class PretrainState:
    step: int = 0
    losses: list[float] = field(default_factory=list)
    sampled: list[str] = field(default_factory=list)
    rng: np.random.Generator | None = None
    opt: AdamW | None = None


class DivergenceError(FloatingPointError):
    pass


def pretrain(net: Supernet, paths: Seq[Path], corpus: np.ndarray, cfg: PretrainConfig,
             state: PretrainState | None = None, checkpoint: str | FsPath | None = None,
             until: int | None = None) -> PretrainState:
    """One-shot training: each step samples one path uniformly and updates only its weights.

    ``corpus`` is a (N, L) id matrix.  Pass a ``state`` returned earlier (or
    restored by ``resume``) to continue; ``until`` stops early at that step.
    """
    corpus = np.asarray(corpus)
    if corpus.size == 0:
        raise ValueError("pretraining corpus is empty")
    if state is None:
        state = PretrainState(rng=np.random.default_rng(cfg.seed), opt=AdamW(cfg.opt))
    rng, opt = state.rng, state.opt
    stop = cfg.steps if until is None else min(until, cfg.steps)
    while state.step < stop:
        path = sample_path(paths, rng)
        model = net.assemble(path)
        idx = rng.integers(0, len(corpus), size=min(cfg.batch_size, len(corpus)))
        loss = objective_loss(model, corpus[idx], cfg.ssl, rng)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"loss became {loss.item()} at step {state.step + 1} "
                                  f"on {path.path_id}; last losses {state.losses[-5:]}")
        params = model.parameters(cfg.ssl.objective)
        for p in params.values():
            p.grad = None
        loss.backward()
        opt.step(params)
        state.step += 1
        state.losses.append(loss.item())
        state.sampled.append(path.path_id)
        if checkpoint is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_pretrain_checkpoint(net, state, cfg, checkpoint)
    if checkpoint is not None:
        save_pretrain_checkpoint(net, state, cfg, checkpoint)
    return state


def save_pretrain_checkpoint(net: Supernet, state: PretrainState, cfg: PretrainConfig,
                             path: str | FsPath) -> None:
    meta = {"objective": cfg.ssl.objective.value, "step": state.step,
            "rng_state": state.rng.bit_generator.state, "opt": state.opt.meta(),
            "losses": state.losses, "sampled": state.sampled}
    net.save(path, meta=meta, extra=state.opt.state_arrays())


def resume(path: str | FsPath, paths: Seq[Path], cfg: PretrainConfig) -> tuple[Supernet, PretrainState]:
    net, arrays, meta = load_supernet(path, paths)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    opt = AdamW(cfg.opt)
    opt.load_state_arrays(arrays, meta["opt"])
    state = PretrainState(step=meta["step"], losses=list(meta["losses"]),
                          sampled=list(meta["sampled"]), rng=rng, opt=opt)
    return net, state
