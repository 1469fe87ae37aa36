"""AdamW with linear warmup/decay and flat-binary checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 1e-5
    warmup_steps: int = 0
    total_steps: int | None = None


def scheduled_lr(cfg: AdamWConfig, step: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp from 0, then linear decay to 0."""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.total_steps is None or cfg.total_steps <= cfg.warmup_steps:
        return cfg.lr
    remaining = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr * max(remaining, 0.0)


@dataclass
class AdamW:
    cfg: AdamWConfig
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor]) -> float:
        """One update over ``params``; parameters without a gradient are left alone.

        Bias correction counts updates per parameter, so parameters that sit
        out a step (inactive supernet paths) keep consistent moments.
        """
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.sum(~np.isfinite(p.grad)))
                raise FloatingPointError(
                    f"non-finite gradient in {name!r} ({bad} of {p.grad.size} entries) "
                    f"at step {self.step_count + 1}")
        self.step_count += 1
        lr = scheduled_lr(self.cfg, self.step_count)
        c = self.cfg
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** t)
            vhat = v / (1 - c.beta2 ** t)
            if c.weight_decay:
                p.data -= lr * c.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + c.eps)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"__adam_m__/{name}"] = self.m[name]
            out[f"__adam_v__/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
        self.step_count = int(meta["step_count"])
        self.t = {k: int(v) for k, v in meta["t"].items()}
        self.m, self.v = {}, {}
        for key, arr in arrays.items():
            if key.startswith("__adam_m__/"):
                self.m[key.split("/", 1)[1]] = arr.copy()
            elif key.startswith("__adam_v__/"):
                self.v[key.split("/", 1)[1]] = arr.copy()

    def meta(self) -> dict:
        return {"step_count": self.step_count, "t": dict(sorted(self.t.items()))}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>.bin`` (little-endian f64, concatenated) and ``<path>.json`` (offsets/shapes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries[name] = {"offset": offset, "shape": list(arr.shape)}
            offset += arr.size
    manifest = {"format": "f64le", "params": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    arrays = {}
    for name, e in manifest["params"].items():
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[name] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})
