"""The five sequence block kinds sharing a (B, L, dim_in) -> (B, L, dim_out) contract.

CNN and LSTM map dim_in -> dim_out directly.  Transformer, Mamba and Hyena
first match the input to dim_out with an optional linear projection (absent
when the dims already agree) and then run a residual layer at dim_out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class BlockKind(str, Enum):
    CNN = "CNN"
    LSTM = "LSTM"
    TRANSFORMER = "TRANSFORMER"
    MAMBA = "MAMBA"
    HYENA = "HYENA"


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind
    dim_in: int
    dim_out: int
    kernel: int = 5
    head_dim: int = 64
    ffn_mult: int = 4
    lstm_dropout: float = 0.4
    state_dim: int = 8
    filter_hidden: int = 16
    filter_freqs: int = 4
    max_len: int = 256

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        if self.dim_in <= 0 or self.dim_out <= 0:
            raise ValueError(f"block dims must be positive, got {self.dim_in}->{self.dim_out}")
        if self.kernel % 2 == 0:
            raise ValueError(f"CNN kernel must be odd, got {self.kernel}")
        if self.kind is BlockKind.TRANSFORMER and self.dim_out % self.head_dim:
            raise ValueError(
                f"Transformer dim_out={self.dim_out} not divisible by head dim {self.head_dim}")

    @property
    def heads(self) -> int:
        return self.dim_out // self.head_dim

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


def xavier(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Block:
    spec: BlockSpec

    def __init__(self, spec: BlockSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.n_slots = 1
        self._initial_buffers: dict[str, np.ndarray] = {}

    def __repr__(self):
        s = self.spec
        return f"{type(self).__name__}({s.dim_in}->{s.dim_out})"

    def _check(self, x: Tensor):
        if x.ndim != 3 or x.shape[-1] != self.spec.dim_in:
            raise ShapeError(
                f"{self.spec.kind.value} block expects (B, L, {self.spec.dim_in}), got {x.shape}")

    def _linear_in(self, x: Tensor) -> Tensor:
        w = self.params.get("proj.weight")
        return x if w is None else x @ w

    def ensure_slots(self, n: int) -> None:
        """Give each of ``n`` uses of this block within one path its own running statistics.

        Parameters stay shared; only non-learned buffers are per slot.  Slot 0
        uses the plain buffer names, slot j > 0 appends ``@j``.
        """
        base = [k for k in self.buffers if "@" not in k]
        for j in range(self.n_slots, n):
            for k in base:
                self.buffers[f"{k}@{j}"] = self._initial_buffers[k].copy()
        self.n_slots = max(self.n_slots, n)

    def _buf(self, name: str, slot: int) -> np.ndarray:
        if slot >= self.n_slots:
            raise IndexError(f"slot {slot} not allocated on {self!r} ({self.n_slots} slots)")
        return self.buffers[name if slot == 0 else f"{name}@{slot}"]

    def forward(self, x: Tensor, train: bool = False, causal: bool = False,
                rng: np.random.Generator | None = None, slot: int = 0) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, train=False, causal=False, rng=None, slot=0):
        return self.forward(x, train=train, causal=causal, rng=rng, slot=slot)


class CNNBlock(Block):
    """Conv1d -> ReLU -> BatchNorm1d, 'same' length output."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        super().__init__(spec)
        k, din, dout = spec.kernel, spec.dim_in, spec.dim_out
        self.params["conv.weight"] = xavier((k, din, dout), k * din, k * dout, rng)
        self.params["conv.bias"] = zeros(dout)
        self.params["bn.weight"] = ones(dout)
        self.params["bn.bias"] = zeros(dout)
        self.buffers["bn.running_mean"] = np.zeros(dout)
        self.buffers["bn.running_var"] = np.ones(dout)
        self._initial_buffers = {k: v.copy() for k, v in self.buffers.items()}

    def forward(self, x, train=False, causal=False, rng=None, slot=0):
        self._check(x)
        p = self.spec.padding
        padding = (2 * p, 0) if causal else (p, p)
        h = ad.relu(ad.conv1d(x, self.params["conv.weight"], self.params["conv.bias"], padding))
        return ad.batchnorm1d(h, self.params["bn.weight"], self.params["bn.bias"],
                              self._buf("bn.running_mean", slot), self._buf("bn.running_var", slot),
                              training=train)


class LSTMBlock(Block):
    """Single-layer unidirectional LSTM with output dropout; causal by construction."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        super().__init__(spec)
        din, d = spec.dim_in, spec.dim_out
        self.params["w_ih"] = xavier((din, 4 * d), din, 4 * d, rng)
        self.params["w_hh"] = Tensor(np.concatenate([orthogonal(d, rng) for _ in range(4)], axis=1),
                                     requires_grad=True)
        self.params["bias"] = zeros(4 * d)

    def forward(self, x, train=False, causal=False, rng=None, slot=0):
        self._check(x)
        b, length, _ = x.shape
        d = self.spec.dim_out
        xw = x @ self.params["w_ih"] + self.params["bias"]
        w_hh = self.params["w_hh"]
        h = Tensor(np.zeros((b, d)))
        c = Tensor(np.zeros((b, d)))
        outs = []
        for t in range(length):
            gates = xw[:, t, :] + h @ w_hh
            i = ad.sigmoid(gates[:, 0:d])
            f = ad.sigmoid(gates[:, d:2 * d])
            g = ad.tanh(gates[:, 2 * d:3 * d])
            o = ad.sigmoid(gates[:, 3 * d:])
            c = f * c + i * g
            h = o * ad.tanh(c)
            outs.append(h)
        out = ad.stack(outs, axis=1)
        return ad.dropout(out, self.spec.lstm_dropout, rng, train)


class TransformerBlock(Block):
    """Pre-norm encoder layer: multi-head self-attention then a ReLU feed-forward."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        super().__init__(spec)
        din, d = spec.dim_in, spec.dim_out
        if din != d:
            self.params["proj.weight"] = xavier((din, d), din, d, rng)
        for name in ("q", "k", "v", "o"):
            self.params[f"attn.{name}"] = xavier((d, d), d, d, rng)
        hidden = spec.ffn_mult * d
        self.params["ln1.weight"], self.params["ln1.bias"] = ones(d), zeros(d)
        self.params["ln2.weight"], self.params["ln2.bias"] = ones(d), zeros(d)
        self.params["ffn.w1"] = xavier((d, hidden), d, hidden, rng)
        self.params["ffn.b1"] = zeros(hidden)
        self.params["ffn.w2"] = xavier((hidden, d), hidden, d, rng)
        self.params["ffn.b2"] = zeros(d)

    def _attention(self, x: Tensor, causal: bool) -> Tensor:
        b, length, d = x.shape
        nh, dh = self.spec.heads, self.spec.head_dim
        p = self.params

        def heads(t: Tensor) -> Tensor:
            return t.reshape(b, length, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(x @ p["attn.q"]), heads(x @ p["attn.k"]), heads(x @ p["attn.v"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if causal:
            scores = scores + np.triu(np.full((length, length), -1e30), k=1)
        ctx = ad.softmax(scores, axis=-1) @ v
        return ctx.transpose(0, 2, 1, 3).reshape(b, length, d) @ p["attn.o"]

    def forward(self, x, train=False, causal=False, rng=None, slot=0):
        self._check(x)
        p = self.params
        x = self._linear_in(x)
        x = x + self._attention(ad.layernorm(x, p["ln1.weight"], p["ln1.bias"]), causal)
        h = ad.layernorm(x, p["ln2.weight"], p["ln2.bias"])
        h = ad.relu(h @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"]
        return x + h


class MambaBlock(Block):
    """Pre-norm selective diagonal state-space layer with SiLU gating.

    Step size and the input/readout vectors of the recurrence depend on the
    current input, so the scan is a selective one; the state is diagonal per
    channel with ``state_dim`` entries.
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        super().__init__(spec)
        din, d, n = spec.dim_in, spec.dim_out, spec.state_dim
        if din != d:
            self.params["proj.weight"] = xavier((din, d), din, d, rng)
        self.params["ln.weight"], self.params["ln.bias"] = ones(d), zeros(d)
        self.params["in_proj"] = xavier((d, 2 * d), d, 2 * d, rng)
        self.params["dt.weight"] = xavier((d, d), d, d, rng)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=d))
        self.params["dt.bias"] = Tensor(np.log(np.expm1(dt)), requires_grad=True)
        self.params["B"] = xavier((d, n), d, n, rng)
        self.params["C"] = xavier((d, n), d, n, rng)
        self.params["A_log"] = Tensor(np.log(np.tile(np.arange(1, n + 1, dtype=float), (d, 1))),
                                      requires_grad=True)
        self.params["D"] = ones(d)
        self.params["out_proj"] = xavier((d, d), d, d, rng)

    def forward(self, x, train=False, causal=False, rng=None, slot=0):
        self._check(x)
        p = self.params
        x = self._linear_in(x)
        b, length, d = x.shape
        h_in = ad.layernorm(x, p["ln.weight"], p["ln.bias"]) @ p["in_proj"]
        u, z = ad.split(h_in, 2, axis=-1)
        dt = ad.softplus(u @ p["dt.weight"] + p["dt.bias"])             # (B, L, D)
        a = -ad.exp(p["A_log"])                                          # (D, N)
        bmat = (u @ p["B"]).reshape(b, length, 1, -1)                    # (B, L, 1, N)
        cmat = (u @ p["C"]).reshape(b, length, 1, -1)
        decay = ad.exp(dt.reshape(b, length, d, 1) * a)                  # (B, L, D, N)
        drive = (dt * u).reshape(b, length, d, 1) * bmat
        states = ad.linear_recurrence(decay, drive)
        y = (states * cmat).sum(axis=-1) + u * p["D"]
        y = y * ad.silu(z)
        return x + y @ p["out_proj"]


class HyenaBlock(Block):
    """Gated long convolution whose filter is generated by a positional MLP.

    The convolution runs through a zero-padded FFT.  Causal mode uses a
    one-sided filter over lags 0..L-1; otherwise the filter spans
    -(L-1)..L-1.  No normalization.
    """

    def __init__(self, spec: BlockSpec, rng: np.random.Generator):
        super().__init__(spec)
        din, d = spec.dim_in, spec.dim_out
        if din != d:
            self.params["proj.weight"] = xavier((din, d), din, d, rng)
        feat = 1 + 2 * spec.filter_freqs
        hid = spec.filter_hidden
        self.params["in_proj"] = xavier((d, 3 * d), d, 3 * d, rng)
        self.params["filter.w1"] = xavier((feat, hid), feat, hid, rng)
        self.params["filter.b1"] = zeros(hid)
        self.params["filter.w2"] = xavier((hid, d), hid, d, rng)
        self.params["out_proj"] = xavier((d, d), d, d, rng)
        # fixed per-channel decay rates in units of 1/max_len
        self.decay = np.linspace(0.3, 3.0, d)

    def _filter(self, lags: np.ndarray) -> Tensor:
        s = self.spec
        t = lags[:, None] / s.max_len
        freqs = np.arange(1, s.filter_freqs + 1)[None, :]
        feats = np.concatenate([t, np.sin(2 * np.pi * freqs * t), np.cos(2 * np.pi * freqs * t)], 1)
        h = ad.sin(Tensor(feats) @ self.params["filter.w1"] + self.params["filter.b1"])
        window = np.exp(-np.abs(t) * self.decay[None, :] * 8.0)
        return (h @ self.params["filter.w2"]) * window

    def forward(self, x, train=False, causal=False, rng=None, slot=0):
        self._check(x)
        x = self._linear_in(x)
        length = x.shape[1]
        q, k, v = ad.split(x @ self.params["in_proj"], 3, axis=-1)
        if causal:
            filt = self._filter(np.arange(length, dtype=float))
            y = ad.fft_conv(k * v, filt)[:, :length]
        else:
            filt = self._filter(np.arange(-(length - 1), length, dtype=float))
            y = ad.fft_conv(k * v, filt)[:, length - 1:2 * length - 1]
        return x + (q * y) @ self.params["out_proj"]


_BLOCKS = {
    BlockKind.CNN: CNNBlock,
    BlockKind.LSTM: LSTMBlock,
    BlockKind.TRANSFORMER: TransformerBlock,
    BlockKind.MAMBA: MambaBlock,
    BlockKind.HYENA: HyenaBlock,
}


def build_block(spec: BlockSpec, rng: np.random.Generator) -> Block:
    return _BLOCKS[spec.kind](spec, rng)
