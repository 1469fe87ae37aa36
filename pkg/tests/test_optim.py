import numpy as np
import pytest

from seqnas.autodiff import Tensor
from seqnas.optim import AdamW, AdamWConfig, load_arrays, save_arrays, scheduled_lr, zero_grads


def test_zero_gradient_is_a_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    AdamW(AdamWConfig(lr=0.1, weight_decay=0.0)).step({"p": p})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_parameters_without_grad_are_untouched():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    a.grad = np.ones(2)
    AdamW(AdamWConfig(lr=0.1, weight_decay=0.5)).step({"a": a, "b": b})
    assert (a.data < 1).all()
    np.testing.assert_array_equal(b.data, 1.0)


def test_step_descends():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = AdamW(AdamWConfig(lr=0.1))
    for _ in range(3):
        zero_grads([p])
        (p * p).sum().backward()
        opt.step({"p": p})
    assert abs(p.data[0]) < 3.0


def test_least_squares_converges():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 3))
    w_true = np.array([1.0, -2.0, 0.5])
    y = (a @ w_true)[:, None]
    w = Tensor(np.zeros((3, 1)), requires_grad=True)
    opt = AdamW(AdamWConfig(lr=0.1, weight_decay=0.0))
    for _ in range(200):
        zero_grads([w])
        r = Tensor(a) @ w - y
        loss = (r * r).mean()
        loss.backward()
        opt.step({"w": w})
    assert float(np.mean((a @ w.data - y) ** 2)) < 1e-4


def test_nan_gradient_aborts_with_name():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.array([1.0, np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="'w'"):
        AdamW(AdamWConfig()).step({"w": p})
    np.testing.assert_array_equal(p.data, 1.0)


def test_schedule_warmup_then_linear_decay():
    cfg = AdamWConfig(lr=1.0, warmup_steps=4, total_steps=12)
    lrs = [scheduled_lr(cfg, s) for s in range(1, 13)]
    assert lrs[:4] == [0.25, 0.5, 0.75, 1.0]
    assert lrs[7] == pytest.approx(0.5)
    assert lrs[-1] == 0.0
    assert scheduled_lr(AdamWConfig(lr=0.3), 1000) == 0.3


def test_optimizer_state_round_trip(tmp_path):
    p = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    opt = AdamW(AdamWConfig(lr=0.01))
    for _ in range(3):
        p.grad = np.ones((2, 2))
        opt.step({"p": p})
    save_arrays(tmp_path / "ck", {"p": p.data, **opt.state_arrays()}, opt.meta())
    arrays, meta = load_arrays(tmp_path / "ck")
    other = AdamW(AdamWConfig(lr=0.01))
    other.load_state_arrays(arrays, meta)
    q = Tensor(arrays["p"], requires_grad=True)
    p.grad = q.grad = np.full((2, 2), 0.5)
    opt.step({"p": p})
    other.step({"p": q})
    np.testing.assert_array_equal(p.data, q.data)


def test_arrays_are_little_endian_float64(tmp_path):
    save_arrays(tmp_path / "x", {"b": np.array([1.5]), "a": np.zeros((2, 3))})
    raw = (tmp_path / "x.bin").read_bytes()
    assert len(raw) == 8 * 7
    arrays, _ = load_arrays(tmp_path / "x")
    assert arrays["b"][0] == 1.5 and arrays["a"].shape == (2, 3)
