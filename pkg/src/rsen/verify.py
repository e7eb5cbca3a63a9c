"""Gradient verification: every differentiable op, and the composed toy
network, checked against central finite differences in 64-bit mode.

All checks run at eps = 1e-5 against a 1e-4 max-relative-error threshold.
ReLU test inputs are kept away from the kink (|x| well above eps) so the
subgradient convention cannot trip the comparison.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModelConfig, forward, init_params
from .training import mse_loss

EPS = 1e-5
THRESHOLD = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < THRESHOLD


def _rand(rng: np.random.Generator, dims, lo=-1.0, hi=1.0, grad=True) -> T.Tensor:
    return T.Tensor(rng.uniform(lo, hi, size=dims), requires_grad=grad, dtype=np.float64)


def _rand_away_from_zero(rng: np.random.Generator, dims, grad=True) -> T.Tensor:
    # magnitudes in [0.05, 1]: three orders above the probe step
    mag = rng.uniform(0.05, 1.0, size=dims)
    sign = rng.choice([-1.0, 1.0], size=dims)
    return T.Tensor(mag * sign, requires_grad=grad, dtype=np.float64)


def _scalar(y: T.Tensor) -> T.Tensor:
    return T.sum_all(T.mul(y, y))


def _check(f, leaves, max_elems=None, rng=None) -> float:
    return max(T.finite_diff_check(f, leaf, EPS, max_elems=max_elems, rng=rng) for leaf in leaves)


def _conv_leaves(rng, in_ch, out_ch, k):
    w = T.Tensor(rng.normal(0, 0.3, (out_ch, in_ch, k, k)), requires_grad=True, dtype=np.float64)
    b = T.Tensor(rng.normal(0, 0.1, (1, out_ch, 1, 1)), requires_grad=True, dtype=np.float64)
    return w, b


def check_conv2d_stride1(rng) -> float:
    x = _rand(rng, (2, 3, 5, 6))
    w, b = _conv_leaves(rng, 3, 4, 3)
    f = lambda: _scalar(T.conv2d(x, T.ConvParams(w, b)))
    return _check(f, [x, w, b])


def check_conv2d_stride2(rng) -> float:
    x = _rand(rng, (1, 2, 6, 8))
    w, b = _conv_leaves(rng, 2, 3, 3)
    f = lambda: _scalar(T.conv2d(x, T.ConvParams(w, b, stride=2)))
    return _check(f, [x, w, b])


def check_conv2d_pointwise(rng) -> float:
    x = _rand(rng, (2, 4, 3, 3))
    w, b = _conv_leaves(rng, 4, 2, 1)
    f = lambda: _scalar(T.conv2d(x, T.ConvParams(w, b)))
    return _check(f, [x, w, b])


def check_relu(rng) -> float:
    x = _rand_away_from_zero(rng, (2, 3, 4, 4))
    return _check(lambda: _scalar(T.relu(x)), [x])


def check_sigmoid(rng) -> float:
    x = _rand(rng, (2, 3, 4, 4), lo=-3.0, hi=3.0)
    return _check(lambda: _scalar(T.sigmoid(x)), [x])


def check_global_avg_pool(rng) -> float:
    x = _rand(rng, (2, 3, 5, 4))
    return _check(lambda: _scalar(T.global_avg_pool(x)), [x])


def check_pixel_shuffle(rng) -> float:
    x = _rand(rng, (1, 8, 3, 2))
    return _check(lambda: _scalar(T.pixel_shuffle(x, 2)), [x])


def check_space_to_depth(rng) -> float:
    x = _rand(rng, (1, 2, 6, 4))
    return _check(lambda: _scalar(T.space_to_depth(x, 2)), [x])


def check_add(rng) -> float:
    x = _rand(rng, (2, 2, 3, 3))
    y = _rand(rng, (2, 2, 3, 3))
    return _check(lambda: _scalar(T.add(x, y)), [x, y])


def check_sub(rng) -> float:
    x = _rand(rng, (2, 2, 3, 3))
    y = _rand(rng, (2, 2, 3, 3))
    return _check(lambda: _scalar(T.sub(x, y)), [x, y])


def check_mul(rng) -> float:
    x = _rand(rng, (1, 3, 4, 2))
    y = _rand(rng, (1, 3, 4, 2))
    return _check(lambda: _scalar(T.mul(x, y)), [x, y])


def check_scale(rng) -> float:
    x = _rand(rng, (1, 2, 3, 3))
    return _check(lambda: _scalar(T.scale(x, -1.7)), [x])


def check_sum_all(rng) -> float:
    x = _rand(rng, (2, 2, 3, 3))
    return _check(lambda: T.sum_all(T.mul(x, x)), [x])


def check_channel_scale(rng) -> float:
    x = _rand(rng, (2, 3, 4, 4))
    s = _rand(rng, (2, 3, 1, 1))
    return _check(lambda: _scalar(T.channel_scale(x, s)), [x, s])


def check_reflect_pad(rng) -> float:
    x = _rand(rng, (1, 2, 5, 6))
    return _check(lambda: _scalar(T.reflect_pad_br(x, 3, 2)), [x])


def check_crop(rng) -> float:
    x = _rand(rng, (1, 2, 6, 6))
    return _check(lambda: _scalar(T.crop_br(x, 4, 5)), [x])


def check_mse_loss(rng) -> float:
    x = _rand(rng, (2, 3, 4, 4))
    target = _rand(rng, (2, 3, 4, 4), grad=False)
    return _check(lambda: mse_loss(x, target), [x])


OP_CHECKS = {
    "conv2d_stride1": check_conv2d_stride1,
    "conv2d_stride2": check_conv2d_stride2,
    "conv2d_pointwise": check_conv2d_pointwise,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "global_avg_pool": check_global_avg_pool,
    "pixel_shuffle": check_pixel_shuffle,
    "space_to_depth": check_space_to_depth,
    "add": check_add,
    "sub": check_sub,
    "mul": check_mul,
    "scale": check_scale,
    "sum_all": check_sum_all,
    "channel_scale": check_channel_scale,
    "reflect_pad": check_reflect_pad,
    "crop": check_crop,
    "mse_loss": check_mse_loss,
}


def check_model(rng: np.random.Generator, channel_scale: float = 0.25, elems_per_leaf: int = 3) -> float:
    """Finite-difference check of the full toy network loss against every
    parameter, sampling a few coordinates per tensor (an exhaustive sweep
    would need two forward passes per scalar)."""
    cfg = ModelConfig(channel_scale=channel_scale)
    store = init_params(cfg, seed=0, dtype=np.float64)
    # parameters ~ N(0, 0.1) exercise every branch away from degenerate zeros
    for _, t in store.items():
        t.data = rng.normal(0.0, 0.1, size=t.dims)
    image = T.Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)), dtype=np.float64)
    target = T.Tensor(rng.uniform(0.0, 1.0, (1, 3, 16, 16)), dtype=np.float64)

    def f() -> T.Tensor:
        _, restored = forward(image, store, cfg)
        return mse_loss(restored, target)

    worst = 0.0
    for name in store.names():
        err = T.finite_diff_check(f, store[name], EPS, max_elems=elems_per_leaf, rng=rng)
        worst = max(worst, err)
    return worst


@contextmanager
def corrupted_gradient(op_name: str, factor: float = 1.05):
    """Test hook: temporarily wrap a tensor op so its backward rule is
    wrong by ``factor``. Lets the suite prove it actually catches bad
    gradient rules."""
    if hasattr(T, op_name):
        target = op_name
    elif op_name.startswith("conv2d"):
        target = "conv2d"
    else:
        raise ValueError(f"unknown op {op_name!r}")
    original = getattr(T, target)

    def tampered(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:
            def skewed():
                inner()
                for parent in out._prev:
                    if parent.grad is not None:
                        parent.grad = parent.grad * factor
            out._backward = skewed
        return out

    setattr(T, target, tampered)
    try:
        yield
    finally:
        setattr(T, target, original)


def run_all(channel_scale: float = 0.25, seed: int = 0) -> list[CheckResult]:
    """Run every op check plus the composed-model check."""
    results = []
    for name, fn in OP_CHECKS.items():
        results.append(CheckResult(name, fn(np.random.default_rng(seed))))
    results.append(CheckResult("model", check_model(np.random.default_rng(seed), channel_scale)))
    return results
