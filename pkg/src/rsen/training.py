"""Loss, Adam optimization, learning-rate schedule and the patch-based
training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import ImagePair
from .errors import ConfigError, DivergenceError
from .metrics import psnr
from .model import ModelConfig, ParameterStore, forward, init_params
from .tensor import Tensor, mul, scale, sub, sum_all


def mse_loss(restored: Tensor, target: Tensor) -> Tensor:
    """Half mean squared error per image, averaged over the batch:
    sum((restored - target)^2) / (2 * H * W * C * N)."""
    n, c, h, w = restored.dims
    d = sub(restored, target)
    return scale(sum_all(mul(d, d)), 1.0 / (2.0 * h * w * c * n))


@dataclass
class TrainConfig:
    batch_size: int = 4
    patch_size: int = 256
    epochs: int = 700
    lr0: float = 1e-4
    lr_halve_every: int = 150
    seed: int = 0
    checkpoint_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "epochs", "lr_halve_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr0 <= 0:
            raise ConfigError(f"train.lr0 must be positive, got {self.lr0}")
        if self.patch_size % 4 != 0:
            raise ConfigError(f"train.patch_size must be divisible by 4, got {self.patch_size}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr0 halved every ``lr_halve_every`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halve_every)


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_store(cls, store: ParameterStore) -> "AdamState":
        return cls(
            m={name: np.zeros(t.dims, dtype=t.dtype) for name, t in store.items()},
            v={name: np.zeros(t.dims, dtype=t.dtype) for name, t in store.items()},
        )


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[ParameterStore, AdamState]:
    """One bias-corrected Adam update. Returns a fresh store; the moment
    buffers in ``state`` are updated in place.

    A non-finite gradient rejects the whole step: the parameters are about
    to diverge and the caller should stop with its last good checkpoint.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name}")

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    updated: dict[str, Tensor] = {}
    for name, p in store.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        updated[name] = Tensor((p.data - step).astype(p.dtype), requires_grad=True)
    return ParameterStore(updated), state


def sample_patch(
    pair: ImagePair, size: int, rng: np.random.Generator
) -> tuple[Tensor, Tensor, tuple[int, int]]:
    """Crop one aligned size x size window, uniform over valid offsets.

    This is a pure crop: no flips, no rotations, no photometric changes.
    Returns (rainy patch, clean patch, (top, left)).
    """
    _, _, h, w = pair.rainy.dims
    if h < size or w < size:
        raise ValueError(f"pair {pair.id!r} is {h}x{w}, smaller than patch size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    rainy = Tensor(pair.rainy.data[:, :, top : top + size, left : left + size].copy())
    clean = Tensor(pair.clean.data[:, :, top : top + size, left : left + size].copy())
    return rainy, clean, (top, left)


@dataclass
class LogRow:
    epoch: int
    iteration: int
    lr: float
    loss: float
    val_psnr: float

    def as_csv(self) -> str:
        return f"{self.epoch},{self.iteration},{self.lr:.10g},{self.loss:.10g},{self.val_psnr:.6f}"


LOG_HEADER = "epoch,iter,lr,loss,val_psnr"


@dataclass
class TrainResult:
    store: ParameterStore
    rows: list[LogRow] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss

    @property
    def initial_loss(self) -> float:
        return self.rows[0].loss


def _batch_tensor(patches: list[Tensor]) -> Tensor:
    dims = {p.dims for p in patches}
    if len(dims) != 1:
        raise ValueError(
            f"cannot batch mixed patch dims {sorted(dims)}; use equal-sized images or a smaller patch"
        )
    return Tensor(np.concatenate([p.data for p in patches], axis=0))


def train(
    pairs: list[ImagePair],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Path | None = None,
    store: ParameterStore | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Patch-based training over aligned rainy/clean pairs.

    One epoch draws one random patch from every pair, in a seeded shuffled
    order, grouped into batches. The run is deterministic for a fixed seed.
    The last pair (by filename sort) doubles as the PSNR monitoring image;
    its restored-vs-clean PSNR is evaluated once per epoch and attached to
    that epoch's log rows.

    When ``out_dir`` is given, a checkpoint is written every
    ``checkpoint_every`` epochs and at the end, plus a CSV log; on a
    divergence abort the last good checkpoint stays on disk.
    """
    if not pairs:
        raise ValueError("training needs a non-empty dataset of aligned pairs")

    rng = np.random.default_rng(train_cfg.seed)
    if store is None:
        store = init_params(model_cfg, train_cfg.seed)
    state = AdamState.for_store(store)
    monitor = pairs[-1]
    rows: list[LogRow] = []
    iteration = 0

    def save(epoch_done: int) -> None:
        if out_dir is not None:
            save_checkpoint(
                store, model_cfg, Path(out_dir) / "model.ckpt",
                meta={"train.completed_epochs": str(epoch_done)},
            )

    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_schedule(epoch, train_cfg)
        order = rng.permutation(len(pairs))
        epoch_log: list[tuple[int, float]] = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch_ids = order[lo : lo + train_cfg.batch_size]
            rainy_patches, clean_patches = [], []
            for i in batch_ids:
                try:
                    r, c, _ = sample_patch(pairs[i], train_cfg.patch_size, rng)
                except ValueError:
                    r, c = pairs[i].rainy.detach(), pairs[i].clean.detach()
                rainy_patches.append(r)
                clean_patches.append(c)
            _, restored = forward(_batch_tensor(rainy_patches), store, model_cfg)
            loss = mse_loss(restored, _batch_tensor(clean_patches))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, iteration {iteration}")
            loss.backward()
            store, state = adam_step(store, store.gradients(), state, lr)
            epoch_log.append((iteration, loss_val))
            iteration += 1

        _, monitored = forward(monitor.rainy, store, model_cfg)
        val = psnr(monitored, monitor.clean)
        rows.extend(LogRow(epoch, it, lr, lo_, val) for it, lo_ in epoch_log)
        if (epoch + 1) % train_cfg.checkpoint_every == 0:
            save(epoch + 1)

    save(train_cfg.epochs)
    return TrainResult(store=store, rows=rows)
