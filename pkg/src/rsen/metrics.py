"""PSNR and SSIM in the RGB color space, batch evaluation and a forward
runtime benchmark.

PSNR averages the squared error over all 3*H*W values jointly (no luma
conversion). SSIM is the classic single-scale form: 11x11 Gaussian window
with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, computed per RGB
channel on the fully-overlapping (valid) region and averaged.
"""

from __future__ import annotations

import math
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError
from .model import ModelConfig, ParameterStore, forward
from .tensor import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """10*log10(peak^2 / mse) in dB; identical images give +inf."""
    if a.dims != b.dims:
        raise DimensionError(f"psnr: dims mismatch {a.dims} vs {b.dims}")
    if peak <= 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    mse = float(np.mean(np.square(a.data.astype(np.float64) - b.data.astype(np.float64))))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable filtering; cropping the half-window border afterwards makes
    # the padding mode irrelevant (exact "valid" result)
    half = len(window) // 2
    out = ndimage.correlate1d(img, window, axis=0, mode="constant")
    out = ndimage.correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean structural similarity over channels and window positions."""
    if a.dims != b.dims:
        raise DimensionError(f"ssim: dims mismatch {a.dims} vs {b.dims}")
    n, c, h, w = a.dims
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"ssim: images must be at least {SSIM_WINDOW}px per side, got {h}x{w}")
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    values = []
    for i in range(n):
        for ch in range(c):
            x = a.data[i, ch].astype(np.float64)
            y = b.data[i, ch].astype(np.float64)
            mu_x = _valid_filter(x, window)
            mu_y = _valid_filter(y, window)
            var_x = _valid_filter(x * x, window) - mu_x * mu_x
            var_y = _valid_filter(y * y, window) - mu_y * mu_y
            cov = _valid_filter(x * y, window) - mu_x * mu_y
            num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
            den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
            values.append(float(np.mean(num / den)))
    return float(np.mean(values))


@dataclass
class EvalRow:
    id: str
    psnr_db: float
    ssim: float
    seconds: float | None = None


@dataclass
class EvalReport:
    """Per-image metric rows plus aggregates.

    Rows with infinite PSNR (identical images) are excluded from the PSNR
    mean, with a warning; they still count toward the SSIM mean.
    """

    rows: list[EvalRow] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        finite = [r.psnr_db for r in self.rows if math.isfinite(r.psnr_db)]
        skipped = len(self.rows) - len(finite)
        if skipped:
            warnings.warn(f"{skipped} identical image(s) excluded from the PSNR mean")
        if not finite:
            return math.inf if self.rows else math.nan
        return float(np.mean(finite))

    @property
    def mean_ssim(self) -> float:
        if not self.rows:
            return math.nan
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["id,psnr,ssim"]
        lines.extend(f"{r.id},{r.psnr_db:.6f},{r.ssim:.6f}" for r in self.rows)
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return f"images={len(self.rows)} mean_psnr={self.mean_psnr:.4f}dB mean_ssim={self.mean_ssim:.4f}"


def eval_pairs(pairs: list[tuple[str, Tensor, Tensor]]) -> EvalReport:
    """Metric rows for (id, prediction, ground truth) triples, sorted by id."""
    rows = [
        EvalRow(id=pid, psnr_db=psnr(pred, gt), ssim=ssim(pred, gt))
        for pid, pred, gt in sorted(pairs, key=lambda item: item[0].encode())
    ]
    return EvalReport(rows=rows)


def eval_dir(pred_dir: Path, gt_dir: Path) -> EvalReport:
    """Evaluate every PNG in ``pred_dir`` against its same-named ground
    truth in ``gt_dir``."""
    from .data import load_image

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_names = {p.name for p in pred_dir.glob("*.png")}
    gt_names = {p.name for p in gt_dir.glob("*.png")}
    if pred_names != gt_names:
        unmatched = sorted(pred_names ^ gt_names)
        raise ValueError(f"prediction/ground-truth sets differ; unmatched: {', '.join(unmatched)}")
    triples = [(name, load_image(pred_dir / name), load_image(gt_dir / name)) for name in pred_names]
    return eval_pairs(triples)


def bench_forward(
    store: ParameterStore,
    cfg: ModelConfig,
    size: int,
    repeats: int,
    warmup: int = 1,
    seed: int = 0,
) -> float:
    """Median wall-clock seconds for one forward pass on a 3 x size x size
    image; warm-up runs are excluded."""
    if size % 4 != 0 or size < 4:
        raise ValueError(f"bench size must be a positive multiple of 4, got {size}")
    if repeats < 1:
        raise ValueError(f"repeats must be positive, got {repeats}")
    image = Tensor(np.random.default_rng(seed).random((1, 3, size, size), dtype=np.float32))
    frozen = store.with_requires_grad(False)
    times = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        forward(image, frozen, cfg)
        elapsed = time.perf_counter() - t0
        if i >= warmup:
            times.append(elapsed)
    return float(statistics.median(times))
