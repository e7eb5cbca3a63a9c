"""Paired image ingestion, PNG I/O and synthetic rain generation.

The synthetic degradation is strictly additive: an achromatic streak layer
is rendered from seeded randomness and added onto the clean background, so
a generated pair is exact ground truth for the subtraction the network
learns.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class ImagePair:
    """Aligned rainy/clean images, each (1, 3, h, w) in [0, 1]."""

    rainy: Tensor
    clean: Tensor
    id: str

    def __post_init__(self):
        if self.rainy.dims != self.clean.dims:
            raise DimensionError(
                f"pair {self.id!r}: rainy dims {self.rainy.dims} != clean dims {self.clean.dims}"
            )


def load_image(path: Path) -> Tensor:
    """Read an 8-bit RGB PNG into a (1, 3, h, w) tensor on [0, 1].

    Other modes (grayscale, palette, alpha, 16-bit) are rejected rather
    than converted.
    """
    with Image.open(path) as img:
        if img.format != "PNG":
            raise ValueError(f"{path}: expected PNG, got {img.format}")
        if img.mode != "RGB":
            raise ValueError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def save_image(t: Tensor, path: Path) -> None:
    """Write a (1, 3, h, w) tensor as 8-bit RGB PNG.

    Values are clamped to [0, 1] then rounded half-up, so outputs are
    byte-reproducible.
    """
    if t.dims[0] != 1 or t.dims[1] != 3:
        raise DimensionError(f"save_image expects dims (1, 3, h, w), got {t.dims}")
    clipped = np.clip(t.data[0], 0.0, 1.0)
    quantized = np.floor(clipped * 255.0 + 0.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_pair_dir(root: Path) -> list[ImagePair]:
    """Load `<root>/rainy` and `<root>/clean` PNGs matched by filename,
    sorted byte-wise so ordering is stable across platforms."""
    root = Path(root)
    rainy_dir, clean_dir = root / "rainy", root / "clean"
    for d in (rainy_dir, clean_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory: {d}")
    rainy_names = {p.name for p in rainy_dir.glob("*.png")}
    clean_names = {p.name for p in clean_dir.glob("*.png")}
    for orphan in sorted(rainy_names - clean_names):
        raise ValueError(f"{rainy_dir / orphan} has no clean counterpart")
    for orphan in sorted(clean_names - rainy_names):
        raise ValueError(f"{clean_dir / orphan} has no rainy counterpart")
    pairs = []
    for name in sorted(rainy_names, key=lambda s: s.encode()):
        pairs.append(
            ImagePair(
                rainy=load_image(rainy_dir / name),
                clean=load_image(clean_dir / name),
                id=name,
            )
        )
    return pairs


@dataclass
class StreakParams:
    """Knobs for the rain streak renderer."""

    count: int = 120
    angle: float = 20.0
    length: float = 18.0
    width: float = 1.5
    intensity: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError(f"rain.intensity must be in [0, 1], got {self.intensity}")
        if self.count < 0:
            raise ConfigError(f"rain.count must be non-negative, got {self.count}")
        if self.length <= 0 or self.width <= 0:
            raise ConfigError("rain.length and rain.width must be positive")
        if not -45.0 <= self.angle <= 45.0:
            raise ConfigError(f"rain.angle must be in [-45, 45] degrees, got {self.angle}")


def _render_streaks(h: int, w: int, p: StreakParams, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased line segments splatted onto a canvas, blurred along the
    mean streak direction, normalized to peak 1."""
    canvas = np.zeros((h, w), dtype=np.float64)
    step = 0.5
    for _ in range(p.count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        theta = np.deg2rad(p.angle + rng.normal(0.0, 2.0))
        length = p.length * rng.uniform(0.6, 1.4)
        brightness = rng.uniform(0.4, 1.0) * step
        # direction measured from vertical: rain falls downward
        dy, dx = np.cos(theta), np.sin(theta)
        ts = np.arange(-length / 2.0, length / 2.0, step)
        lanes = max(1, int(round(p.width)))
        for lane in range(lanes):
            off = (lane - (lanes - 1) / 2.0) * 1.0
            ys = cy + ts * dy + off * dx
            xs = cx + ts * dx - off * dy
            y0 = np.floor(ys).astype(int)
            x0 = np.floor(xs).astype(int)
            fy = ys - y0
            fx = xs - x0
            for ddy, ddx, wgt in (
                (0, 0, (1 - fy) * (1 - fx)),
                (0, 1, (1 - fy) * fx),
                (1, 0, fy * (1 - fx)),
                (1, 1, fy * fx),
            ):
                yy = y0 + ddy
                xx = x0 + ddx
                inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                np.add.at(canvas, (yy[inside], xx[inside]), brightness * wgt[inside])
    if canvas.max() <= 0.0:
        return canvas
    # short blur along the mean direction softens the splat combs
    klen = 5
    kernel = np.zeros((klen, klen))
    center = klen // 2
    theta = np.deg2rad(p.angle)
    for i in range(klen):
        t = i - center
        ky = int(round(center + t * np.cos(theta)))
        kx = int(round(center + t * np.sin(theta)))
        kernel[np.clip(ky, 0, klen - 1), np.clip(kx, 0, klen - 1)] += 1.0
    kernel /= kernel.sum()
    canvas = ndimage.convolve(canvas, kernel, mode="constant")
    return canvas / canvas.max()


def synthesize_rain(clean: Tensor, p: StreakParams, pair_id: str = "synth") -> ImagePair:
    """Degrade a clean [0, 1] image with an additive achromatic streak layer.

    The layer is non-negative and identical across the three channels; the
    rainy image is ``clamp(clean + intensity * streaks, 0, 1)``. Rendering
    is deterministic for a fixed seed and does not modify ``clean``.
    """
    _, _, h, w = clean.dims
    rng = np.random.default_rng(p.seed)
    streaks = _render_streaks(h, w, p, rng) if p.count > 0 else np.zeros((h, w))
    rain_layer = (p.intensity * streaks).astype(clean.data.dtype)
    rainy = np.clip(clean.data + rain_layer[None, None], 0.0, 1.0)
    return ImagePair(rainy=Tensor(rainy), clean=Tensor(clean.data.copy()), id=pair_id)
