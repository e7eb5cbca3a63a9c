"""The deraining network: a two-level encoder-decoder built from residual
squeeze-and-excitation blocks.

The network predicts the rain streak layer and subtracts it from the input,
so an all-zero parameter set with residual connections enabled is exactly
the identity map. Architecture toggles (skip projections, residual adds,
SE gates) can be switched off independently for ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    ConvParams,
    Tensor,
    add,
    channel_scale,
    conv2d,
    crop_br,
    global_avg_pool,
    pixel_shuffle,
    reflect_pad_br,
    relu,
    sigmoid,
    sub,
)

# two stride-2 encoder levels; inputs are padded to a multiple of this
SPATIAL_MULTIPLE = 4

# config-file field types, shared by the config loader and the checkpoint text
CONFIG_FIELD_TYPES = {
    "base_channels": int,
    "levels": int,
    "bottleneck_blocks": int,
    "se_squeeze": int,
    "use_skip": bool,
    "use_res": bool,
    "use_se": bool,
    "channel_scale": float,
}


@dataclass
class ModelConfig:
    """Architecture hyperparameters plus ablation toggles.

    ``channel_scale`` divides every channel width for desk-scale runs;
    shape and gradient behavior do not depend on it.
    """

    base_channels: int = 64
    levels: int = 2
    bottleneck_blocks: int = 3
    se_squeeze: int = 6
    use_skip: bool = True
    use_res: bool = True
    use_se: bool = True
    channel_scale: float = 1.0

    def __post_init__(self):
        if self.levels != 2:
            raise ConfigError(f"model.levels is fixed at 2, got {self.levels}")
        if self.base_channels < 1 or self.bottleneck_blocks < 1 or self.se_squeeze < 1:
            raise ConfigError("model.base_channels, bottleneck_blocks and se_squeeze must be positive")
        if self.channel_scale <= 0:
            raise ConfigError(f"model.channel_scale must be positive, got {self.channel_scale}")
        scaled = self.base_channels * self.channel_scale
        if abs(scaled - round(scaled)) > 1e-9 or round(scaled) < 1:
            raise ConfigError(
                f"model.base_channels * channel_scale must be a positive integer, got {scaled}"
            )
        if self.use_se and self.width < self.se_squeeze:
            raise ConfigError(
                f"narrowest width {self.width} is below se_squeeze {self.se_squeeze}"
            )

    @property
    def width(self) -> int:
        """Channel width after the input block."""
        return int(round(self.base_channels * self.channel_scale))


@dataclass(frozen=True)
class ConvSpec:
    """Name and geometry of one convolution layer."""

    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1

    @property
    def weight_dims(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch, self.kernel, self.kernel)

    @property
    def param_count(self) -> int:
        return self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch


def conv_specs(cfg: ModelConfig) -> list[ConvSpec]:
    """Every convolution in the network, in wiring order.

    This list is the single source of truth for parameter names and dims;
    initialization, counting, checkpoint validation and the forward pass
    all derive from it.
    """
    c0 = cfg.width
    specs: list[ConvSpec] = []

    def rse(prefix: str, ch: int) -> None:
        specs.append(ConvSpec(f"{prefix}/conv1", ch, ch, 3))
        specs.append(ConvSpec(f"{prefix}/conv2", ch, ch, 3))
        if cfg.use_se:
            specs.append(ConvSpec(f"{prefix}/se/squeeze", ch, cfg.se_squeeze, 1))
            specs.append(ConvSpec(f"{prefix}/se/excite", cfg.se_squeeze, ch, 1))

    specs.append(ConvSpec("encoder/in/conv", 3, c0, 3))
    rse("encoder/in/rse", c0)
    specs.append(ConvSpec("encoder/down1/conv", c0, 2 * c0, 3, stride=2))
    rse("encoder/down1/rse", 2 * c0)
    specs.append(ConvSpec("encoder/down2/conv", 2 * c0, 4 * c0, 3, stride=2))
    rse("encoder/down2/rse", 4 * c0)
    for i in range(cfg.bottleneck_blocks):
        rse(f"bottleneck/rse{i + 1}", 4 * c0)
    # upsampling: point-wise conv to 4x the target width, then shuffle r=2
    rse("decoder/up1/rse", 4 * c0)
    specs.append(ConvSpec("decoder/up1/conv", 4 * c0, 8 * c0, 1))
    if cfg.use_skip:
        specs.append(ConvSpec("decoder/skip1/conv", 2 * c0, 2 * c0, 1))
    rse("decoder/up2/rse", 2 * c0)
    specs.append(ConvSpec("decoder/up2/conv", 2 * c0, 4 * c0, 1))
    if cfg.use_skip:
        specs.append(ConvSpec("decoder/skip2/conv", c0, c0, 1))
    rse("decoder/out/rse", c0)
    specs.append(ConvSpec("decoder/out/conv", c0, 3, 3))
    return specs


_GROUPS = ("encoder/", "bottleneck/", "decoder/")


@dataclass
class ParameterStore:
    """Named map of learnable tensors, partitioned into encoder, bottleneck
    and decoder groups."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            if not name.startswith(_GROUPS):
                raise ConfigError(f"parameter {name!r} is outside the encoder/bottleneck/decoder groups")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def element_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def gradients(self) -> dict[str, np.ndarray]:
        """Per-parameter gradients after a backward pass; parameters the
        graph never reached get zeros."""
        return {
            name: (np.zeros(t.dims, dtype=t.dtype) if t.grad is None else t.grad)
            for name, t in self.tensors.items()
        }

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({name: t.astype(dtype) for name, t in self.tensors.items()})

    def with_requires_grad(self, flag: bool) -> "ParameterStore":
        return ParameterStore(
            {name: Tensor(t.data, requires_grad=flag) for name, t in self.tensors.items()}
        )


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32, requires_grad: bool = True) -> ParameterStore:
    """Glorot-uniform weights, zero biases, deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for spec in conv_specs(cfg):
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        fan_out = spec.out_ch * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=spec.weight_dims).astype(dtype)
        tensors[f"{spec.name}.weight"] = Tensor(w, requires_grad=requires_grad)
        tensors[f"{spec.name}.bias"] = Tensor(
            np.zeros((1, spec.out_ch, 1, 1), dtype=dtype), requires_grad=requires_grad
        )
    return ParameterStore(tensors)


def param_count(cfg: ModelConfig) -> int:
    """Total learnable scalar count, from layer geometry alone."""
    return sum(spec.param_count for spec in conv_specs(cfg))


def _conv(x: Tensor, store: ParameterStore, name: str, stride: int = 1) -> Tensor:
    return conv2d(x, ConvParams(store[f"{name}.weight"], store[f"{name}.bias"], stride=stride))


def se_block(x: Tensor, squeeze: ConvParams, excite: ConvParams) -> Tensor:
    """Channel attention: pool, bottleneck, expand, sigmoid gate, rescale."""
    s = global_avg_pool(x)
    s = relu(conv2d(s, squeeze))
    s = sigmoid(conv2d(s, excite))
    return channel_scale(x, s)


def rse_block(x: Tensor, store: ParameterStore, prefix: str, cfg: ModelConfig) -> Tensor:
    """Two 3x3 convs with an interior ReLU (no normalization), an optional
    residual add, then an optional SE gate. Preserves dims."""
    y = _conv(x, store, f"{prefix}/conv1")
    y = relu(y)
    y = _conv(y, store, f"{prefix}/conv2")
    if cfg.use_res:
        y = add(y, x)
    if cfg.use_se:
        y = se_block(
            y,
            ConvParams(store[f"{prefix}/se/squeeze.weight"], store[f"{prefix}/se/squeeze.bias"]),
            ConvParams(store[f"{prefix}/se/excite.weight"], store[f"{prefix}/se/excite.bias"]),
        )
    return y


def forward(image: Tensor, store: ParameterStore, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Run the network on an (n, 3, h, w) image batch.

    Returns ``(streaks, restored)`` where ``restored = image - streaks``.
    Inputs whose sides are not multiples of 4 are mirror-padded on the
    bottom/right, and the predicted streak layer is cropped back, so output
    dims always equal input dims.
    """
    n, c, h, w = image.dims
    if c != 3:
        raise DimensionError(f"expected a 3-channel image batch, got dims {image.dims}")

    x = reflect_pad_br(image, (-h) % SPATIAL_MULTIPLE, (-w) % SPATIAL_MULTIPLE)

    e1 = rse_block(relu(_conv(x, store, "encoder/in/conv")), store, "encoder/in/rse", cfg)
    e2 = rse_block(relu(_conv(e1, store, "encoder/down1/conv", stride=2)), store, "encoder/down1/rse", cfg)
    feat = rse_block(relu(_conv(e2, store, "encoder/down2/conv", stride=2)), store, "encoder/down2/rse", cfg)

    for i in range(cfg.bottleneck_blocks):
        feat = rse_block(feat, store, f"bottleneck/rse{i + 1}", cfg)

    d = rse_block(feat, store, "decoder/up1/rse", cfg)
    d = pixel_shuffle(relu(_conv(d, store, "decoder/up1/conv")), 2)
    if cfg.use_skip:
        d = add(d, _conv(e2, store, "decoder/skip1/conv"))
    d = rse_block(d, store, "decoder/up2/rse", cfg)
    d = pixel_shuffle(relu(_conv(d, store, "decoder/up2/conv")), 2)
    if cfg.use_skip:
        d = add(d, _conv(e1, store, "decoder/skip2/conv"))
    d = rse_block(d, store, "decoder/out/rse", cfg)

    streaks = crop_br(_conv(d, store, "decoder/out/conv"), h, w)
    restored = sub(image, streaks)
    return streaks, restored
