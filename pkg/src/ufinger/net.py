"""The U-shaped multi-scale encoder-decoder and its shape arithmetic.

Topology for three scales::

    e0 = enc0(x)          d2 = dec2(e2)
    e1 = enc1(pool(e0))   d1 = dec1(up(d2), skip=e1)
    e2 = enc2(pool(e1))   d0 = dec0(up(d1), skip=e0)
                          out = head(d0)          # 1x1 conv, linear

Each module is a 3x3 conv followed by a bottleneck residual block
(1x1 -> 3x3 -> 1x1), every conv followed by batch norm and ReLU except the
last one, whose output is added to the (cropped) block input before the final
ReLU. With valid padding every 3x3 conv shrinks the map by ``2 * dilation``,
so skips and residuals are centre-cropped to the branch they join.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .ops import ConvSpec
from .tensor import Tensor

PRESETS_AXES = {
    "base": ("same", 1),
    "nopad": ("valid", 1),
    "ufinger": ("valid", 3),
}

LABELS = {
    "base": "Base-model",
    "nopad": "Base-model without padding",
    "ufinger": "U-Finger",
}

KERNEL_PLAN = (3, 1, 3, 1)


@dataclass(frozen=True)
class NetworkConfig:
    scales: int = 3
    dilation: int = 3
    padding_mode: str = "valid"
    fusion: str = "concat"
    enc_channels: tuple = (128, 32, 32, 128)
    dec_channels: tuple = (256, 64, 64, 256)
    kernel_plan: tuple = KERNEL_PLAN

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(self.dec_channels))
        object.__setattr__(self, "kernel_plan", tuple(self.kernel_plan))
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.scales, int) or self.scales < 2:
            raise ConfigError(f"scales must be an integer >= 2, got {self.scales!r}")
        if not isinstance(self.dilation, int) or self.dilation < 1:
            raise ConfigError(f"dilation must be an integer >= 1, got {self.dilation!r}")
        if self.padding_mode not in ("valid", "same"):
            raise ConfigError(f"padding_mode must be 'valid' or 'same', got {self.padding_mode!r}")
        if self.fusion not in ("concat", "sum"):
            raise ConfigError(f"fusion must be 'concat' or 'sum', got {self.fusion!r}")
        for label, chans in (("enc_channels", self.enc_channels), ("dec_channels", self.dec_channels)):
            if len(chans) != 4 or any(int(c) < 1 for c in chans):
                raise ConfigError(f"{label} must list 4 positive widths, got {chans!r}")
            if chans[0] != chans[3]:
                raise ConfigError(f"{label}: residual add needs first and last widths equal")
        if self.kernel_plan != KERNEL_PLAN:
            raise ConfigError(f"kernel_plan is fixed to {KERNEL_PLAN}, got {self.kernel_plan!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetworkConfig":
        try:
            padding, dilation = PRESETS_AXES[name]
        except KeyError:
            raise ConfigError(f"unknown config {name!r}; choose from {sorted(PRESETS_AXES)}") from None
        return cls(padding_mode=padding, dilation=dilation, **overrides)

    @property
    def name(self) -> Optional[str]:
        """Preset name matching the ablation axes, if any."""
        for key, axes in PRESETS_AXES.items():
            if axes == (self.padding_mode, self.dilation):
                return key
        return None

    @property
    def label(self) -> str:
        key = self.name
        return LABELS[key] if key else f"{self.padding_mode}/d={self.dilation}"


# --------------------------------------------------------------------------
# layer table


@dataclass(frozen=True)
class Layer:
    name: str
    spec: ConvSpec
    bn: Optional[str]  # batch-norm prefix, None for bare convs


def _module_layers(prefix: str, cin: int, widths: tuple, cfg: NetworkConfig) -> list[Layer]:
    layers = []
    names = ["conv1", "res.conv1", "res.conv2", "res.conv3"]
    bns = ["bn1", "res.bn1", "res.bn2", "res.bn3"]
    c = cin
    for conv, bn, k, cout in zip(names, bns, cfg.kernel_plan, widths):
        spec = ConvSpec(c, int(cout), k, cfg.dilation if k > 1 else 1, cfg.padding_mode)
        layers.append(Layer(f"{prefix}.{conv}", spec, f"{prefix}.{bn}"))
        c = int(cout)
    return layers


def decoder_in_channels(cfg: NetworkConfig, index: int) -> int:
    if index == cfg.scales - 1:
        return cfg.enc_channels[3]
    if cfg.fusion == "concat":
        return cfg.dec_channels[3] + cfg.enc_channels[3]
    return cfg.dec_channels[3]


def layer_table(cfg: NetworkConfig) -> list[Layer]:
    """Every conv of the network in forward order."""
    table: list[Layer] = []
    for i in range(cfg.scales):
        cin = 1 if i == 0 else cfg.enc_channels[3]
        table += _module_layers(f"enc{i}", cin, cfg.enc_channels, cfg)
    for i in range(cfg.scales - 1, -1, -1):
        if i < cfg.scales - 1 and cfg.fusion == "sum":
            spec = ConvSpec(cfg.enc_channels[3], cfg.dec_channels[3], 1, 1, cfg.padding_mode)
            table.append(Layer(f"dec{i}.proj", spec, None))
        table += _module_layers(f"dec{i}", decoder_in_channels(cfg, i), cfg.dec_channels, cfg)
    table.append(Layer("head", ConvSpec(cfg.dec_channels[3], 1, 1, 1, cfg.padding_mode), None))
    return table


# --------------------------------------------------------------------------
# shape tracing


@dataclass
class ShapeTrace:
    stages: list = field(default_factory=list)  # (stage name, (h, w), channels)
    min_input: int = 0

    @property
    def output(self) -> tuple:
        return self.stages[-1][1]

    def format(self) -> str:
        lines = [f"{name:<12s} {h:>5d} x {w:<5d} {c:>4d} ch" for name, (h, w), c in self.stages]
        return "\n".join(lines)


def _trace_module(prefix, layers, hw, stages):
    """Apply one module's conv shape rules and return its output extents."""
    for layer in layers:
        h, w = (layer.spec.output_size(v) for v in hw)
        if h < 1 or w < 1:
            raise ShapeError(
                f"stage {layer.name}: input {hw[0]}x{hw[1]} is smaller than "
                f"kernel extent {layer.spec.extent}"
            )
        hw = (h, w)
    stages.append((prefix, hw, layers[-1].spec.out_channels))
    return hw


def _trace(cfg: NetworkConfig, height: int, width: int) -> list:
    table = {layer.name: layer for layer in layer_table(cfg)}

    def module(prefix):
        return [table[f"{prefix}.{n}"] for n in ("conv1", "res.conv1", "res.conv2", "res.conv3")]

    if height < 1 or width < 1:
        raise ShapeError("stage input: extents must be >= 1")
    stages = [("input", (height, width), 1)]
    hw = (height, width)
    enc_hw = []
    for i in range(cfg.scales):
        if i:
            if hw[0] < 2 or hw[1] < 2:
                raise ShapeError(f"stage pool{i}: input {hw[0]}x{hw[1]} is smaller than 2x2")
            hw = (hw[0] // 2, hw[1] // 2)
            stages.append((f"pool{i}", hw, cfg.enc_channels[3]))
        hw = _trace_module(f"enc{i}", module(f"enc{i}"), hw, stages)
        enc_hw.append(hw)
    for i in range(cfg.scales - 1, -1, -1):
        if i < cfg.scales - 1:
            hw = (2 * hw[0], 2 * hw[1])
            stages.append((f"up{i}", hw, cfg.dec_channels[3]))
            skip = enc_hw[i]
            hw = (min(hw[0], skip[0]), min(hw[1], skip[1]))
            stages.append((f"dec{i}.fuse", hw, decoder_in_channels(cfg, i)))
        hw = _trace_module(f"dec{i}", module(f"dec{i}"), hw, stages)
    stages.append(("head", hw, 1))
    return stages


def trace_shapes(cfg: NetworkConfig, height: int, width: Optional[int] = None) -> ShapeTrace:
    """Stage-by-stage extents for an input of ``height x width``.

    Raises ShapeError naming the first stage whose input is too small.
    """
    width = height if width is None else width
    return ShapeTrace(_trace(cfg, height, width), min_input_size(cfg))


def output_shape(cfg: NetworkConfig, height: int, width: Optional[int] = None) -> tuple:
    width = height if width is None else width
    return _trace(cfg, height, width)[-1][1]


def total_shrink(cfg: NetworkConfig) -> int:
    """Extent lost between input and output on divisibility-friendly sizes."""
    unit = 2 ** (cfg.scales - 1)
    size = -(-min_input_size(cfg) // unit) * unit
    return size - output_shape(cfg, size)[0]


_MIN_CACHE: dict = {}


def min_input_size(cfg: NetworkConfig) -> int:
    """Smallest square input extent for which the forward raises no ShapeError."""
    if cfg not in _MIN_CACHE:
        size = 1
        while True:
            try:
                _trace(cfg, size, size)
                break
            except ShapeError:
                size += 1
                if size > 1 << 16:
                    raise ConfigError("no admissible input size below 65536") from None
        _MIN_CACHE[cfg] = size
    return _MIN_CACHE[cfg]


# --------------------------------------------------------------------------
# parameters


class Model:
    """Parameters, batch-norm running statistics and the layer table."""

    def __init__(self, config: NetworkConfig, params: "OrderedDict[str, Tensor]", buffers: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.layers = OrderedDict((layer.name, layer) for layer in layer_table(config))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """All parameters followed by all running statistics, by name."""
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers)
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.state().values())

    def copy(self) -> "Model":
        params = OrderedDict((k, Tensor(t.data.copy(), requires_grad=True, name=k)) for k, t in self.params.items())
        buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return Model(self.config, params, buffers)

    def astype(self, dtype) -> "Model":
        params = OrderedDict(
            (k, Tensor(t.data.astype(dtype), requires_grad=True, name=k)) for k, t in self.params.items()
        )
        buffers = OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items())
        return Model(self.config, params, buffers)


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model with He-normal conv weights and identity batch norms."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: OrderedDict = OrderedDict()
    buffers: OrderedDict = OrderedDict()
    for layer in layer_table(config):
        s = layer.spec
        fan_in = s.in_channels * s.kernel_size**2
        shape = (s.out_channels, s.in_channels, s.kernel_size, s.kernel_size)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[f"{layer.name}.weight"] = Tensor(w, requires_grad=True, name=f"{layer.name}.weight")
        params[f"{layer.name}.bias"] = Tensor(np.zeros(s.out_channels, dtype), requires_grad=True, name=f"{layer.name}.bias")
        if layer.bn:
            c = s.out_channels
            params[f"{layer.bn}.gamma"] = Tensor(np.ones(c, dtype), requires_grad=True, name=f"{layer.bn}.gamma")
            params[f"{layer.bn}.beta"] = Tensor(np.zeros(c, dtype), requires_grad=True, name=f"{layer.bn}.beta")
            buffers[f"{layer.bn}.running_mean"] = np.zeros(c, dtype)
            buffers[f"{layer.bn}.running_var"] = np.ones(c, dtype)
    return Model(config, params, buffers)


# --------------------------------------------------------------------------
# forward


def _conv(m: Model, name: str, x: Tensor) -> Tensor:
    try:
        return ops.conv2d(x, m.params[f"{name}.weight"], m.params[f"{name}.bias"], m.layers[name].spec)
    except ShapeError as exc:
        raise ShapeError(f"stage {name}: {exc}") from None


def _conv_bn(m: Model, name: str, x: Tensor, mode: str, activate: bool = True) -> Tensor:
    bn = m.layers[name].bn
    y = _conv(m, name, x)
    try:
        y = ops.batchnorm2d(
            y,
            m.params[f"{bn}.gamma"],
            m.params[f"{bn}.beta"],
            m.buffers[f"{bn}.running_mean"],
            m.buffers[f"{bn}.running_var"],
            mode,
        )
    except ShapeError as exc:
        raise ShapeError(f"stage {bn}: {exc}") from None
    return ops.relu(y) if activate else y


def _module(m: Model, prefix: str, x: Tensor, mode: str) -> Tensor:
    r = _conv_bn(m, f"{prefix}.conv1", x, mode)
    y = _conv_bn(m, f"{prefix}.res.conv1", r, mode)
    y = _conv_bn(m, f"{prefix}.res.conv2", y, mode)
    y = _conv_bn(m, f"{prefix}.res.conv3", y, mode, activate=False)
    return ops.relu(ops.add(y, ops.center_crop(r, *y.shape[2:])))


def encoding_forward(m: Model, scale_index: int, x: Tensor, mode: str = "train") -> Tensor:
    return _module(m, f"enc{scale_index}", x, mode)


def fuse(m: Model, scale_index: int, deep: Tensor, skip: Tensor) -> Tensor:
    """Merge an upsampled deep map with the same-scale encoder output."""
    if deep.shape[0] != skip.shape[0]:
        raise ShapeError(f"stage dec{scale_index}.fuse: batch sizes differ ({deep.shape[0]} vs {skip.shape[0]})")
    h = min(deep.shape[2], skip.shape[2])
    w = min(deep.shape[3], skip.shape[3])
    if m.config.fusion == "concat":
        return ops.concat_channels(ops.center_crop(deep, h, w), ops.center_crop(skip, h, w))
    proj = _conv(m, f"dec{scale_index}.proj", skip)
    return ops.add(ops.center_crop(deep, h, w), ops.center_crop(proj, h, w))


def decoding_forward(
    m: Model, scale_index: int, deep: Tensor, skip: Optional[Tensor] = None, mode: str = "train"
) -> Tensor:
    x = deep if skip is None else fuse(m, scale_index, deep, skip)
    return _module(m, f"dec{scale_index}", x, mode)


def forward(m: Model, image: Tensor, mode: str = "train") -> Tensor:
    """Restore an N x 1 x H x W batch; output extents follow :func:`output_shape`."""
    if image.data.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"expected an N x 1 x H x W image batch, got {image.shape}")
    if image.dtype != m.dtype:
        image = Tensor(image.data.astype(m.dtype))
    cfg = m.config
    feats = []
    x = image
    for i in range(cfg.scales):
        if i:
            try:
                x = ops.maxpool2x2(x)
            except ShapeError as exc:
                raise ShapeError(f"stage pool{i}: {exc}") from None
        x = encoding_forward(m, i, x, mode)
        feats.append(x)
    y = decoding_forward(m, cfg.scales - 1, feats[-1], None, mode)
    for i in range(cfg.scales - 2, -1, -1):
        y = decoding_forward(m, i, ops.upsample_nearest2x(y), feats[i], mode)
    return _conv(m, "head", y)
