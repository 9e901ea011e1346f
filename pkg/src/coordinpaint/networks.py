"""Gated-convolution networks: coordinate inpainter, refiner and patch discriminator.

Parameters live in a flat, ordered ``NetworkParams`` table keyed by dotted
names; forward functions look tensors up by name on every call, so an
optimizer can swap updated leaves into the table between steps.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    channel_slice,
    concat,
    concat_channels,
    conv2d,
    elu,
    leaky_relu,
    resample2x,
    scale,
    sigmoid,
    tanh,
)
from .autodiff.tensor import add_scalar
from .warp import complete_warpfield, downsample_warpfield, sample_bilinear

ACTIVATIONS = ("leaky_relu", "elu", "none")


class NetworkParams(OrderedDict):
    """Ordered name -> Tensor table."""

    def __setitem__(self, key, value):
        if not isinstance(value, Tensor):
            raise TypeError(f"parameter {key!r} must be a Tensor")
        super().__setitem__(key, value)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.items())

    def shapes(self) -> dict:
        return {k: t.shape for k, t in self.items()}

    def freeze(self) -> None:
        for t in self.values():
            t.requires_grad = False
            t.grad = None

    def subset(self, prefix: str) -> "NetworkParams":
        return NetworkParams((k, t) for k, t in self.items() if k.startswith(prefix))


def count_params(params: NetworkParams) -> int:
    return int(sum(t.size for t in params.values()))


def _init_conv(params: NetworkParams, name: str, cin: int, cout: int, k: int, rng: np.random.Generator, dtype) -> None:
    std = np.sqrt(2.0 / (cin * k * k))
    params[f"{name}.weight"] = Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True, dtype=dtype)
    params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "leaky_relu":
        return leaky_relu(x, 0.2)
    if activation == "elu":
        return elu(x)
    if activation == "none":
        return x
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class GatedConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: Optional[int] = None
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.padding is None:
            self.padding = self.kernel // 2
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


def init_gated_conv(params: NetworkParams, name: str, spec: GatedConvSpec, rng, dtype=None) -> None:
    _init_conv(params, f"{name}.feature", spec.in_channels, spec.out_channels, spec.kernel, rng, dtype)
    _init_conv(params, f"{name}.gate", spec.in_channels, spec.out_channels, spec.kernel, rng, dtype)


def gated_conv_forward(x: Tensor, spec: GatedConvSpec, params: NetworkParams, name: str) -> Tensor:
    """activation(conv_feature(x)) * sigmoid(conv_gate(x)).

    Both branches run as one convolution over stacked kernels.
    """
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"{name}: expected {spec.in_channels} input channels, got {x.shape[1]}")
    w = concat([params[f"{name}.feature.weight"], params[f"{name}.gate.weight"]], axis=0)
    b = concat([params[f"{name}.feature.bias"], params[f"{name}.gate.bias"]], axis=0)
    y = conv2d(x, w, b, stride=spec.stride, padding=spec.padding)
    c = spec.out_channels
    feat = _activate(channel_slice(y, 0, c), spec.activation)
    return feat * sigmoid(channel_slice(y, c, 2 * c))


def _conv(x: Tensor, params: NetworkParams, name: str, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    w = params[f"{name}.weight"]
    pad = w.shape[2] // 2 if padding is None else padding
    return conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=pad)


def _width(widths, level: int) -> int:
    return widths[min(level, len(widths) - 1)]


# -- inpainter ----------------------------------------------------------------


@dataclass
class InpainterConfig:
    """Hourglass without skip connections.

    Layers: input conv, one gated conv after each of ``downsamplings``
    poolings, ``bottleneck_layers`` convs at the lowest resolution, one gated
    conv after each upsampling, and an output conv.
    """

    in_channels: int = 3
    out_channels: int = 2
    widths: tuple = (32, 64, 128)
    downsamplings: int = 3
    bottleneck_layers: int = 2
    activation: str = "leaky_relu"
    head: str = "coords"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.head not in ("coords", "rgb"):
            raise ValueError("head must be 'coords' or 'rgb'")

    @classmethod
    def reference_layout(cls) -> "InpainterConfig":
        """Fourteen convolutional layers (1 + 3 + 6 + 3 + 1)."""
        return cls(widths=(32, 64, 128), downsamplings=3, bottleneck_layers=6)

    @classmethod
    def rgb(cls, **kw) -> "InpainterConfig":
        return cls(in_channels=4, out_channels=3, head="rgb", **kw)

    @property
    def conv_layers(self) -> int:
        return 2 + 2 * self.downsamplings + self.bottleneck_layers

    def to_dict(self) -> dict:
        return asdict(self)


class Inpainter:
    """Completes an incomplete texture map (coordinates or colors)."""

    def __init__(self, config: InpainterConfig | None = None, seed: int = 0, params: NetworkParams | None = None, prefix: str = "inpainter"):
        self.config = config or InpainterConfig()
        self.prefix = prefix
        self.params = params if params is not None else self.init_params(seed)

    def _specs(self):
        c = self.config
        specs = [("in", GatedConvSpec(c.in_channels, _width(c.widths, 0), activation=c.activation))]
        for level in range(1, c.downsamplings + 1):
            specs.append((f"down{level}", GatedConvSpec(_width(c.widths, level - 1), _width(c.widths, level), activation=c.activation)))
        bott = _width(c.widths, c.downsamplings)
        for i in range(c.bottleneck_layers):
            specs.append((f"mid{i}", GatedConvSpec(bott, bott, activation=c.activation)))
        for level in range(c.downsamplings - 1, -1, -1):
            specs.append((f"up{level}", GatedConvSpec(_width(c.widths, level + 1), _width(c.widths, level), activation=c.activation)))
        return specs

    def init_params(self, seed: int) -> NetworkParams:
        rng = np.random.default_rng(seed)
        params = NetworkParams()
        for name, spec in self._specs():
            init_gated_conv(params, f"{self.prefix}.{name}", spec, rng)
        _init_conv(params, f"{self.prefix}.out", _width(self.config.widths, 0), self.config.out_channels, 3, rng, None)
        return params

    def check_extents(self, height: int, width: int) -> None:
        f = 2 ** self.config.downsamplings
        if height % f or width % f:
            raise ValueError(f"texture {height}x{width} is not divisible by {f} ({self.config.downsamplings} downsamplings)")

    def forward(self, x: Tensor, image_size: tuple[int, int] | None = None) -> Tensor:
        """Map an (N, in_channels, texH, texW) input to the completed map.

        With the coordinate head the output is in source pixels, bounded to
        ``(-0.1 * size, 1.1 * size)`` per axis; ``image_size`` is (W, H).
        With the rgb head the output is a color texture in (0, 1).
        """
        self.check_extents(*x.shape[2:])
        p, pre = self.params, self.prefix
        specs = dict(self._specs())
        h = gated_conv_forward(x, specs["in"], p, f"{pre}.in")
        for level in range(1, self.config.downsamplings + 1):
            h = gated_conv_forward(resample2x(h, "down"), specs[f"down{level}"], p, f"{pre}.down{level}")
        for i in range(self.config.bottleneck_layers):
            h = gated_conv_forward(h, specs[f"mid{i}"], p, f"{pre}.mid{i}")
        for level in range(self.config.downsamplings - 1, -1, -1):
            h = gated_conv_forward(resample2x(h, "up"), specs[f"up{level}"], p, f"{pre}.up{level}")
        out = _conv(h, p, f"{pre}.out")
        if self.config.head == "rgb":
            return sigmoid(out)
        if image_size is None:
            raise ValueError("image_size is required for the coordinate head")
        w, hgt = image_size
        t = tanh(out)
        xs = add_scalar(scale(channel_slice(t, 0, 1), 0.6 * w), 0.5 * w)
        ys = add_scalar(scale(channel_slice(t, 1, 2), 0.6 * hgt), 0.5 * hgt)
        return concat_channels(xs, ys)


# -- refiner ------------------------------------------------------------------


@dataclass
class RefinerConfig:
    """U-Net style translator with three skip resolutions below the bottleneck.

    ``mode='deformable'`` uses one encoder for target-aligned maps and one for
    source-aligned maps whose activations are resampled by the warp field
    before they reach the decoder; ``mode='plain'`` uses a single encoder.
    """

    target_channels: int = 10
    source_channels: int = 8
    identity_channels: int = 0
    widths: tuple = (16, 32, 64, 64)
    residual_blocks: int = 4
    mode: str = "deformable"
    activation: str = "leaky_relu"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 4:
            raise ValueError("refiner widths must give 4 levels (full, /2, /4, /8)")
        if self.mode not in ("deformable", "plain"):
            raise ValueError("mode must be 'deformable' or 'plain'")

    def to_dict(self) -> dict:
        return asdict(self)


class Refiner:
    LEVELS = 3

    def __init__(self, config: RefinerConfig | None = None, seed: int = 0, params: NetworkParams | None = None, prefix: str = "refiner"):
        self.config = config or RefinerConfig()
        self.prefix = prefix
        self.params = params if params is not None else self.init_params(seed)

    @property
    def deformable(self) -> bool:
        return self.config.mode == "deformable"

    def _encoder_specs(self, name: str, cin: int):
        c = self.config
        specs = [(f"{name}.l0", GatedConvSpec(cin, c.widths[0], activation=c.activation))]
        for lvl in range(1, self.LEVELS + 1):
            specs.append((f"{name}.l{lvl}", GatedConvSpec(c.widths[lvl - 1], c.widths[lvl], activation=c.activation)))
        return specs

    def _specs(self):
        c = self.config
        w = c.widths
        tgt_in = c.target_channels + c.identity_channels
        specs = []
        if self.deformable:
            specs += self._encoder_specs("enc_target", tgt_in)
            specs += self._encoder_specs("enc_source", c.source_channels)
            streams = 2
        else:
            specs += self._encoder_specs("enc", tgt_in + c.source_channels)
            streams = 1
        specs.append(("merge", GatedConvSpec(streams * w[3], w[3], activation=c.activation)))
        for i in range(c.residual_blocks):
            specs.append((f"res{i}.a", GatedConvSpec(w[3], w[3], activation=c.activation)))
            specs.append((f"res{i}.b", GatedConvSpec(w[3], w[3], activation="none")))
        for lvl in range(self.LEVELS - 1, -1, -1):
            specs.append((f"dec{lvl}", GatedConvSpec(w[lvl + 1] + streams * w[lvl], w[lvl], activation=c.activation)))
        return specs

    def init_params(self, seed: int) -> NetworkParams:
        rng = np.random.default_rng(seed)
        params = NetworkParams()
        for name, spec in self._specs():
            init_gated_conv(params, f"{self.prefix}.{name}", spec, rng)
        _init_conv(params, f"{self.prefix}.out", self.config.widths[0], 3, 3, rng, None)
        return params

    def _encode(self, x: Tensor, name: str, specs: dict) -> list:
        feats = [gated_conv_forward(x, specs[f"{name}.l0"], self.params, f"{self.prefix}.{name}.l0")]
        for lvl in range(1, self.LEVELS + 1):
            h = resample2x(feats[-1], "down")
            feats.append(gated_conv_forward(h, specs[f"{name}.l{lvl}"], self.params, f"{self.prefix}.{name}.l{lvl}"))
        return feats

    def forward(
        self,
        target_stack: Tensor,
        source_stack: Tensor,
        warp: Optional[np.ndarray] = None,
        warp_known: Optional[np.ndarray] = None,
        identity_cond: Optional[Tensor] = None,
        warp_skips: bool = True,
    ) -> Tensor:
        """Predict the target image in (0, 1).

        Args:
            target_stack: (N, target_channels, H, W) maps aligned with the target.
            source_stack: (N, source_channels, H, W) maps aligned with the source.
            warp: (N, 2, H, W) source pixel coordinates per target pixel (the
                field E); required in deformable mode.
            warp_known: mask of entries of ``warp`` that are defined; unknown
                entries fall back to the identity.
            identity_cond: masked identity image appended to the target stack.
            warp_skips: resample source activations by the warp field. Turning
                it off routes them straight through (plain skips).
        """
        c = self.config
        if c.identity_channels:
            if identity_cond is None or identity_cond.shape[1] != c.identity_channels:
                raise ValueError("refiner expects an identity conditioning image (missing identity mask channel)")
            target_stack = concat_channels(target_stack, identity_cond)
        elif identity_cond is not None:
            raise ValueError("refiner was not configured for identity conditioning")
        h, w = target_stack.shape[2:]
        f = 2**self.LEVELS
        if h % f or w % f:
            raise ValueError(f"image {h}x{w} is not divisible by {f}")
        specs = dict(self._specs())
        p, pre = self.params, self.prefix

        if self.deformable:
            if warp is None:
                raise ValueError("deformable mode needs the warp field E")
            tgt = self._encode(target_stack, "enc_target", specs)
            src = self._encode(source_stack, "enc_source", specs)
            if warp_skips:
                known = np.ones(warp.shape[:1] + warp.shape[2:], bool) if warp_known is None else warp_known
                fields = [complete_warpfield(warp, known)]
                for lvl in range(1, self.LEVELS + 1):
                    wf, wk = downsample_warpfield(warp, known, 2**lvl)
                    fields.append(complete_warpfield(wf, wk))
                src = [sample_bilinear(s, Tensor(fd, dtype=s.dtype)) for s, fd in zip(src, fields)]
            skips = [concat_channels(a, b) for a, b in zip(tgt, src)]
        else:
            skips = self._encode(concat_channels(target_stack, source_stack), "enc", specs)

        x = gated_conv_forward(skips[self.LEVELS], specs["merge"], p, f"{pre}.merge")
        for i in range(c.residual_blocks):
            r = gated_conv_forward(x, specs[f"res{i}.a"], p, f"{pre}.res{i}.a")
            x = x + gated_conv_forward(r, specs[f"res{i}.b"], p, f"{pre}.res{i}.b")
        for lvl in range(self.LEVELS - 1, -1, -1):
            x = concat_channels(resample2x(x, "up"), skips[lvl])
            x = gated_conv_forward(x, specs[f"dec{lvl}"], p, f"{pre}.dec{lvl}")
        return sigmoid(_conv(x, p, f"{pre}.out"))


# -- discriminator --------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    in_channels: int = 6
    widths: tuple = (16, 32, 64)

    def __post_init__(self):
        self.widths = tuple(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)


class PatchDiscriminator:
    """Three stride-2 conv stages and a 3x3 logit head: one logit per patch at 1/8 resolution."""

    def __init__(self, config: DiscriminatorConfig | None = None, seed: int = 0, params: NetworkParams | None = None, prefix: str = "disc"):
        self.config = config or DiscriminatorConfig()
        self.prefix = prefix
        self.params = params if params is not None else self.init_params(seed)

    def init_params(self, seed: int) -> NetworkParams:
        rng = np.random.default_rng(seed)
        params = NetworkParams()
        cin = self.config.in_channels
        for i, w in enumerate(self.config.widths):
            _init_conv(params, f"{self.prefix}.c{i}", cin, w, 4, rng, None)
            cin = w
        _init_conv(params, f"{self.prefix}.logit", cin, 1, 3, rng, None)
        return params

    def forward(self, image: Tensor, pose: Tensor) -> Tensor:
        if image.shape[0] != pose.shape[0] or image.shape[2:] != pose.shape[2:]:
            raise ValueError(f"image {image.shape} and pose stack {pose.shape} must share N, H, W")
        x = concat_channels(image, pose)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"discriminator expects {self.config.in_channels} channels, got {x.shape[1]}")
        for i in range(len(self.config.widths)):
            x = leaky_relu(_conv(x, self.params, f"{self.prefix}.c{i}", stride=2, padding=1), 0.2)
        return _conv(x, self.params, f"{self.prefix}.logit")


def discriminate(disc: PatchDiscriminator, image: Tensor, pose: Tensor) -> Tensor:
    return disc.forward(image, pose)
