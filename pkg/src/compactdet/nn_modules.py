"""Building blocks: residual projection-expansion-projection (PEP),
expansion-projection (EP), and channel attention (FCA).

A PEP block projects the input down to a narrow channel count, expands,
runs a 3x3 depthwise convolution, and projects back out.  EP skips the
first projection.  Both add the input back when the stride is 1 and the
channel count is preserved.  Activations (leaky ReLU) follow every layer
except the final projection, which stays linear.

FCA squeezes the feature map with a global average pool, runs it through a
two-layer bottleneck, and rescales each channel by a sigmoid gate.

Forward functions compose the kernels in tensor_core directly, so a module
output is bit-identical to applying the individual kernels by hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor_core import (
    DTYPE,
    ConfigError,
    ConvWeights,
    add,
    channel_scale,
    conv2d,
    dense,
    depthwise_conv2d,
    global_avg_pool,
    leaky_relu,
    sigmoid,
)


def _check_positive(name: str, value: int):
    if value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value}")


def _check_stride(stride: int):
    if stride not in (1, 2):
        raise ConfigError(f"block stride must be 1 or 2, got {stride}")


@dataclass(frozen=True)
class PepConfig:
    proj1_channels: int
    expansion_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        _check_positive("proj1_channels", self.proj1_channels)
        _check_positive("expansion_channels", self.expansion_channels)
        _check_positive("out_channels", self.out_channels)
        _check_stride(self.stride)
        if self.proj1_channels > self.expansion_channels:
            raise ConfigError(
                f"proj1_channels {self.proj1_channels} exceeds "
                f"expansion_channels {self.expansion_channels}"
            )


@dataclass(frozen=True)
class EpConfig:
    expansion_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        _check_positive("expansion_channels", self.expansion_channels)
        _check_positive("out_channels", self.out_channels)
        _check_stride(self.stride)


@dataclass(frozen=True)
class FcaConfig:
    reduction_ratio: int

    def __post_init__(self):
        _check_positive("reduction_ratio", self.reduction_ratio)


def fca_bottleneck_width(channels: int, reduction_ratio: int) -> int:
    return max(1, channels // reduction_ratio)


def residual_active(cfg: Union[PepConfig, EpConfig], in_channels: int) -> bool:
    return cfg.stride == 1 and cfg.out_channels == in_channels


@dataclass
class PepParams:
    project_in: ConvWeights
    expand: ConvWeights
    depthwise: ConvWeights
    project_out: ConvWeights


@dataclass
class EpParams:
    expand: ConvWeights
    depthwise: ConvWeights
    project: ConvWeights


@dataclass
class FcaParams:
    reduce_weight: np.ndarray
    reduce_bias: np.ndarray
    restore_weight: np.ndarray
    restore_bias: np.ndarray

    def __post_init__(self):
        self.reduce_weight = np.asarray(self.reduce_weight, dtype=DTYPE)
        self.reduce_bias = np.asarray(self.reduce_bias, dtype=DTYPE)
        self.restore_weight = np.asarray(self.restore_weight, dtype=DTYPE)
        self.restore_bias = np.asarray(self.restore_bias, dtype=DTYPE)


ModuleParams = Union[PepParams, EpParams, FcaParams, ConvWeights]


def _pointwise(c_in: int, c_out: int, rng=None) -> ConvWeights:
    kernel = _draw(rng, (c_out, c_in, 1, 1))
    return ConvWeights(kernel=kernel, bias=_draw(rng, (c_out,)), stride=1, padding=0)


def _depthwise(channels: int, stride: int, rng=None) -> ConvWeights:
    kernel = _draw(rng, (channels, 1, 3, 3))
    return ConvWeights(
        kernel=kernel, bias=_draw(rng, (channels,)), stride=stride, padding=1, groups=channels
    )


def _draw(rng, shape) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=DTYPE)
    # He-style fan-in scaling keeps activations in a sane range at any width.
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(DTYPE)


def init_pep_params(cfg: PepConfig, in_channels: int, rng=None) -> PepParams:
    """Zero parameters by default, He-scaled gaussians when an rng is given."""
    return PepParams(
        project_in=_pointwise(in_channels, cfg.proj1_channels, rng),
        expand=_pointwise(cfg.proj1_channels, cfg.expansion_channels, rng),
        depthwise=_depthwise(cfg.expansion_channels, cfg.stride, rng),
        project_out=_pointwise(cfg.expansion_channels, cfg.out_channels, rng),
    )


def init_ep_params(cfg: EpConfig, in_channels: int, rng=None) -> EpParams:
    return EpParams(
        expand=_pointwise(in_channels, cfg.expansion_channels, rng),
        depthwise=_depthwise(cfg.expansion_channels, cfg.stride, rng),
        project=_pointwise(cfg.expansion_channels, cfg.out_channels, rng),
    )


def init_fca_params(cfg: FcaConfig, channels: int, rng=None) -> FcaParams:
    width = fca_bottleneck_width(channels, cfg.reduction_ratio)
    if rng is None:
        rw = np.zeros((width, channels), dtype=DTYPE)
        sw = np.zeros((channels, width), dtype=DTYPE)
    else:
        rw = (rng.standard_normal((width, channels)) * np.sqrt(2.0 / channels)).astype(DTYPE)
        sw = (rng.standard_normal((channels, width)) * np.sqrt(2.0 / width)).astype(DTYPE)
    return FcaParams(
        reduce_weight=rw,
        reduce_bias=np.zeros(width, dtype=DTYPE),
        restore_weight=sw,
        restore_bias=np.zeros(channels, dtype=DTYPE),
    )


def _check_pointwise(name: str, w: ConvWeights, c_in: int, c_out: int):
    if w.kernel.shape != (c_out, c_in, 1, 1) or w.stride != 1 or w.padding != 0 or w.groups != 1:
        raise ConfigError(
            f"{name} must be a 1x1 stride-1 conv ({c_in} -> {c_out}), got kernel "
            f"{w.kernel.shape} stride {w.stride} padding {w.padding} groups {w.groups}"
        )


def _check_depthwise(name: str, w: ConvWeights, channels: int, stride: int):
    if (
        w.kernel.shape != (channels, 1, 3, 3)
        or w.stride != stride
        or w.padding != 1
        or w.groups != channels
    ):
        raise ConfigError(
            f"{name} must be a 3x3 depthwise conv over {channels} channels at stride "
            f"{stride}, got kernel {w.kernel.shape} stride {w.stride} groups {w.groups}"
        )


def pep_forward(x: np.ndarray, cfg: PepConfig, params: PepParams) -> np.ndarray:
    in_channels = x.shape[1]
    _check_pointwise("project_in", params.project_in, in_channels, cfg.proj1_channels)
    _check_pointwise("expand", params.expand, cfg.proj1_channels, cfg.expansion_channels)
    _check_depthwise("depthwise", params.depthwise, cfg.expansion_channels, cfg.stride)
    _check_pointwise("project_out", params.project_out, cfg.expansion_channels, cfg.out_channels)

    y = leaky_relu(conv2d(x, params.project_in))
    y = leaky_relu(conv2d(y, params.expand))
    y = leaky_relu(depthwise_conv2d(y, params.depthwise))
    y = conv2d(y, params.project_out)
    if residual_active(cfg, in_channels):
        y = add(y, x)
    return y


def ep_forward(x: np.ndarray, cfg: EpConfig, params: EpParams) -> np.ndarray:
    in_channels = x.shape[1]
    _check_pointwise("expand", params.expand, in_channels, cfg.expansion_channels)
    _check_depthwise("depthwise", params.depthwise, cfg.expansion_channels, cfg.stride)
    _check_pointwise("project", params.project, cfg.expansion_channels, cfg.out_channels)

    y = leaky_relu(conv2d(x, params.expand))
    y = leaky_relu(depthwise_conv2d(y, params.depthwise))
    y = conv2d(y, params.project)
    if residual_active(cfg, in_channels):
        y = add(y, x)
    return y


def fca_forward(x: np.ndarray, cfg: FcaConfig, params: FcaParams) -> np.ndarray:
    channels = x.shape[1]
    width = fca_bottleneck_width(channels, cfg.reduction_ratio)
    if params.reduce_weight.shape != (width, channels) or params.restore_weight.shape != (
        channels,
        width,
    ):
        raise ConfigError(
            f"FCA weights do not match {channels} channels at reduction "
            f"{cfg.reduction_ratio}: {params.reduce_weight.shape}, {params.restore_weight.shape}"
        )

    pooled = global_avg_pool(x)
    gates = np.empty((x.shape[0], channels), dtype=DTYPE)
    for n in range(x.shape[0]):
        squeezed = leaky_relu(dense(pooled[n, :, 0, 0], params.reduce_weight, params.reduce_bias))
        gates[n] = sigmoid(dense(squeezed, params.restore_weight, params.restore_bias))
    return channel_scale(x, gates)
