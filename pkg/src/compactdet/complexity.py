"""Cost accounting, weight quantization, and the binary weights file.

Counting conventions (batch size 1 throughout):

* A convolution or dense layer costs k*k * (c_in/groups) * c_out spatial
  output positions in multiply-accumulates (MACs); its op count is 2*MACs.
* Activations, residual adds, sigmoids, pooling, channel scaling, and
  upsampling cost 1 op per output element and contribute no MACs/params.
* Concatenation and detect markers are free.
* Parameter counts include biases.

Weight storage is per-tensor asymmetric affine quantization at 8 bits:
scale = (max - min) / 255 over a zero-anchored range, zero_point in
[0, 255].  Biases always stay at 32 bits.  Inference arithmetic elsewhere
is 32-bit regardless; quantization only changes what is stored on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from .arch_graph import (
    ConcatSpec,
    ConvSpec,
    DetectSpec,
    FcaConfig,
    MaxPoolSpec,
    NetworkSpec,
    NodeSpec,
    UpsampleSpec,
    WeightStore,
    infer_shapes,
    linear_conv_ids,
    param_tensors,
)
from .nn_modules import EpConfig, PepConfig, fca_bottleneck_width, residual_active
from .tensor_core import ConfigError

MAGIC = b"YNWF"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """A weights file is malformed or does not match its network spec."""


@dataclass(frozen=True)
class NodeCost:
    macs: int = 0
    ops: int = 0
    params: int = 0

    def __add__(self, other: "NodeCost") -> "NodeCost":
        return NodeCost(self.macs + other.macs, self.ops + other.ops, self.params + other.params)


def _conv_cost(k: int, c_in: int, c_out: int, out_hw: int, groups: int = 1, activated: bool = True) -> NodeCost:
    macs = k * k * (c_in // groups) * c_out * out_hw
    ops = 2 * macs + (c_out * out_hw if activated else 0)
    params = k * k * (c_in // groups) * c_out + c_out
    return NodeCost(macs, ops, params)


def _dense_cost(c_in: int, c_out: int, activated: bool) -> NodeCost:
    macs = c_in * c_out
    return NodeCost(macs, 2 * macs + (c_out if activated else 0), c_in * c_out + c_out)


def count_node(node: NodeSpec, in_shape: tuple, out_shape: tuple, linear: bool = False) -> NodeCost:
    """Cost of one node given its input/output (c, h, w) shapes.

    `linear` marks conv nodes that emit raw logits and skip the activation.
    """
    c_in, h_in, w_in = in_shape
    c_out, h_out, w_out = out_shape
    a_in = h_in * w_in
    a_out = h_out * w_out
    op = node.op

    if isinstance(op, ConvSpec):
        return _conv_cost(op.kernel, c_in, op.out_channels, a_out, activated=not linear)
    if isinstance(op, PepConfig):
        cost = _conv_cost(1, c_in, op.proj1_channels, a_in)
        cost += _conv_cost(1, op.proj1_channels, op.expansion_channels, a_in)
        cost += _conv_cost(
            3, op.expansion_channels, op.expansion_channels, a_out, groups=op.expansion_channels
        )
        cost += _conv_cost(1, op.expansion_channels, op.out_channels, a_out, activated=False)
        if residual_active(op, c_in):
            cost += NodeCost(0, op.out_channels * a_out, 0)
        return cost
    if isinstance(op, EpConfig):
        cost = _conv_cost(1, c_in, op.expansion_channels, a_in)
        cost += _conv_cost(
            3, op.expansion_channels, op.expansion_channels, a_out, groups=op.expansion_channels
        )
        cost += _conv_cost(1, op.expansion_channels, op.out_channels, a_out, activated=False)
        if residual_active(op, c_in):
            cost += NodeCost(0, op.out_channels * a_out, 0)
        return cost
    if isinstance(op, FcaConfig):
        width = fca_bottleneck_width(c_in, op.reduction_ratio)
        cost = NodeCost(0, c_in, 0)                       # global average pool
        cost += _dense_cost(c_in, width, activated=True)
        cost += _dense_cost(width, c_in, activated=False)
        cost += NodeCost(0, c_in, 0)                      # sigmoid gate
        cost += NodeCost(0, c_in * a_in, 0)               # channel rescale
        return cost
    if isinstance(op, MaxPoolSpec):
        return NodeCost(0, c_out * a_out, 0)
    if isinstance(op, UpsampleSpec):
        return NodeCost(0, c_out * a_out, 0)
    if isinstance(op, (ConcatSpec, DetectSpec)):
        return NodeCost(0, 0, 0)
    raise ConfigError(f"unknown op {op!r}")  # pragma: no cover


@dataclass
class OpsReport:
    rows: list = field(default_factory=list)  # (node_id, kind, NodeCost)

    @property
    def total(self) -> NodeCost:
        total = NodeCost()
        for _, _, cost in self.rows:
            total = total + cost
        return total

    @property
    def total_macs(self) -> int:
        return self.total.macs

    @property
    def total_ops(self) -> int:
        return self.total.ops

    @property
    def total_params(self) -> int:
        return self.total.params

    def format_table(self) -> str:
        lines = ["node_id\tkind\tmacs\tops\tparams"]
        for node_id, kind, cost in self.rows:
            lines.append(f"{node_id}\t{kind}\t{cost.macs}\t{cost.ops}\t{cost.params}")
        total = self.total
        lines.append(f"TOTAL\t-\t{total.macs}\t{total.ops}\t{total.params}")
        return "\n".join(lines) + "\n"


def count_network(spec: NetworkSpec) -> OpsReport:
    table = infer_shapes(spec)
    raw_heads = linear_conv_ids(spec)
    report = OpsReport()
    for node in spec.nodes:
        cost = count_node(
            node, table.of(node.input_id), table.of(node.id), linear=node.id in raw_heads
        )
        report.rows.append((node.id, node.kind, cost))
    return report


def _tensor_counts(spec: NetworkSpec) -> tuple:
    """(weight elements, bias elements, quantized tensor count) for a spec."""
    store = WeightStore.zeros(spec)
    weights = biases = tensors = 0
    for params in store.params:
        for name, arr in param_tensors(params):
            if name.endswith("bias"):
                biases += arr.size
            else:
                weights += arr.size
                tensors += 1
    return weights, biases, tensors


def model_size_bytes(spec: NetworkSpec, bits_per_weight: int = 8) -> int:
    """Serialized parameter payload in bytes.

    Weight tensors take bits_per_weight bits per element; biases always take
    32 bits.  8-bit storage adds a scale (f32) and zero point (i32) per
    quantized tensor.
    """
    if bits_per_weight not in (8, 32):
        raise ConfigError(f"storable precisions are 8 and 32 bits, got {bits_per_weight}")
    weights, biases, tensors = _tensor_counts(spec)
    size = weights * bits_per_weight // 8 + biases * 4
    if bits_per_weight == 8:
        size += tensors * 8
    return size


@dataclass
class QuantizedWeights:
    """8-bit affine-quantized tensor: real = scale * (q - zero_point)."""

    values: np.ndarray
    scale: float
    zero_point: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if not (0 <= self.zero_point <= 255):
            raise ConfigError(f"zero_point {self.zero_point} outside [0, 255]")
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")


def quantize_tensor(w: np.ndarray) -> QuantizedWeights:
    """Asymmetric per-tensor 8-bit quantization over a zero-anchored range."""
    w = np.asarray(w, dtype=np.float32)
    # Pull the range through zero so the affine map can represent 0.0
    # exactly and the round-trip error stays within scale / 2; a constant
    # tensor then still spans [min(v, 0), max(v, 0)] and lands on a grid
    # end exactly.  Only the all-zero tensor leaves no range at all.
    lo = min(float(w.min()), 0.0) if w.size else 0.0
    hi = max(float(w.max()), 0.0) if w.size else 0.0
    scale = 1.0 if hi == lo else (hi - lo) / 255.0
    zero_point = int(np.clip(np.round(-lo / scale), 0, 255))
    q = np.clip(np.round(w.astype(np.float64) / scale) + zero_point, 0, 255)
    return QuantizedWeights(values=q.astype(np.uint8), scale=scale, zero_point=zero_point)


def dequantize_tensor(q: QuantizedWeights) -> np.ndarray:
    return (np.float32(q.scale) * (q.values.astype(np.float32) - np.float32(q.zero_point))).astype(
        np.float32
    )


def fake_quantize(w: np.ndarray, bits: int) -> np.ndarray:
    """Round-trip w through a bits-wide affine grid (analysis helper)."""
    if bits < 2 or bits > 16:
        raise ConfigError(f"fake_quantize supports 2..16 bits, got {bits}")
    w = np.asarray(w, dtype=np.float32)
    levels = (1 << bits) - 1
    lo = min(float(w.min()), 0.0) if w.size else 0.0
    hi = max(float(w.max()), 0.0) if w.size else 0.0
    scale = 1.0 if hi == lo else (hi - lo) / levels
    zero_point = int(np.clip(np.round(-lo / scale), 0, levels))
    q = np.clip(np.round(w.astype(np.float64) / scale) + zero_point, 0, levels)
    return (np.float32(scale) * (q.astype(np.float32) - np.float32(zero_point))).astype(np.float32)


@dataclass
class ConstraintSet:
    """Feasibility envelope for design candidates.

    max_ops and min_score bound the indicator; weight_bits records the
    storage precision assumed when sizes are reported alongside.
    """

    max_ops: Optional[int] = None
    min_score: Optional[float] = None
    weight_bits: int = 8


def check_constraints(report: OpsReport, map_proxy: float, constraints: ConstraintSet) -> bool:
    """Feasibility indicator over an ops report and a detection-quality proxy."""
    if constraints.max_ops is not None and report.total_ops > constraints.max_ops:
        return False
    if constraints.min_score is not None and not (map_proxy >= constraints.min_score):
        return False
    return True


def _write_array_f32(fh: BinaryIO, arr: np.ndarray):
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise WeightFormatError(f"truncated weights file: wanted {count} bytes, got {len(data)}")
    return data


def save_weights(path, spec: NetworkSpec, store: WeightStore, bits: int = 32):
    """Write a weights file: magic, u16 version, u8 precision, tensor data.

    Tensors appear in node order and, within a node, in the fixed sub-layer
    order of param_tensors().  In 8-bit files each weight tensor is prefixed
    by its f32 scale and i32 zero point; biases stay raw f32.
    """
    if bits not in (8, 32):
        raise ConfigError(f"storable precisions are 8 and 32 bits, got {bits}")
    store.validate_against(spec)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HB", FORMAT_VERSION, bits))
        for params in store.params:
            for name, arr in param_tensors(params):
                if bits == 32 or name.endswith("bias"):
                    _write_array_f32(fh, arr)
                else:
                    q = quantize_tensor(arr)
                    fh.write(struct.pack("<fi", q.scale, q.zero_point))
                    fh.write(q.values.tobytes())


def load_weights(path, spec: NetworkSpec) -> tuple:
    """Read a weights file for spec; returns (WeightStore, bits).

    8-bit payloads are dequantized to float32 on load; execution always
    runs in 32-bit arithmetic.
    """
    store = WeightStore.zeros(spec)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise WeightFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, bits = struct.unpack("<HB", _read_exact(fh, 3))
        if version != FORMAT_VERSION:
            raise WeightFormatError(f"unsupported format version {version}")
        if bits not in (8, 32):
            raise WeightFormatError(f"unsupported precision flag {bits}")
        for params in store.params:
            for name, arr in param_tensors(params):
                if bits == 32 or name.endswith("bias"):
                    data = _read_exact(fh, arr.size * 4)
                    arr[...] = np.frombuffer(data, dtype="<f4").reshape(arr.shape)
                else:
                    scale, zero_point = struct.unpack("<fi", _read_exact(fh, 8))
                    data = _read_exact(fh, arr.size)
                    q = QuantizedWeights(
                        values=np.frombuffer(data, dtype=np.uint8).reshape(arr.shape),
                        scale=scale,
                        zero_point=zero_point,
                    )
                    arr[...] = dequantize_tensor(q)
        trailing = fh.read(1)
        if trailing:
            raise WeightFormatError("trailing bytes after final tensor")
    return store, bits
