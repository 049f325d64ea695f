"""Network description graphs: a line-oriented config grammar, shape
inference, and an executor over the tensor_core kernels.

A network is a flat list of nodes in topological order.  Each node reads
the output of the previous node unless rebound with `from`, and node ids
are the implicit 0-based order of node-producing lines.  References only
point backwards, so the list is its own schedule.

Grammar (one statement per line, `#` starts a comment):

    input <channels> <height> <width>
    classes <count>
    anchors <scale_tag> <w,h> <w,h> ...
    conv <kernel> <out_channels> <stride>
    pep <proj1> <expansion> <out_channels> <stride>
    ep <expansion> <out_channels> <stride>
    fca <reduction>
    maxpool <kernel> <stride>
    upsample <factor>
    concat <node_id>
    from <node_id>
    detect <scale_tag>

`from` rebinds the input of the next node-producing line.  `detect` marks
its input as one of the prediction grids; a runnable detection network has
exactly three, tagged large/medium/small from coarse to fine.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Union

import numpy as np

from . import nn_modules
from .nn_modules import EpConfig, FcaConfig, PepConfig, ModuleParams
from .tensor_core import (
    ConfigError,
    ConvWeights,
    as_tensor,
    concat_channels,
    conv2d,
    conv_output_hw,
    leaky_relu,
    max_pool2d,
    upsample_nearest,
)

INPUT_ID = -1
SCALE_TAGS = ("large", "medium", "small")

# Normalized prior box sizes (fractions of the input side), widest grid
# last.  Obtained with kmeans_anchors on VOC-style ground truth boxes at
# 416x416; override per network with `anchors` lines.
DEFAULT_ANCHORS = {
    "large": ((0.279, 0.216), (0.375, 0.476), (0.897, 0.784)),
    "medium": ((0.072, 0.147), (0.149, 0.108), (0.142, 0.286)),
    "small": ((0.024, 0.031), (0.038, 0.072), (0.079, 0.055)),
}


class ParseError(ValueError):
    """A config document line could not be interpreted."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ShapeError(ValueError):
    """Shapes fail to chain through the graph."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    out_channels: int
    stride: int

    @property
    def padding(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class MaxPoolSpec:
    kernel: int
    stride: int


@dataclass(frozen=True)
class UpsampleSpec:
    factor: int


@dataclass(frozen=True)
class ConcatSpec:
    with_id: int


@dataclass(frozen=True)
class DetectSpec:
    scale_tag: str


NodeOp = Union[ConvSpec, PepConfig, EpConfig, FcaConfig, MaxPoolSpec, UpsampleSpec, ConcatSpec, DetectSpec]

_KIND_BY_TYPE = {
    ConvSpec: "conv",
    PepConfig: "pep",
    EpConfig: "ep",
    FcaConfig: "fca",
    MaxPoolSpec: "maxpool",
    UpsampleSpec: "upsample",
    ConcatSpec: "concat",
    DetectSpec: "detect",
}


@dataclass(frozen=True)
class NodeSpec:
    id: int
    op: NodeOp
    input_id: int

    @property
    def kind(self) -> str:
        return _KIND_BY_TYPE[type(self.op)]


@dataclass
class NetworkSpec:
    nodes: tuple
    input_shape: tuple  # (channels, height, width)
    num_classes: int = 20
    anchors_per_scale: int = 3
    anchors: dict = field(default_factory=lambda: dict(DEFAULT_ANCHORS))

    def detect_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == "detect"]

    def detect_channels(self) -> int:
        return self.anchors_per_scale * (5 + self.num_classes)


class GraphBuilder:
    """Programmatic NetworkSpec construction; methods return node ids."""

    def __init__(self, input_shape, num_classes=20, anchors=None):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.anchors = dict(anchors) if anchors is not None else dict(DEFAULT_ANCHORS)
        self.nodes: list[NodeSpec] = []

    def _push(self, op: NodeOp, frm: Optional[int]) -> int:
        node_id = len(self.nodes)
        input_id = (node_id - 1 if node_id else INPUT_ID) if frm is None else frm
        self.nodes.append(NodeSpec(id=node_id, op=op, input_id=input_id))
        return node_id

    def conv(self, kernel, out_channels, stride, frm=None) -> int:
        return self._push(ConvSpec(kernel, out_channels, stride), frm)

    def pep(self, proj1, expansion, out_channels, stride, frm=None) -> int:
        return self._push(PepConfig(proj1, expansion, out_channels, stride), frm)

    def ep(self, expansion, out_channels, stride, frm=None) -> int:
        return self._push(EpConfig(expansion, out_channels, stride), frm)

    def fca(self, reduction, frm=None) -> int:
        return self._push(FcaConfig(reduction), frm)

    def maxpool(self, kernel, stride, frm=None) -> int:
        return self._push(MaxPoolSpec(kernel, stride), frm)

    def upsample(self, factor, frm=None) -> int:
        return self._push(UpsampleSpec(factor), frm)

    def concat(self, with_id, frm=None) -> int:
        return self._push(ConcatSpec(with_id), frm)

    def detect(self, scale_tag, frm=None) -> int:
        return self._push(DetectSpec(scale_tag), frm)

    def build(self) -> "NetworkSpec":
        anchors_per_scale = 3
        if self.anchors:
            counts = {len(v) for v in self.anchors.values()}
            if len(counts) != 1:
                raise ConfigError("anchor counts differ between scales")
            anchors_per_scale = counts.pop()
        spec = NetworkSpec(
            nodes=tuple(self.nodes),
            input_shape=self.input_shape,
            num_classes=self.num_classes,
            anchors_per_scale=anchors_per_scale,
            anchors={k: tuple(tuple(p) for p in v) for k, v in self.anchors.items()},
        )
        _validate_references(spec)
        return spec


def _validate_references(spec: NetworkSpec):
    if not spec.nodes:
        raise ParseError("no nodes")
    for node in spec.nodes:
        refs = [node.input_id]
        if isinstance(node.op, ConcatSpec):
            refs.append(node.op.with_id)
        for ref in refs:
            if ref != INPUT_ID and not (0 <= ref < node.id):
                raise ParseError(
                    f"node {node.id} references node {ref}, which is not an earlier node"
                )
    tags = [n.op.scale_tag for n in spec.detect_nodes()]
    if len(tags) != len(set(tags)):
        raise ParseError(f"duplicate detect scale tags: {tags}")


def _int_field(token: str, what: str, line_no: int, minimum: int = 1) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {token!r}", line_no) from None
    if value < minimum:
        raise ParseError(f"{what} must be >= {minimum}, got {value}", line_no)
    return value


def parse_network_spec(text: str) -> NetworkSpec:
    input_shape = None
    num_classes = None
    anchors: dict = {}
    nodes: list[NodeSpec] = []
    pending_from: Optional[int] = None

    def node_ref(token: str, line_no: int) -> int:
        ref = _int_field(token, "node reference", line_no, minimum=0)
        if ref >= len(nodes):
            raise ParseError(
                f"reference to node {ref} before it is defined (have {len(nodes)} nodes)", line_no
            )
        return ref

    def push(op: NodeOp, line_no: int):
        nonlocal pending_from
        node_id = len(nodes)
        if pending_from is not None:
            input_id = pending_from
            pending_from = None
        else:
            input_id = node_id - 1 if node_id else INPUT_ID
        nodes.append(NodeSpec(id=node_id, op=op, input_id=input_id))

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        word, args = tokens[0], tokens[1:]

        def need(count: int):
            if len(args) != count:
                raise ParseError(f"{word} takes {count} argument(s), got {len(args)}", line_no)

        try:
            if word == "input":
                need(3)
                if input_shape is not None:
                    raise ParseError("duplicate input line", line_no)
                if nodes:
                    raise ParseError("input line must precede node lines", line_no)
                input_shape = tuple(_int_field(a, "input dim", line_no) for a in args)
            elif word == "classes":
                need(1)
                if num_classes is not None:
                    raise ParseError("duplicate classes line", line_no)
                num_classes = _int_field(args[0], "class count", line_no)
            elif word == "anchors":
                if len(args) < 2:
                    raise ParseError("anchors needs a scale tag and at least one w,h pair", line_no)
                tag = args[0]
                if tag not in SCALE_TAGS:
                    raise ParseError(f"unknown scale tag {tag!r}", line_no)
                if tag in anchors:
                    raise ParseError(f"duplicate anchors for scale {tag!r}", line_no)
                pairs = []
                for token in args[1:]:
                    parts = token.split(",")
                    if len(parts) != 2:
                        raise ParseError(f"anchor {token!r} is not w,h", line_no)
                    try:
                        pair = (float(parts[0]), float(parts[1]))
                    except ValueError:
                        raise ParseError(f"anchor {token!r} is not numeric", line_no) from None
                    if pair[0] <= 0 or pair[1] <= 0:
                        raise ParseError(f"anchor dims must be positive, got {token}", line_no)
                    pairs.append(pair)
                anchors[tag] = tuple(pairs)
            elif word == "from":
                need(1)
                if pending_from is not None:
                    raise ParseError("two from lines in a row", line_no)
                pending_from = node_ref(args[0], line_no)
            elif word == "conv":
                need(3)
                push(
                    ConvSpec(
                        kernel=_int_field(args[0], "kernel", line_no),
                        out_channels=_int_field(args[1], "out_channels", line_no),
                        stride=_int_field(args[2], "stride", line_no),
                    ),
                    line_no,
                )
            elif word == "pep":
                need(4)
                push(
                    PepConfig(
                        proj1_channels=_int_field(args[0], "proj1", line_no),
                        expansion_channels=_int_field(args[1], "expansion", line_no),
                        out_channels=_int_field(args[2], "out_channels", line_no),
                        stride=_int_field(args[3], "stride", line_no),
                    ),
                    line_no,
                )
            elif word == "ep":
                need(3)
                push(
                    EpConfig(
                        expansion_channels=_int_field(args[0], "expansion", line_no),
                        out_channels=_int_field(args[1], "out_channels", line_no),
                        stride=_int_field(args[2], "stride", line_no),
                    ),
                    line_no,
                )
            elif word == "fca":
                need(1)
                push(FcaConfig(reduction_ratio=_int_field(args[0], "reduction", line_no)), line_no)
            elif word == "maxpool":
                need(2)
                push(
                    MaxPoolSpec(
                        kernel=_int_field(args[0], "kernel", line_no),
                        stride=_int_field(args[1], "stride", line_no),
                    ),
                    line_no,
                )
            elif word == "upsample":
                need(1)
                push(UpsampleSpec(factor=_int_field(args[0], "factor", line_no)), line_no)
            elif word == "concat":
                need(1)
                push(ConcatSpec(with_id=node_ref(args[0], line_no)), line_no)
            elif word == "detect":
                need(1)
                if args[0] not in SCALE_TAGS:
                    raise ParseError(f"unknown scale tag {args[0]!r}", line_no)
                push(DetectSpec(scale_tag=args[0]), line_no)
            else:
                raise ParseError(f"unknown statement {word!r}", line_no)
        except ConfigError as exc:
            raise ParseError(str(exc), line_no) from None

    if input_shape is None:
        raise ParseError("missing input line")
    if not nodes:
        raise ParseError("no nodes")
    if pending_from is not None:
        raise ParseError("dangling from line with no following node")
    if anchors and set(anchors) != set(SCALE_TAGS):
        raise ParseError(f"anchors given for {sorted(anchors)}, need all of {list(SCALE_TAGS)} or none")

    builder_anchors = anchors if anchors else None
    builder = GraphBuilder(input_shape, num_classes if num_classes is not None else 20, builder_anchors)
    builder.nodes = nodes
    return builder.build()


def _format_float(v: float) -> str:
    return repr(float(v))


def serialize_network_spec(spec: NetworkSpec) -> str:
    out = io.StringIO()
    c, h, w = spec.input_shape
    out.write(f"input {c} {h} {w}\n")
    out.write(f"classes {spec.num_classes}\n")
    for tag in SCALE_TAGS:
        if tag in spec.anchors:
            pairs = " ".join(
                f"{_format_float(aw)},{_format_float(ah)}" for aw, ah in spec.anchors[tag]
            )
            out.write(f"anchors {tag} {pairs}\n")
    for node in spec.nodes:
        default_input = node.id - 1 if node.id else INPUT_ID
        if node.input_id != default_input:
            out.write(f"from {node.input_id}\n")
        op = node.op
        if isinstance(op, ConvSpec):
            out.write(f"conv {op.kernel} {op.out_channels} {op.stride}\n")
        elif isinstance(op, PepConfig):
            out.write(
                f"pep {op.proj1_channels} {op.expansion_channels} {op.out_channels} {op.stride}\n"
            )
        elif isinstance(op, EpConfig):
            out.write(f"ep {op.expansion_channels} {op.out_channels} {op.stride}\n")
        elif isinstance(op, FcaConfig):
            out.write(f"fca {op.reduction_ratio}\n")
        elif isinstance(op, MaxPoolSpec):
            out.write(f"maxpool {op.kernel} {op.stride}\n")
        elif isinstance(op, UpsampleSpec):
            out.write(f"upsample {op.factor}\n")
        elif isinstance(op, ConcatSpec):
            out.write(f"concat {op.with_id}\n")
        elif isinstance(op, DetectSpec):
            out.write(f"detect {op.scale_tag}\n")
    return out.getvalue()


@dataclass
class ShapeTable:
    """Per-node output shapes as (channels, height, width) tuples."""

    input_shape: tuple
    shapes: tuple

    def of(self, node_id: int) -> tuple:
        if node_id == INPUT_ID:
            return self.input_shape
        return self.shapes[node_id]


def infer_shapes(spec: NetworkSpec) -> ShapeTable:
    _validate_references(spec)
    shapes: list[tuple] = []

    def shape_of(node_id: int) -> tuple:
        return spec.input_shape if node_id == INPUT_ID else shapes[node_id]

    for node in spec.nodes:
        c, h, w = shape_of(node.input_id)
        op = node.op
        try:
            if isinstance(op, ConvSpec):
                oh, ow = conv_output_hw(h, w, op.kernel, op.stride, op.padding)
                shape = (op.out_channels, oh, ow)
            elif isinstance(op, (PepConfig, EpConfig)):
                oh, ow = conv_output_hw(h, w, 3, op.stride, 1)
                shape = (op.out_channels, oh, ow)
            elif isinstance(op, FcaConfig):
                shape = (c, h, w)
            elif isinstance(op, MaxPoolSpec):
                shape = (c, -(-h // op.stride), -(-w // op.stride))
            elif isinstance(op, UpsampleSpec):
                shape = (c, h * op.factor, w * op.factor)
            elif isinstance(op, ConcatSpec):
                c2, h2, w2 = shape_of(op.with_id)
                if (h, w) != (h2, w2):
                    raise ShapeError(
                        f"concat inputs {h}x{w} and {h2}x{w2} differ spatially", node.id
                    )
                shape = (c + c2, h, w)
            elif isinstance(op, DetectSpec):
                expected = spec.detect_channels()
                if c != expected:
                    raise ShapeError(
                        f"detect '{op.scale_tag}' input has {c} channels, needs "
                        f"{spec.anchors_per_scale}*(5+{spec.num_classes}) = {expected}",
                        node.id,
                    )
                shape = (c, h, w)
            else:  # pragma: no cover - kinds are closed
                raise ShapeError(f"unknown op {op!r}", node.id)
        except ConfigError as exc:
            raise ShapeError(str(exc), node.id) from None
        shapes.append(shape)
    return ShapeTable(input_shape=tuple(spec.input_shape), shapes=tuple(shapes))


def linear_conv_ids(spec: NetworkSpec) -> frozenset:
    """Conv nodes that feed a detect node emit raw logits (no activation)."""
    return frozenset(
        n.input_id
        for n in spec.nodes
        if n.kind == "detect" and n.input_id != INPUT_ID and spec.nodes[n.input_id].kind == "conv"
    )


def param_tensors(params: Optional[ModuleParams]) -> list:
    """Flatten module parameters to (name, array) in fixed storage order."""
    if params is None:
        return []
    if isinstance(params, ConvWeights):
        return [("kernel", params.kernel), ("bias", params.bias)]
    if isinstance(params, nn_modules.PepParams):
        return [
            ("proj1.kernel", params.project_in.kernel),
            ("proj1.bias", params.project_in.bias),
            ("expand.kernel", params.expand.kernel),
            ("expand.bias", params.expand.bias),
            ("depthwise.kernel", params.depthwise.kernel),
            ("depthwise.bias", params.depthwise.bias),
            ("proj2.kernel", params.project_out.kernel),
            ("proj2.bias", params.project_out.bias),
        ]
    if isinstance(params, nn_modules.EpParams):
        return [
            ("expand.kernel", params.expand.kernel),
            ("expand.bias", params.expand.bias),
            ("depthwise.kernel", params.depthwise.kernel),
            ("depthwise.bias", params.depthwise.bias),
            ("project.kernel", params.project.kernel),
            ("project.bias", params.project.bias),
        ]
    if isinstance(params, nn_modules.FcaParams):
        return [
            ("dense1.weight", params.reduce_weight),
            ("dense1.bias", params.reduce_bias),
            ("dense2.weight", params.restore_weight),
            ("dense2.bias", params.restore_bias),
        ]
    raise ConfigError(f"unknown parameter object {type(params).__name__}")


def _node_params(node: NodeSpec, in_channels: int, rng) -> Optional[ModuleParams]:
    op = node.op
    if isinstance(op, ConvSpec):
        kernel_shape = (op.out_channels, in_channels, op.kernel, op.kernel)
        if rng is None:
            kernel = np.zeros(kernel_shape, dtype=np.float32)
        else:
            fan_in = in_channels * op.kernel * op.kernel
            kernel = (rng.standard_normal(kernel_shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        bias = np.zeros(op.out_channels, dtype=np.float32)
        return ConvWeights(kernel=kernel, bias=bias, stride=op.stride, padding=op.padding)
    if isinstance(op, PepConfig):
        return nn_modules.init_pep_params(op, in_channels, rng)
    if isinstance(op, EpConfig):
        return nn_modules.init_ep_params(op, in_channels, rng)
    if isinstance(op, FcaConfig):
        return nn_modules.init_fca_params(op, in_channels, rng)
    return None


class WeightStore:
    """Per-node parameters aligned with the node list of one NetworkSpec."""

    def __init__(self, params: list):
        self.params = list(params)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "WeightStore":
        return cls._init(spec, rng=None)

    @classmethod
    def random(cls, spec: NetworkSpec, seed: int = 0) -> "WeightStore":
        return cls._init(spec, rng=np.random.default_rng(seed))

    @classmethod
    def _init(cls, spec: NetworkSpec, rng) -> "WeightStore":
        table = infer_shapes(spec)
        params = [
            _node_params(node, table.of(node.input_id)[0], rng) for node in spec.nodes
        ]
        return cls(params)

    def validate_against(self, spec: NetworkSpec):
        if len(self.params) != len(spec.nodes):
            raise ConfigError(
                f"weight store has {len(self.params)} entries for {len(spec.nodes)} nodes"
            )
        table = infer_shapes(spec)
        reference = WeightStore.zeros(spec)
        for node in spec.nodes:
            expected = param_tensors(reference.params[node.id])
            actual = param_tensors(self.params[node.id])
            if len(expected) != len(actual):
                raise ConfigError(
                    f"node {node.id} ({node.kind}) expects {len(expected)} tensors, "
                    f"store has {len(actual)}"
                )
            for (name, want), (_, have) in zip(expected, actual):
                if want.shape != have.shape:
                    raise ConfigError(
                        f"node {node.id} ({node.kind}) tensor {name}: expected shape "
                        f"{want.shape}, store has {have.shape}"
                    )
        del table


def execute(spec: NetworkSpec, weights: WeightStore, x: np.ndarray) -> tuple:
    """Run a complete detection network; returns (large, medium, small) maps."""
    x = as_tensor(x)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ConfigError(
            f"input shape {tuple(x.shape[1:])} does not match spec {tuple(spec.input_shape)}"
        )
    detect_tags = sorted(n.op.scale_tag for n in spec.detect_nodes())
    if detect_tags != sorted(SCALE_TAGS):
        raise ConfigError(
            f"a runnable detection network needs detect nodes {list(SCALE_TAGS)}, got {detect_tags}"
        )
    weights.validate_against(spec)

    raw_heads = linear_conv_ids(spec)
    outputs: dict[int, np.ndarray] = {INPUT_ID: x}
    detect_by_tag: dict[str, np.ndarray] = {}

    for node in spec.nodes:
        inp = outputs[node.input_id]
        op = node.op
        params = weights.params[node.id]
        if isinstance(op, ConvSpec):
            y = conv2d(inp, params)
            if node.id not in raw_heads:
                y = leaky_relu(y)
        elif isinstance(op, PepConfig):
            y = nn_modules.pep_forward(inp, op, params)
        elif isinstance(op, EpConfig):
            y = nn_modules.ep_forward(inp, op, params)
        elif isinstance(op, FcaConfig):
            y = nn_modules.fca_forward(inp, op, params)
        elif isinstance(op, MaxPoolSpec):
            y = max_pool2d(inp, op.kernel, op.stride)
        elif isinstance(op, UpsampleSpec):
            y = upsample_nearest(inp, op.factor)
        elif isinstance(op, ConcatSpec):
            y = concat_channels(inp, outputs[op.with_id])
        elif isinstance(op, DetectSpec):
            y = inp
            detect_by_tag[op.scale_tag] = y
        else:  # pragma: no cover - kinds are closed
            raise ConfigError(f"unknown op {op!r}")
        outputs[node.id] = y

    return tuple(detect_by_tag[tag] for tag in SCALE_TAGS)


def load_bundled_config(name: str) -> "NetworkSpec":
    """Parse a config shipped with the package, e.g. ``reference``."""
    if not name.endswith(".cfg"):
        name += ".cfg"
    text = resources.files("compactdet.configs").joinpath(name).read_text()
    return parse_network_spec(text)


def reference_network() -> NetworkSpec:
    """Bundled three-scale reference detector (416x416, 20 classes)."""
    g = GraphBuilder((3, 416, 416), num_classes=20)

    g.conv(3, 12, 1)                 # 0
    g.conv(3, 24, 2)                 # 1   208x208
    g.pep(7, 14, 24, 1)              # 2
    g.ep(32, 70, 2)                  # 3   104x104
    g.pep(25, 34, 70, 1)             # 4
    g.pep(24, 32, 70, 1)             # 5
    g.ep(64, 150, 2)                 # 6   52x52
    g.pep(56, 58, 150, 1)            # 7
    g.conv(1, 150, 1)                # 8
    g.fca(8)                         # 9
    g.pep(73, 74, 150, 1)            # 10
    g.pep(71, 72, 150, 1)            # 11
    small_tap = g.pep(75, 76, 150, 1)   # 12
    g.ep(96, 325, 2)                 # 13  26x26
    g.pep(132, 140, 325, 1)          # 14
    g.pep(124, 136, 325, 1)          # 15
    g.pep(141, 150, 325, 1)          # 16
    g.pep(140, 148, 325, 1)          # 17
    g.pep(137, 146, 325, 1)          # 18
    g.pep(135, 144, 325, 1)          # 19
    g.pep(133, 142, 325, 1)          # 20
    medium_tap = g.pep(140, 148, 325, 1)  # 21
    g.ep(480, 545, 2)                # 22  13x13
    g.pep(276, 700, 545, 1)          # 23
    g.conv(1, 230, 1)                # 24
    g.ep(420, 489, 1)                # 25
    g.pep(213, 720, 469, 1)          # 26
    trunk = g.conv(1, 189, 1)        # 27

    g.conv(1, 105, 1)                # 28
    g.upsample(2)                    # 29  26x26
    g.concat(medium_tap)             # 30  430 ch
    g.pep(113, 180, 325, 1)          # 31
    g.pep(99, 128, 207, 1)           # 32
    mid_trunk = g.conv(1, 98, 1)     # 33

    g.conv(1, 47, 1)                 # 34
    g.upsample(2)                    # 35  52x52
    g.concat(small_tap)              # 36  197 ch
    g.pep(58, 66, 122, 1)            # 37
    g.pep(52, 56, 87, 1)             # 38
    g.pep(47, 50, 93, 1)             # 39
    g.conv(1, 75, 1)                 # 40
    g.detect("small")                # 41

    g.ep(120, 183, 1, frm=mid_trunk)  # 42
    g.conv(1, 75, 1)                 # 43
    g.detect("medium")               # 44

    g.ep(360, 462, 1, frm=trunk)     # 45
    g.conv(1, 75, 1)                 # 46
    g.detect("large")                # 47

    return g.build()
