"""Command-line front end.

Subcommands: describe, detect, quantize, explore, bench.  Exit codes:
0 success, 2 config/parse problems, 3 I/O or file-format problems,
4 exploration found no feasible candidate.

Images come in as binary PPM (P6, 8-bit RGB, maxval 255); reports are
plain text with stable columns, detections use the interchange line format
`<image_id> <class_id> <score> <cx> <cy> <w> <h>` in normalized
coordinates of the original image.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import arch_graph, complexity, detection, explorer
from .arch_graph import ParseError, ShapeError
from .complexity import WeightFormatError
from .detection import DetectionFormatError
from .tensor_core import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4


class PpmError(ValueError):
    """A PPM file is not a binary 8-bit RGB image."""


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM with maxval 255 into an (h, w, 3) uint8 array."""
    data = Path(path).read_bytes()
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError("truncated header")
        return data[start:pos]

    if next_token() != b"P6":
        raise PpmError("not a binary PPM (P6) file")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError:
        raise PpmError("non-numeric header field") from None
    if width < 1 or height < 1:
        raise PpmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PpmError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte separates header from raster
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise PpmError(f"raster has {len(raster)} bytes, expected {expected}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PpmError(f"expected (h, w, 3) image, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def _load_spec(path) -> arch_graph.NetworkSpec:
    return arch_graph.parse_network_spec(Path(path).read_text())


def _shape_table(spec) -> str:
    table = arch_graph.infer_shapes(spec)
    lines = ["node_id\tkind\tchannels\theight\twidth"]
    for node in spec.nodes:
        c, h, w = table.of(node.id)
        lines.append(f"{node.id}\t{node.kind}\t{c}\t{h}\t{w}")
    return "\n".join(lines) + "\n"


def cmd_describe(args) -> int:
    spec = _load_spec(args.config)
    report = complexity.count_network(spec)
    c, h, w = spec.input_shape
    print(f"config: {args.config}")
    print(f"input: {c}x{h}x{w}  classes: {spec.num_classes}  anchors_per_scale: {spec.anchors_per_scale}")
    print(f"nodes: {len(spec.nodes)}")
    print()
    print(_shape_table(spec), end="")
    print()
    print(report.format_table(), end="")
    print()
    size8 = complexity.model_size_bytes(spec, 8)
    size32 = complexity.model_size_bytes(spec, 32)
    print(f"model_size_8bit: {size8} bytes ({size8 / 1e6:.3f} MB)")
    print(f"model_size_32bit: {size32} bytes ({size32 / 1e6:.3f} MB)")
    return EXIT_OK


def cmd_detect(args) -> int:
    spec = _load_spec(args.config)
    store, _bits = complexity.load_weights(args.weights, spec)
    image = read_ppm(args.image)
    _c, target_h, target_w = spec.input_shape
    tensor, transform = detection.letterbox_image(image, (target_h, target_w))
    found = detection.detect(
        tensor, spec, store, conf_threshold=args.conf, nms_iou=args.nms_iou
    )
    image_id = Path(args.image).stem
    lines = [
        detection.format_detection_line(
            image_id,
            detection.Detection(
                bbox=transform.box_to_original(det.bbox),
                class_id=det.class_id,
                score=det.score,
            ),
        )
        for det in found
    ]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"{len(lines)} detection(s)", file=sys.stderr)
    return EXIT_OK


def cmd_quantize(args) -> int:
    if args.bits != 8:
        raise ConfigError(f"quantize writes 8-bit files, got --bits {args.bits}")
    spec = _load_spec(args.config)
    store, bits = complexity.load_weights(args.weights, spec)
    if bits == 8:
        raise ConfigError(f"{args.weights} is already 8-bit; quantize takes 32-bit input")
    complexity.save_weights(args.out, spec, store, bits=8)

    worst_err = 0.0
    worst_bound = 0.0
    for params in store.params:
        for name, arr in arch_graph.param_tensors(params):
            if name.endswith("bias"):
                continue
            q = complexity.quantize_tensor(arr)
            err = float(np.abs(complexity.dequantize_tensor(q) - arr).max()) if arr.size else 0.0
            if err > worst_err:
                worst_err = err
                worst_bound = q.scale / 2
    in_size = Path(args.weights).stat().st_size
    out_size = Path(args.out).stat().st_size
    print(f"wrote {args.out}: {out_size} bytes (8-bit), input {in_size} bytes (32-bit)")
    print(f"max round-trip error {worst_err:.8f} (worst-tensor bound {worst_bound:.8f})")
    return EXIT_OK


def cmd_explore(args) -> int:
    proto_spec = _load_spec(args.config)
    proto = explorer.PrototypeSpec(base=proto_spec)
    space = explorer.parse_design_space(Path(args.space).read_text(), proto)
    constraints = complexity.ConstraintSet(
        max_ops=args.max_ops, min_score=args.min_score, weight_bits=args.bits
    )
    evaluator = explorer.synthetic_evaluator()
    result = explorer.explore(
        proto, space, constraints, evaluator, budget=args.budget, seed=args.seed
    )

    log_lines = [explorer.format_log_header(space)]
    log_lines += [explorer.format_history_line(args.seed, e) for e in result.history]
    log_text = "".join(line + "\n" for line in log_lines)
    log_path = args.log if args.log else (args.out + ".log" if args.out else None)
    if log_path:
        Path(log_path).write_text(log_text)
    else:
        sys.stdout.write(log_text)

    if result.best is None:
        print(
            f"no feasible candidate in {result.evaluations} evaluations "
            f"over {result.space_size} points",
            file=sys.stderr,
        )
        return EXIT_INFEASIBLE
    best = result.best
    if args.out:
        Path(args.out).write_text(arch_graph.serialize_network_spec(best.spec))
    print(
        f"best: u {best.u_value:.6f} score {best.score:.6f} ops {best.ops} "
        f"params {best.params} point {' '.join(str(v) for v in best.point)}"
    )
    print(f"evaluated {result.evaluations} of {result.space_size} points")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = _load_spec(args.config)
    if args.weights:
        store, _bits = complexity.load_weights(args.weights, spec)
    else:
        store = arch_graph.WeightStore.random(spec, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.random((1, *spec.input_shape), dtype=np.float32)
    arch_graph.execute(spec, store, x)  # warm-up, not timed
    times_ms = []
    for _ in range(args.iterations):
        start = time.perf_counter()
        arch_graph.execute(spec, store, x)
        times_ms.append((time.perf_counter() - start) * 1e3)
    c, h, w = spec.input_shape
    report = complexity.count_network(spec)
    print(f"config: {args.config}  input: {c}x{h}x{w}  iterations: {args.iterations}")
    print(f"total_ops: {report.total_ops}")
    print(
        f"latency_ms mean {statistics.mean(times_ms):.2f} "
        f"median {statistics.median(times_ms):.2f} min {min(times_ms):.2f}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compactdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    describe = sub.add_parser("describe", help="shapes, ops, params, and sizes of a config")
    describe.add_argument("--config", required=True)
    describe.set_defaults(func=cmd_describe)

    det = sub.add_parser("detect", help="run detection on one PPM image")
    det.add_argument("--config", required=True)
    det.add_argument("--weights", required=True)
    det.add_argument("--image", required=True)
    det.add_argument("--out", default=None, help="detections file (default: stdout)")
    det.add_argument("--conf", type=float, default=detection.DEFAULT_CONF_THRESHOLD)
    det.add_argument("--nms-iou", type=float, default=detection.DEFAULT_NMS_IOU)
    det.set_defaults(func=cmd_detect)

    quant = sub.add_parser("quantize", help="convert a 32-bit weights file to 8-bit")
    quant.add_argument("--config", required=True)
    quant.add_argument("--weights", required=True)
    quant.add_argument("--out", required=True)
    quant.add_argument("--bits", type=int, choices=(8, 32), default=8)
    quant.set_defaults(func=cmd_quantize)

    explore = sub.add_parser("explore", help="search a design space around a prototype config")
    explore.add_argument("--config", required=True, help="prototype config")
    explore.add_argument("--space", required=True, help="design-space document")
    explore.add_argument("--out", default=None, help="where to write the best config")
    explore.add_argument("--log", default=None, help="evaluation log (default: <out>.log)")
    explore.add_argument("--budget", type=int, default=256)
    explore.add_argument("--seed", type=int, default=0)
    explore.add_argument("--max-ops", type=int, default=None)
    explore.add_argument("--min-score", type=float, default=None)
    explore.add_argument("--bits", type=int, choices=(8, 32), default=8)
    explore.set_defaults(func=cmd_explore)

    bench = sub.add_parser("bench", help="measure forward-pass latency")
    bench.add_argument("--config", required=True)
    bench.add_argument("--weights", default=None)
    bench.add_argument("--iterations", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ShapeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WeightFormatError, PpmError, DetectionFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
