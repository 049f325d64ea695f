"""compactdet: a compact three-scale object detection toolkit.

Pure-numpy inference kernels, a line-oriented network config format with
shape inference and cost accounting, anchor-box decoding with NMS and VOC
11-point mAP scoring, 8-bit weight quantization, and a constrained
evolutionary design-space explorer.
"""

__version__ = "0.1.0"
