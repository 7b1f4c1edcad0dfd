"""EDNet: CPU inference engine, WIoU v3 loss, evaluation and INT8 quantization in numpy."""

__version__ = "0.1.0"

from .arch import VariantConfig, NetGraph, build, build_variant, forward, init_weights, param_count
from .decode import Detection, decode, nms
from .loss import Box, WIoUState, iou, wiou_v1, wiou_v3, grad_wiou_v3

__all__ = [
    "VariantConfig", "NetGraph", "build", "build_variant", "forward", "init_weights", "param_count",
    "Detection", "decode", "nms", "Box", "WIoUState", "iou", "wiou_v1", "wiou_v3", "grad_wiou_v3",
]
