"""Post-training quantization: affine primitives and the annotate /
calibrate / convert flow."""

from .affine import (
    DYN_I8_ACT,
    SCALE_FLOOR,
    STATIC_I8_ACT,
    STATIC_I8_WEIGHT,
    QuantizedTensor,
    QuantSpec,
    affine_dequantize,
    affine_quantize,
    granule_count,
    group_w4_spec,
    quantize_weight_groupwise,
    quantize_weight_per_channel,
    symmetric_scale,
)
from .flow import (
    Annotation,
    NodeAnnotation,
    ObserverStats,
    Recipe,
    annotate,
    calibrate,
    convert,
    parse_recipe,
)

__all__ = [
    "DYN_I8_ACT", "SCALE_FLOOR", "STATIC_I8_ACT", "STATIC_I8_WEIGHT",
    "Annotation", "NodeAnnotation", "ObserverStats", "QuantSpec",
    "QuantizedTensor", "Recipe",
    "affine_dequantize", "affine_quantize", "annotate", "calibrate",
    "convert", "granule_count", "group_w4_spec", "parse_recipe",
    "quantize_weight_groupwise", "quantize_weight_per_channel",
    "symmetric_scale",
]
