"""Condition-aware two-modality feature fusion (concat -> CBAM -> FiLM),
baseline fusion blocks, an offline VLM condition-mining pipeline and a
synthetic detection benchmark."""

from .fusion import (
    VARIANTS,
    FusionBlockParams,
    FusionShapeError,
    cbam,
    cbam_fuse,
    channel_attention,
    concat_conv_fuse,
    concat_features,
    cross_attention_fuse,
    film_modulate,
    fuse,
    init_fusion_params,
    self_attention_fuse,
    spatial_attention,
    vlc_fuse,
)
from .metrics import DetectionResult, EvalReport, iou, mean_ap, mean_ar_100

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "DetectionResult",
    "EvalReport",
    "FusionBlockParams",
    "FusionShapeError",
    "cbam",
    "cbam_fuse",
    "channel_attention",
    "concat_conv_fuse",
    "concat_features",
    "cross_attention_fuse",
    "film_modulate",
    "fuse",
    "init_fusion_params",
    "iou",
    "mean_ap",
    "mean_ar_100",
    "self_attention_fuse",
    "spatial_attention",
    "vlc_fuse",
]
