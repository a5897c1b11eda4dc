"""Anchor-based one-stage detector built from the blocks."""
from .loss import (
    LossBreakdown,
    LossWeights,
    box_loss_torch,
    ciou_loss_torch,
    detection_loss,
    mpdiou_loss_torch,
)
from .model import BOX_LOSSES, DEFAULT_ANCHORS, STRIDE, Backbone, Detector, ModelSpec, Neck, build_model
from .targets import (
    TargetGrid,
    assign_targets,
    decode,
    decode_boxes,
    encode_box,
    encode_targets,
    split_head,
    wh_iou,
)

__all__ = [
    "LossBreakdown", "LossWeights", "box_loss_torch", "ciou_loss_torch", "detection_loss",
    "mpdiou_loss_torch", "BOX_LOSSES", "DEFAULT_ANCHORS", "STRIDE", "Backbone", "Detector",
    "ModelSpec", "Neck", "build_model", "TargetGrid", "assign_targets", "decode", "decode_boxes",
    "encode_box", "encode_targets", "split_head", "wh_iou",
]
