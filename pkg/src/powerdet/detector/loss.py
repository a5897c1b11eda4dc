"""Composite detection loss: box regression + objectness BCE + class BCE."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ModelSpec
from .targets import TargetGrid, decode_boxes, split_head

_FOUR_OVER_PI2 = 4.0 / math.pi**2


@dataclass(frozen=True)
class LossWeights:
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5


@dataclass
class LossBreakdown:
    box_loss: torch.Tensor
    objectness_loss: torch.Tensor
    class_loss: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {
            "box_loss": float(self.box_loss),
            "obj_loss": float(self.objectness_loss),
            "cls_loss": float(self.class_loss),
            "total_loss": float(self.total),
        }


def _iou_parts(p, g):
    pw, ph = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    gw, gh = g[..., 2] - g[..., 0], g[..., 3] - g[..., 1]
    iw = (torch.minimum(p[..., 2], g[..., 2]) - torch.maximum(p[..., 0], g[..., 0])).clamp_min(0)
    ih = (torch.minimum(p[..., 3], g[..., 3]) - torch.maximum(p[..., 1], g[..., 1])).clamp_min(0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    return inter / union.clamp_min(1e-12), pw, ph, gw, gh


def ciou_loss_torch(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Element-wise CIoU loss on ``[..., 4]`` corner tensors (alpha is differentiated through)."""
    iou, pw, ph, gw, gh = _iou_parts(p, g)
    dx = (p[..., 0] - g[..., 0]) + (p[..., 2] - g[..., 2])
    dy = (p[..., 1] - g[..., 1]) + (p[..., 3] - g[..., 3])
    rho2 = (dx * dx + dy * dy) / 4
    cw = torch.maximum(p[..., 2], g[..., 2]) - torch.minimum(p[..., 0], g[..., 0])
    ch = torch.maximum(p[..., 3], g[..., 3]) - torch.minimum(p[..., 1], g[..., 1])
    c2 = (cw * cw + ch * ch).clamp_min(1e-12)
    v = _FOUR_OVER_PI2 * (torch.atan(gw / gh.clamp_min(1e-12)) - torch.atan(pw / ph.clamp_min(1e-12))) ** 2
    denom = 1 - iou + v
    alpha = torch.where(v > 0, v / torch.where(v > 0, denom, torch.ones_like(denom)), torch.zeros_like(v))
    return 1 - iou + rho2 / c2 + alpha * v


def mpdiou_loss_torch(p: torch.Tensor, g: torch.Tensor, w: float, h: float) -> torch.Tensor:
    """Element-wise ``1 - MPDIoU`` with corner distances normalised by the image diagonal."""
    iou = _iou_parts(p, g)[0]
    norm = w * w + h * h
    d1 = (p[..., 0] - g[..., 0]) ** 2 + (p[..., 1] - g[..., 1]) ** 2
    d2 = (p[..., 2] - g[..., 2]) ** 2 + (p[..., 3] - g[..., 3]) ** 2
    return 1 - (iou - d1 / norm - d2 / norm)


def box_loss_torch(kind: str, p, g, spec: ModelSpec):
    if kind == "ciou":
        return ciou_loss_torch(p, g)
    if kind == "mpdiou":
        return mpdiou_loss_torch(p, g, spec.input_size, spec.input_size)
    raise ValueError(f"unknown box loss {kind!r}")


def detection_loss(raw: torch.Tensor, targets: TargetGrid, spec: ModelSpec,
                   weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of mean box loss over assigned anchors, objectness BCE over all, class BCE over assigned."""
    head = split_head(raw, spec)
    if targets.mask.shape != head.shape[:4]:
        raise ValueError(f"targets of shape {tuple(targets.mask.shape)} do not match predictions {tuple(head.shape[:4])}")
    mask = targets.mask
    obj_t = targets.obj.to(head.dtype)
    obj_loss = F.binary_cross_entropy_with_logits(head[..., 4], obj_t)
    zero = head.sum() * 0.0
    if mask.any():
        pred = decode_boxes(head, spec)[mask]
        box_loss = box_loss_torch(spec.box_loss, pred, targets.box[mask].to(head.dtype), spec).mean()
        cls_t = F.one_hot(targets.cls[mask], spec.num_classes).to(head.dtype)
        cls_loss = F.binary_cross_entropy_with_logits(head[..., 5:][mask], cls_t)
    else:
        box_loss, cls_loss = zero, zero
    total = weights.box * box_loss + weights.obj * obj_loss + weights.cls * cls_loss
    return LossBreakdown(box_loss, obj_loss, cls_loss, total)
