"""Center-cell anchor assignment and the head-space box codec."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

from ..geometry import Box, Detection, LabeledBox, nms
from .model import STRIDE, ModelSpec


@dataclass
class TargetGrid:
    """Per-anchor-cell targets, each tensor laid out ``[A, G, G, ...]`` (batched: ``[B, A, G, G, ...]``)."""

    obj: torch.Tensor  # float, 1 where assigned
    cls: torch.Tensor  # long, -1 where unassigned
    box: torch.Tensor  # float, gt corners in image pixels
    mask: torch.Tensor  # bool
    dropped: int = 0  # labels left without a free anchor

    @staticmethod
    def stack(grids: Sequence["TargetGrid"]) -> "TargetGrid":
        return TargetGrid(
            torch.stack([g.obj for g in grids]),
            torch.stack([g.cls for g in grids]),
            torch.stack([g.box for g in grids]),
            torch.stack([g.mask for g in grids]),
            sum(g.dropped for g in grids),
        )


def wh_iou(w, h, anchors) -> np.ndarray:
    """IoU of a ``w x h`` box against each anchor, all centred at the origin."""
    a = np.asarray(anchors, dtype=np.float64)
    inter = np.minimum(w, a[:, 0]) * np.minimum(h, a[:, 1])
    return inter / (w * h + a[:, 0] * a[:, 1] - inter)


def assign_targets(labels: Sequence[LabeledBox], spec: ModelSpec) -> TargetGrid:
    """Each box goes to the cell holding its centre and its best free anchor there.

    Boxes are placed in order of decreasing area (ties by input order), so on a
    contested anchor the larger box keeps it and the other falls back to its
    next-best anchor.
    """
    A, G = spec.num_anchors, spec.grid
    obj = torch.zeros(A, G, G)
    cls = torch.full((A, G, G), -1, dtype=torch.long)
    box = torch.zeros(A, G, G, 4)
    mask = torch.zeros(A, G, G, dtype=torch.bool)
    order = sorted(range(len(labels)), key=lambda i: -labels[i].box.area)
    dropped = 0
    for i in order:
        lab = labels[i]
        b = lab.box
        if b.degenerate:
            raise ValueError(f"label {i} has a degenerate box {b.as_tuple()}")
        cx, cy = (b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2
        gx = min(max(int(math.floor(cx / STRIDE)), 0), G - 1)
        gy = min(max(int(math.floor(cy / STRIDE)), 0), G - 1)
        ranking = np.argsort(-wh_iou(b.width, b.height, spec.anchors), kind="stable")
        for a in ranking:
            if not mask[a, gy, gx]:
                mask[a, gy, gx] = True
                obj[a, gy, gx] = 1.0
                cls[a, gy, gx] = lab.class_id
                box[a, gy, gx] = torch.tensor(b.as_tuple())
                break
        else:
            dropped += 1
    return TargetGrid(obj, cls, box, mask, dropped)


def split_head(raw: torch.Tensor, spec: ModelSpec) -> torch.Tensor:
    """``[B, A*(5+C), G, G]`` -> ``[B, A, G, G, 5+C]``."""
    b, ch, gh, gw = raw.shape
    k = spec.outputs_per_anchor
    if ch != spec.num_anchors * k or gh != spec.grid or gw != spec.grid:
        raise ValueError(
            f"head output {tuple(raw.shape)} does not match [B, {spec.num_anchors * k}, {spec.grid}, {spec.grid}]"
        )
    return raw.view(b, spec.num_anchors, k, gh, gw).permute(0, 1, 3, 4, 2)


def _grid_and_anchors(spec: ModelSpec, like: torch.Tensor):
    G = spec.grid
    ys, xs = torch.meshgrid(torch.arange(G, dtype=like.dtype), torch.arange(G, dtype=like.dtype), indexing="ij")
    anchors = torch.tensor(spec.anchors, dtype=like.dtype).view(-1, 1, 1, 2)
    return xs, ys, anchors


def decode_boxes(head: torch.Tensor, spec: ModelSpec) -> torch.Tensor:
    """Box corners in image pixels from split head output ``[..., A, G, G, >=4]``."""
    xs, ys, anchors = _grid_and_anchors(spec, head)
    s = torch.sigmoid(head[..., :4])
    cx = (2 * s[..., 0] - 0.5 + xs) * STRIDE
    cy = (2 * s[..., 1] - 0.5 + ys) * STRIDE
    w = (2 * s[..., 2]) ** 2 * anchors[..., 0]
    h = (2 * s[..., 3]) ** 2 * anchors[..., 1]
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def _logit(p, eps=1e-7):
    p = min(max(p, eps), 1 - eps)
    return math.log(p / (1 - p))


def encode_box(box: Box, anchor: int, gx: int, gy: int, spec: ModelSpec) -> List[float]:
    """Raw head offsets ``(tx, ty, tw, th)`` that decode to ``box`` at this cell and anchor."""
    aw, ah = spec.anchors[anchor]
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    return [
        _logit((cx / STRIDE - gx + 0.5) / 2),
        _logit((cy / STRIDE - gy + 0.5) / 2),
        _logit(math.sqrt(box.width / aw) / 2),
        _logit(math.sqrt(box.height / ah) / 2),
    ]


def encode_targets(targets: TargetGrid, spec: ModelSpec, logit=20.0) -> torch.Tensor:
    """A raw head tensor ``[A*(5+C), G, G]`` whose decoding reproduces ``targets`` exactly.

    Unassigned cells get objectness ``-logit``; assigned ones ``+logit`` and a
    one-hot class vector of ``+-logit``.
    """
    A, G, k = spec.num_anchors, spec.grid, spec.outputs_per_anchor
    out = torch.zeros(A, G, G, k, dtype=torch.float64)
    out[..., 4] = -logit
    out[..., 5:] = -logit
    for a, gy, gx in targets.mask.nonzero().tolist():
        b = Box(*targets.box[a, gy, gx].tolist())
        out[a, gy, gx, :4] = torch.tensor(encode_box(b, a, gx, gy, spec), dtype=torch.float64)
        out[a, gy, gx, 4] = logit
        out[a, gy, gx, 5 + int(targets.cls[a, gy, gx])] = logit
    return out.permute(0, 3, 1, 2).reshape(A * k, G, G)


def decode(raw: torch.Tensor, spec: ModelSpec, conf_thresh=0.25, nms_thresh=0.45, max_det=100):
    """Per-image lists of Detection from raw head output ``[B, A*(5+C), G, G]``."""
    if not (0 <= conf_thresh <= 1 and 0 <= nms_thresh <= 1):
        raise ValueError("conf_thresh and nms_thresh must lie in [0, 1]")
    with torch.no_grad():
        head = split_head(raw.detach(), spec).double()
        boxes = decode_boxes(head, spec).clamp(0, spec.input_size)
        obj = torch.sigmoid(head[..., 4])
        cls_p, cls_id = torch.sigmoid(head[..., 5:]).max(-1)
        conf = obj * cls_p
    results = []
    for i in range(raw.shape[0]):
        keep = (conf[i] >= conf_thresh).nonzero().tolist()
        dets = []
        for a, gy, gx in keep:
            x1, y1, x2, y2 = boxes[i, a, gy, gx].tolist()
            if x2 <= x1 or y2 <= y1:
                continue
            dets.append(Detection(Box(x1, y1, x2, y2), int(cls_id[i, a, gy, gx]), float(conf[i, a, gy, gx])))
        results.append(nms(dets, nms_thresh)[:max_det])
    return results
