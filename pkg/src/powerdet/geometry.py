"""Boxes, IoU-family metrics and losses, NMS and mAP evaluation.

Everything here is float64 numpy.  The scalar functions (``iou``,
``ciou_loss``, ``mpdiou`` ...) take :class:`Box` objects; each one is a thin
wrapper over an ``*_array`` kernel that works on ``(N, 4)`` arrays of
``x1, y1, x2, y2`` rows, which is what the training-side code and the
box-fitting experiments use.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

CLASS_NAMES = ("bj", "bj_mh", "bj_ps", "jyz_sh", "jyz_sl")
NUM_CLASSES = len(CLASS_NAMES)

_FOUR_OVER_PI2 = 4.0 / math.pi**2


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box corners {self.as_tuple()}: need x1<=x2 and y1<=y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class ImageDims:
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"image dims must be positive, got {self.w}x{self.h}")


def _check_class(class_id: int):
    if not 0 <= int(class_id) < NUM_CLASSES:
        raise ValueError(f"class_id {class_id} outside 0..{NUM_CLASSES - 1}")


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    class_id: int

    def __post_init__(self):
        _check_class(self.class_id)

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float

    def __post_init__(self):
        _check_class(self.class_id)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class CIoUTerms:
    iou: float
    rho_sq: float
    c_sq: float
    v: float
    alpha_w: float

    @property
    def loss(self) -> float:
        return 1.0 - self.iou + self.rho_sq / self.c_sq + self.alpha_w * self.v


@dataclass(frozen=True)
class MPDIoUTerms:
    iou: float
    d1_sq: float
    d2_sq: float
    norm: float

    @property
    def value(self) -> float:
        return self.iou - self.d1_sq / self.norm - self.d2_sq / self.norm

    @property
    def loss(self) -> float:
        return 1.0 - self.value


# ---------------------------------------------------------------------------
# array kernels

def _split(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]


def _overlap(p, g):
    """Intersection/union pieces shared by every IoU-family kernel."""
    x1, y1, x2, y2 = _split(p)
    a1, b1, a2, b2 = _split(g)
    iw = np.clip(np.minimum(x2, a2) - np.maximum(x1, a1), 0.0, None)
    ih = np.clip(np.minimum(y2, b2) - np.maximum(y1, b1), 0.0, None)
    inter = iw * ih
    union = (x2 - x1) * (y2 - y1) + (a2 - a1) * (b2 - b1) - inter
    return iw, ih, inter, union


def iou_array(p, g) -> np.ndarray:
    """Elementwise IoU of broadcastable ``(..., 4)`` box arrays; 0 where the union is empty."""
    _, _, inter, union = _overlap(p, g)
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou_array(a[:, None, :], b[None, :, :])


def _require_nondegenerate(boxes, what):
    x1, y1, x2, y2 = _split(boxes)
    if np.any(x2 - x1 <= 0) or np.any(y2 - y1 <= 0):
        raise ValueError(f"degenerate {what} box: width and height must be positive")


def _require_inside(boxes, w, h, what):
    x1, y1, x2, y2 = _split(boxes)
    if np.any(x1 < 0) or np.any(y1 < 0) or np.any(x2 > w) or np.any(y2 > h):
        raise ValueError(f"{what} box lies outside the {w}x{h} image")


def ciou_terms_array(p, g) -> Dict[str, np.ndarray]:
    _require_nondegenerate(p, "predicted")
    _require_nondegenerate(g, "ground-truth")
    x1, y1, x2, y2 = _split(p)
    a1, b1, a2, b2 = _split(g)
    _, _, inter, union = _overlap(p, g)
    iou = inter / union
    rho_sq = (((x1 - a1) + (x2 - a2)) ** 2 + ((y1 - b1) + (y2 - b2)) ** 2) / 4.0
    cw = np.maximum(x2, a2) - np.minimum(x1, a1)
    ch = np.maximum(y2, b2) - np.minimum(y1, b1)
    c_sq = cw**2 + ch**2
    v = _FOUR_OVER_PI2 * (np.arctan((a2 - a1) / (b2 - b1)) - np.arctan((x2 - x1) / (y2 - y1))) ** 2
    denom = 1.0 - iou + v
    alpha = np.zeros_like(v)
    np.divide(v, denom, out=alpha, where=denom > 0)
    return {"iou": iou, "rho_sq": rho_sq, "c_sq": c_sq, "v": v, "alpha_w": alpha}


def ciou_loss_array(p, g) -> np.ndarray:
    t = ciou_terms_array(p, g)
    return 1.0 - t["iou"] + t["rho_sq"] / t["c_sq"] + t["alpha_w"] * t["v"]


def mpdiou_terms_array(p, g, w: float, h: float) -> Dict[str, np.ndarray]:
    ImageDims(w, h)
    _require_inside(p, w, h, "first")
    _require_inside(g, w, h, "second")
    x1, y1, x2, y2 = _split(p)
    a1, b1, a2, b2 = _split(g)
    d1_sq = (a1 - x1) ** 2 + (b1 - y1) ** 2
    d2_sq = (a2 - x2) ** 2 + (b2 - y2) ** 2
    norm = np.full_like(d1_sq, float(w) ** 2 + float(h) ** 2)
    return {"iou": iou_array(p, g), "d1_sq": d1_sq, "d2_sq": d2_sq, "norm": norm}


def mpdiou_array(p, g, w: float, h: float) -> np.ndarray:
    t = mpdiou_terms_array(p, g, w, h)
    return t["iou"] - t["d1_sq"] / t["norm"] - t["d2_sq"] / t["norm"]


def mpdiou_loss_array(p, g, w: float, h: float) -> np.ndarray:
    return 1.0 - mpdiou_array(p, g, w, h)


def _iou_grad(p, g):
    """d(IoU)/d(x1, y1, x2, y2) of the predicted box.

    At ties between a predicted and a ground-truth edge the ground-truth edge
    is taken as the active one (zero derivative through the intersection).
    """
    x1, y1, x2, y2 = _split(p)
    a1, b1, a2, b2 = _split(g)
    iw, ih, inter, union = _overlap(p, g)
    live = (iw > 0) & (ih > 0)
    d_inter = np.stack(
        [-ih * (x1 > a1), -iw * (y1 > b1), ih * (x2 < a2), iw * (y2 < b2)], axis=-1
    ) * live[..., None]
    w, h = x2 - x1, y2 - y1
    d_area = np.stack([-h, -w, h, w], axis=-1)
    return (d_inter * (union + inter)[..., None] - inter[..., None] * d_area) / (union**2)[..., None]


def ciou_grad_terms_array(p, g) -> Dict[str, np.ndarray]:
    """Per-term gradients of the CIoU loss w.r.t. the predicted corners.

    Keys: ``iou`` (of ``1 - IoU``), ``distance`` (of ``rho^2 / c^2``) and
    ``aspect`` (of ``alpha * v``, alpha differentiated too).
    """
    t = ciou_terms_array(p, g)
    x1, y1, x2, y2 = _split(p)
    a1, b1, a2, b2 = _split(g)
    d_iou = _iou_grad(p, g)

    dx = ((x1 - a1) + (x2 - a2)) / 2.0
    dy = ((y1 - b1) + (y2 - b2)) / 2.0
    d_rho = np.stack([dx, dy, dx, dy], axis=-1)
    cw = np.maximum(x2, a2) - np.minimum(x1, a1)
    ch = np.maximum(y2, b2) - np.minimum(y1, b1)
    d_c = 2.0 * np.stack([-cw * (x1 < a1), -ch * (y1 < b1), cw * (x2 > a2), ch * (y2 > b2)], axis=-1)
    rho_sq, c_sq = t["rho_sq"][..., None], t["c_sq"][..., None]
    d_dist = (d_rho * c_sq - rho_sq * d_c) / c_sq**2

    w, h = x2 - x1, y2 - y1
    gap = np.arctan((a2 - a1) / (b2 - b1)) - np.arctan(w / h)
    dv_dphi = -2.0 * _FOUR_OVER_PI2 * gap
    s = w**2 + h**2
    # phi = arctan(w / h); dw/d(x1, x2) = (-1, 1), dh/d(y1, y2) = (-1, 1)
    dphi = np.stack([-h / s, w / s, h / s, -w / s], axis=-1)
    d_v = dv_dphi[..., None] * dphi
    v, iou = t["v"][..., None], t["iou"][..., None]
    denom = 1.0 - iou + v
    safe = np.where(denom > 0, denom, 1.0)
    # alpha * v = v^2 / (1 - IoU + v)
    d_av = (2.0 * v * d_v * denom - v**2 * (d_v - d_iou)) / safe**2
    d_av = np.where(denom > 0, d_av, 0.0)
    return {"iou": -d_iou, "distance": d_dist, "aspect": d_av}


def mpdiou_grad_terms_array(p, g, w: float, h: float) -> Dict[str, np.ndarray]:
    """Per-term gradients of ``1 - MPDIoU``: ``iou`` and ``corners`` (both d^2 terms)."""
    _require_nondegenerate(p, "predicted")
    t = mpdiou_terms_array(p, g, w, h)
    x1, y1, x2, y2 = _split(p)
    a1, b1, a2, b2 = _split(g)
    norm = t["norm"][..., None]
    d_corner = 2.0 * np.stack([x1 - a1, y1 - b1, x2 - a2, y2 - b2], axis=-1) / norm
    return {"iou": -_iou_grad(p, g), "corners": d_corner}


def loss_grad_array(kind: str, p, g, dims: Optional[ImageDims] = None) -> np.ndarray:
    if kind == "ciou":
        terms = ciou_grad_terms_array(p, g)
    elif kind == "mpdiou":
        if dims is None:
            raise ValueError("mpdiou gradient needs image dims")
        terms = mpdiou_grad_terms_array(p, g, dims.w, dims.h)
    else:
        raise ValueError(f"unknown box loss {kind!r}; expected 'ciou' or 'mpdiou'")
    return sum(terms.values())


def box_loss_array(kind: str, p, g, dims: Optional[ImageDims] = None) -> np.ndarray:
    if kind == "ciou":
        return ciou_loss_array(p, g)
    if kind == "mpdiou":
        if dims is None:
            raise ValueError("mpdiou loss needs image dims")
        _require_nondegenerate(p, "predicted")
        return mpdiou_loss_array(p, g, dims.w, dims.h)
    raise ValueError(f"unknown box loss {kind!r}; expected 'ciou' or 'mpdiou'")


# ---------------------------------------------------------------------------
# scalar API

def iou(a: Box, b: Box) -> float:
    return float(iou_array(a.as_array(), b.as_array()))


def ciou_terms(pred: Box, gt: Box) -> CIoUTerms:
    t = ciou_terms_array(pred.as_array(), gt.as_array())
    return CIoUTerms(**{k: float(v) for k, v in t.items()})


def ciou_loss(pred: Box, gt: Box) -> float:
    return ciou_terms(pred, gt).loss


def mpdiou_terms(a: Box, b: Box, dims: ImageDims) -> MPDIoUTerms:
    t = mpdiou_terms_array(a.as_array(), b.as_array(), dims.w, dims.h)
    return MPDIoUTerms(**{k: float(v) for k, v in t.items()})


def mpdiou(a: Box, b: Box, dims: ImageDims) -> float:
    return mpdiou_terms(a, b, dims).value


def mpdiou_loss(pred: Box, gt: Box, dims: ImageDims) -> float:
    return 1.0 - mpdiou(pred, gt, dims)


def loss_grad(kind: str, pred: Box, gt: Box, dims: Optional[ImageDims] = None) -> np.ndarray:
    """Gradient of the chosen box loss w.r.t. ``pred``'s (x1, y1, x2, y2); gt held fixed."""
    return loss_grad_array(kind, pred.as_array(), gt.as_array(), dims)


def loss_grad_terms(kind: str, pred: Box, gt: Box, dims: Optional[ImageDims] = None) -> Dict[str, np.ndarray]:
    if kind == "ciou":
        return ciou_grad_terms_array(pred.as_array(), gt.as_array())
    if kind == "mpdiou":
        if dims is None:
            raise ValueError("mpdiou gradient needs image dims")
        return mpdiou_grad_terms_array(pred.as_array(), gt.as_array(), dims.w, dims.h)
    raise ValueError(f"unknown box loss {kind!r}; expected 'ciou' or 'mpdiou'")


# ---------------------------------------------------------------------------
# NMS and evaluation

def _ranked(dets: Sequence[Detection]) -> List[int]:
    # confidence desc -> class_id asc -> input order (sorted() is stable)
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id))


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """Class-wise greedy non-maximum suppression."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh {iou_thresh} outside [0, 1]")
    kept: List[Detection] = []
    kept_by_class: Dict[int, List[np.ndarray]] = {}
    for i in _ranked(dets):
        d = dets[i]
        box = d.box.as_array()
        others = kept_by_class.setdefault(d.class_id, [])
        if others and np.max(iou_array(np.stack(others), box)) > iou_thresh:
            continue
        others.append(box)
        kept.append(d)
    return kept


def _as_per_image(seq):
    if len(seq) and isinstance(seq[0], (Detection, LabeledBox, Box)):
        return [seq]
    return list(seq)


def _gt_box(g) -> Box:
    return g.box if isinstance(g, LabeledBox) else g


def match_detections(detections, ground_truths, iou_thresh: float = 0.5):
    """Greedy VOC-style matching for a single class.

    ``detections[i]`` and ``ground_truths[i]`` hold image ``i``'s entries
    (a flat list is treated as one image).  Returns the confidence-sorted
    ``(confidence, is_tp)`` list and the number of ground-truth boxes.
    """
    dets_per_image = _as_per_image(detections)
    gts_per_image = _as_per_image(ground_truths)
    if len(dets_per_image) < len(gts_per_image):
        dets_per_image += [[]] * (len(gts_per_image) - len(dets_per_image))
    gt_arrays = [
        np.array([_gt_box(g).as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
        for gts in gts_per_image
    ]
    n_gt = sum(len(a) for a in gt_arrays)
    flat = [(d, img) for img, ds in enumerate(dets_per_image) for d in ds]
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0].confidence)
    used = [np.zeros(len(a), dtype=bool) for a in gt_arrays]
    out = []
    for i in order:
        d, img = flat[i]
        tp = False
        if img < len(gt_arrays) and len(gt_arrays[img]):
            ious = iou_array(gt_arrays[img], d.box.as_array())
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh and not used[img][j]:
                used[img][j] = True
                tp = True
        out.append((d.confidence, tp))
    return out, n_gt


def average_precision(detections, ground_truths, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP for one class; NaN when there is no ground truth."""
    matched, n_gt = match_detections(detections, ground_truths, iou_thresh)
    if n_gt == 0:
        return float("nan")
    tp = np.cumsum([m[1] for m in matched], dtype=np.int64)
    k = np.arange(1, len(matched) + 1)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = tp / k
    # precision envelope: best precision at any recall >= this one
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    return math.fsum(np.diff(recall) * envelope)


def mean_ap(aps: Mapping[int, float]) -> float:
    """Unweighted mean over classes with defined AP; undefined ones are skipped with a warning."""
    defined = [v for v in aps.values() if not math.isnan(v)]
    missing = [CLASS_NAMES[c] for c, v in aps.items() if math.isnan(v)]
    if missing:
        warnings.warn(f"AP undefined (no ground truth) for {', '.join(missing)}; excluded from mAP")
    if not defined:
        return float("nan")
    return math.fsum(defined) / len(defined)


def per_class_ap(detections, ground_truths, iou_thresh: float = 0.5) -> Dict[int, float]:
    """AP for each of the five classes; inputs are per-image lists of Detection / LabeledBox."""
    dets_per_image = _as_per_image(detections)
    gts_per_image = _as_per_image(ground_truths)
    out = {}
    for c in range(NUM_CLASSES):
        ds = [[d for d in img if d.class_id == c] for img in dets_per_image]
        gs = [[g for g in img if g.class_id == c] for img in gts_per_image]
        out[c] = average_precision(ds, gs, iou_thresh)
    return out


def precision_recall(detections, ground_truths, iou_thresh: float = 0.5):
    """Micro precision/recall over all classes; precision is 0 when nothing was predicted."""
    tp = n_det = n_gt = 0
    dets_per_image = _as_per_image(detections)
    gts_per_image = _as_per_image(ground_truths)
    for c in range(NUM_CLASSES):
        ds = [[d for d in img if d.class_id == c] for img in dets_per_image]
        gs = [[g for g in img if g.class_id == c] for img in gts_per_image]
        matched, n = match_detections(ds, gs, iou_thresh)
        tp += sum(m[1] for m in matched)
        n_det += len(matched)
        n_gt += n
    precision = tp / n_det if n_det else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall
