"""Evaluation reports, CSV writing/reading and detection export."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..blocks import count_params
from ..detector import ModelSpec, decode
from ..geometry import CLASS_NAMES, mean_ap, per_class_ap, precision_recall

# AP column order of the published per-class tables
TABLE_CLASS_ORDER = ("bj_mh", "bj_ps", "bj", "jyz_sh", "jyz_sl")
REPORT_COLUMNS = ("config_tag", "P/%", "R/%", "mAP@0.5/%") + tuple(f"AP_{c}/%" for c in TABLE_CLASS_ORDER) + (
    "params", "undefined_classes")
UNDEFINED = "undefined"


@dataclass
class EvalReport:
    precision: float  # percentages
    recall: float
    map50: float
    class_ap: Dict[str, float]
    params: int
    tag: str = ""
    undefined: List[str] = field(default_factory=list)

    def row(self) -> Dict[str, str]:
        r = {"config_tag": self.tag, "P/%": _pct(self.precision), "R/%": _pct(self.recall),
             "mAP@0.5/%": _pct(self.map50)}
        for c in TABLE_CLASS_ORDER:
            r[f"AP_{c}/%"] = _pct(self.class_ap[c])
        r["params"] = str(self.params)
        r["undefined_classes"] = ";".join(self.undefined)
        return r


def _pct(v: float) -> str:
    return UNDEFINED if math.isnan(v) else f"{v:.2f}"


def _unpct(s: str) -> float:
    return float("nan") if s == UNDEFINED else float(s)


@torch.no_grad()
def predict(model, images: torch.Tensor, spec: ModelSpec, conf_thresh, nms_thresh, batch=16):
    model.eval()
    out = []
    for i in range(0, len(images), batch):
        out += decode(model(images[i:i + batch]), spec, conf_thresh, nms_thresh)
    return out


def score(detections, ground_truths, params: int, tag="", conf_thresh=0.25, iou_thresh=0.5) -> EvalReport:
    """Report from per-image detections (collected at a low threshold) and labels.

    AP uses every detection; precision and recall only those at ``conf_thresh`` or above.
    """
    aps = per_class_ap(detections, ground_truths, iou_thresh)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = mean_ap(aps)
    undefined = [CLASS_NAMES[c] for c, v in aps.items() if math.isnan(v)]
    if math.isnan(m):
        m = 0.0
    confident = [[d for d in ds if d.confidence >= conf_thresh] for ds in detections]
    p, r = precision_recall(confident, ground_truths, iou_thresh)
    class_ap = {CLASS_NAMES[c]: 100.0 * v for c, v in aps.items()}
    return EvalReport(100.0 * p, 100.0 * r, 100.0 * m, class_ap, params, tag, undefined)


def evaluate(model, samples, spec: ModelSpec, eval_cfg, tag="") -> tuple:
    """Returns ``(EvalReport, per-image detections at the P/R threshold)``."""
    images = torch.from_numpy(np.stack([s.image for s in samples]))
    dets = predict(model, images, spec, min(eval_cfg.ap_conf_thresh, eval_cfg.conf_thresh), eval_cfg.nms_thresh)
    gts = [s.labels for s in samples]
    rep = score(dets, gts, count_params(model), tag, eval_cfg.conf_thresh, eval_cfg.iou_thresh)
    confident = [[d for d in ds if d.confidence >= eval_cfg.conf_thresh] for ds in dets]
    return rep, confident


def report_header(eval_cfg) -> str:
    return (f"# AP: all-point interpolated, IoU>={eval_cfg.iou_thresh}; "
            f"P/R at confidence>={eval_cfg.conf_thresh}; NMS IoU {eval_cfg.nms_thresh}\n")


def write_csv(path, columns: Sequence[str], rows: Sequence[Dict[str, str]], header_lines: str = ""):
    buf = io.StringIO()
    buf.write(header_lines)
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def read_csv(path) -> List[Dict[str, str]]:
    """Rows of a harness CSV; leading ``#`` comment lines are skipped."""
    with open(path, newline="") as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_report(path, reports: Sequence[EvalReport], eval_cfg, extra_columns=(), extra=None):
    rows = []
    for i, rep in enumerate(reports):
        r = rep.row()
        if extra:
            r = {**extra[i], **r}
        rows.append(r)
    write_csv(path, tuple(extra_columns) + REPORT_COLUMNS, rows, report_header(eval_cfg))


def report_from_row(row: Dict[str, str]) -> EvalReport:
    return EvalReport(
        _unpct(row["P/%"]), _unpct(row["R/%"]), _unpct(row["mAP@0.5/%"]),
        {c: _unpct(row[f"AP_{c}/%"]) for c in TABLE_CLASS_ORDER}, int(row["params"]), row["config_tag"],
        [c for c in row["undefined_classes"].split(";") if c],
    )


def write_detections_jsonl(path, image_ids: Sequence[str], detections):
    with open(path, "w") as f:
        for image_id, ds in zip(image_ids, detections):
            for d in ds:
                rec = {"image_id": image_id, "class": CLASS_NAMES[d.class_id],
                       "x1": round(d.box.x1, 4), "y1": round(d.box.y1, 4),
                       "x2": round(d.box.x2, 4), "y2": round(d.box.y2, 4),
                       "confidence": round(d.confidence, 6)}
                f.write(json.dumps(rec) + "\n")
