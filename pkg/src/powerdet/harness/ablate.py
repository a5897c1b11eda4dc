"""The eight-row ablation grid over (AC-SPPCSPC, MPDIoU, BiFormer)."""
from __future__ import annotations

import traceback
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

from ..blocks import count_params
from ..data import load_split
from ..detector import build_model
from .config import RunConfig
from .reports import REPORT_COLUMNS, EvalReport, evaluate, report_header, write_csv
from .train import save_checkpoint, train_model

# group -> (AC-SPPCSPC, MPDIoU, BiFormer), in the published row order
GROUPS = {
    "A": (False, False, False),
    "B": (True, False, False),
    "C": (False, True, False),
    "D": (False, False, True),
    "E": (True, True, False),
    "F": (True, False, True),
    "G": (False, True, True),
    "H": (True, True, True),
}
FLAG_COLUMNS = ("group", "AC-SPPCSPC", "MPDIoU", "Biformer", "status")


@dataclass
class AblationRow:
    group: str
    flags: tuple
    report: Optional[EvalReport]
    params: int
    error: str = ""

    def row(self):
        r = {"group": self.group, "status": "ok" if self.report else f"failed: {self.error}"}
        for name, on in zip(FLAG_COLUMNS[1:4], self.flags):
            r[name] = "yes" if on else "no"
        if self.report:
            r.update(self.report.row())
        else:
            r.update({c: "" for c in REPORT_COLUMNS})
            r["config_tag"] = self.group
            r["params"] = str(self.params)
        return r


def row_config(cfg: RunConfig, group: str) -> RunConfig:
    ac, mpd, bi = GROUPS[group]
    return replace(cfg, model=replace(cfg.model, use_ac_sppcspc=ac, use_esan=bi,
                                      box_loss="mpdiou" if mpd else "ciou"))


def run_ablation(cfg: RunConfig, out_dir, groups=tuple(GROUPS), progress=None) -> List[AblationRow]:
    if cfg.data_dir is None:
        raise ValueError("data_dir is not set (config key 'data_dir' or --data-dir)")
    train_set = load_split(cfg.data_dir, cfg.train_split)
    val_set = load_split(cfg.data_dir, cfg.val_split) if cfg.val_split else []
    test_set = load_split(cfg.data_dir, "test")
    out = Path(out_dir)
    rows = []
    for g in groups:
        rc = row_config(cfg, g)
        params = count_params(build_model(rc.model))
        row_dir = out / "rows" / g
        row_dir.mkdir(parents=True, exist_ok=True)
        try:
            model, _ = train_model(rc, train_set, val_set, row_dir / "train_log.csv")
            save_checkpoint(row_dir / "checkpoint.pdnt", model, rc, {"group": g})
            report = evaluate(model, test_set, rc.model, rc.eval, tag=g)[0]
            rows.append(AblationRow(g, GROUPS[g], report, params))
        except Exception as e:  # keep going; the row records the failure
            (row_dir / "error.txt").write_text(traceback.format_exc())
            rows.append(AblationRow(g, GROUPS[g], None, params, f"{type(e).__name__}: {e}"))
        if progress:
            progress(rows[-1])
    write_csv(out / "ablation.csv", FLAG_COLUMNS + REPORT_COLUMNS, [r.row() for r in rows], report_header(cfg.eval))
    (out / "ablation.txt").write_text(format_table(rows))
    return rows


def format_table(rows: List[AblationRow]) -> str:
    head = ["Group", "AC-SPPCSPC", "MPDIoU", "Biformer", "P/%", "R/%", "mAP@0.5/%", "Params"]
    body = []
    for r in rows:
        marks = ["√" if f else "" for f in r.flags]
        if r.report:
            nums = [f"{r.report.precision:.1f}", f"{r.report.recall:.1f}", f"{r.report.map50:.1f}"]
        else:
            nums = ["failed", "", ""]
        body.append([r.group, *marks, *nums, str(r.params)])
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]) + "\n"
