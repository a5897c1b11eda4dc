"""SGD training loop, per-epoch CSV log and checkpoints."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from ..blocks import load_arrays, read_tensors, state_to_arrays, write_tensors
from ..data import DatasetSample, load_split
from ..detector import Detector, ModelSpec, TargetGrid, assign_targets, build_model, detection_loss
from .config import RunConfig
from .reports import evaluate, write_csv

LOG_COLUMNS = ("epoch", "lr", "box_loss", "obj_loss", "cls_loss", "total_loss", "val_mAP@0.5/%")


def make_optimizer(model: torch.nn.Module, cfg) -> torch.optim.SGD:
    # decay conv/linear weights only; BN affine, biases and mixing scalars are exempt
    decay = [p for p in model.parameters() if p.dim() > 1]
    no_decay = [p for p in model.parameters() if p.dim() <= 1]
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr_init, momentum=cfg.momentum,
    )


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def train_model(cfg: RunConfig, train_set: List[DatasetSample], val_set: List[DatasetSample] = (),
                log_path=None, progress=None) -> tuple:
    """Train a fresh model; returns ``(model, log_rows)``."""
    if not train_set:
        raise ValueError("training set is empty")
    spec, tc = cfg.model, cfg.train
    torch.manual_seed(tc.seed)
    model = build_model(spec)
    opt = make_optimizer(model, tc)
    images = torch.from_numpy(np.stack([s.image for s in train_set]))
    grids = [assign_targets(s.labels, spec) for s in train_set]
    rows = []
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(train_set))
        sums = np.zeros(4)
        for i in range(0, len(order), tc.batch):
            idx = order[i:i + tc.batch]
            raw = model(images[idx])
            losses = detection_loss(raw, TargetGrid.stack([grids[j] for j in idx]), spec, cfg.loss)
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            sums += len(idx) * np.array([t.item() for t in (losses.box_loss, losses.objectness_loss,
                                                            losses.class_loss, losses.total)])
        sums /= len(train_set)
        val_map = None
        if len(val_set):
            val_map = evaluate(model, val_set, spec, cfg.eval)[0].map50
        row = {"epoch": str(epoch), "lr": f"{lr:.8f}", "box_loss": _fmt(sums[0]), "obj_loss": _fmt(sums[1]),
               "cls_loss": _fmt(sums[2]), "total_loss": _fmt(sums[3]), "val_mAP@0.5/%": _fmt(val_map)}
        rows.append(row)
        if progress:
            progress(row)
    if log_path is not None:
        write_csv(log_path, LOG_COLUMNS, rows)
    return model, rows


def save_checkpoint(path, model: Detector, cfg: Optional[RunConfig] = None, extra=None):
    meta = {"model_spec": model.spec.to_dict()}
    if cfg is not None:
        meta["train"] = asdict(cfg.train)
        meta["loss"] = asdict(cfg.loss)
    if extra:
        meta.update(extra)
    write_tensors(path, state_to_arrays(model), meta)


def load_checkpoint(path) -> Detector:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, meta = read_tensors(path)
    if "model_spec" not in meta:
        raise ValueError(f"{path}: checkpoint has no model_spec")
    model = build_model(ModelSpec.from_dict(meta["model_spec"]))
    load_arrays(model, arrays)
    return model.eval()


def train_from_config(cfg: RunConfig, out_dir, progress=None):
    if cfg.data_dir is None:
        raise ValueError("data_dir is not set (config key 'data_dir' or --data-dir)")
    train_set = load_split(cfg.data_dir, cfg.train_split)
    val_set = load_split(cfg.data_dir, cfg.val_split) if cfg.val_split else []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, rows = train_model(cfg, train_set, val_set, out / "train_log.csv", progress)
    save_checkpoint(out / "checkpoint.pdnt", model, cfg)
    return model, rows
