"""Plain-text run configuration.

Grammar, one setting per line::

    # comment
    key = value

Blank lines and ``#`` comments are ignored; keys are case-sensitive and may
appear once.  Booleans accept ``true/false/yes/no/1/0``.  Lists are
comma-separated; anchors are ``w,h`` pairs separated by ``;``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional

from ..data import GenSpec
from ..detector import LossWeights, ModelSpec


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr_init: float = 0.01
    lr_min: float = 0.0001
    batch: int = 8
    momentum: float = 0.937
    weight_decay: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must be <= lr_init")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Cosine decay: ``lr_init`` at epoch 0, ``lr_min`` at the last epoch."""
        if self.epochs == 1:
            return self.lr_init
        t = epoch / (self.epochs - 1)
        return self.lr_min + (self.lr_init - self.lr_min) * 0.5 * (1 + math.cos(math.pi * t))


@dataclass(frozen=True)
class EvalConfig:
    conf_thresh: float = 0.25
    nms_thresh: float = 0.45
    ap_conf_thresh: float = 0.001
    iou_thresh: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gen: GenSpec = field(default_factory=GenSpec)
    data_dir: Optional[str] = None
    train_split: str = "train"
    val_split: str = "val"
    split_ratios: tuple = (8, 1, 1)


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(t) for t in s.split(","))


def _anchors(s):
    pairs = tuple(tuple(float(v) for v in p.split(",")) for p in s.split(";") if p.strip())
    if any(len(p) != 2 for p in pairs):
        raise ValueError(f"anchors must be 'w,h;w,h;...', got {s!r}")
    return pairs


# key -> (section, field, parser)
KEYS = {
    "use_ac_sppcspc": ("model", "use_ac_sppcspc", _bool),
    "use_esan": ("model", "use_esan", _bool),
    "esan_blocks": ("model", "esan_blocks", int),
    "box_loss": ("model", "box_loss", str),
    "width": ("model", "width", float),
    "input_size": ("model", "input_size", int),
    "anchors": ("model", "anchors", _anchors),
    "epochs": ("train", "epochs", int),
    "lr_init": ("train", "lr_init", float),
    "lr_min": ("train", "lr_min", float),
    "batch": ("train", "batch", int),
    "momentum": ("train", "momentum", float),
    "weight_decay": ("train", "weight_decay", float),
    "seed": ("train", "seed", int),
    "box_gain": ("loss", "box", float),
    "obj_gain": ("loss", "obj", float),
    "cls_gain": ("loss", "cls", float),
    "conf_thresh": ("eval", "conf_thresh", float),
    "nms_thresh": ("eval", "nms_thresh", float),
    "ap_conf_thresh": ("eval", "ap_conf_thresh", float),
    "iou_thresh": ("eval", "iou_thresh", float),
    "count": ("gen", "count", int),
    "image_size": ("gen", "size", int),
    "clutter": ("gen", "clutter", float),
    "class_weights": ("gen", "class_weights", _floats),
    "min_objects": ("gen", "min_objects", int),
    "max_objects": ("gen", "max_objects", int),
    "data_dir": (None, "data_dir", str),
    "train_split": (None, "train_split", str),
    "val_split": (None, "val_split", str),
    "split_ratios": (None, "split_ratios", _floats),
}


class ConfigError(ValueError):
    pass


def parse_pairs(lines, source="<config>") -> Dict[str, str]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def build_config(pairs: Dict[str, str], base: RunConfig = RunConfig(), source="<config>") -> RunConfig:
    sections = {f.name: {} for f in fields(RunConfig)}
    top = {}
    for key, value in pairs.items():
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        section, name, parse = KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as e:
            raise ConfigError(f"{source}: field {key!r}: {e}") from None
        if section is None:
            top[name] = parsed
        else:
            sections[section][name] = parsed
    # the generator shares the run seed unless the caller overrides it later
    if "seed" in sections["train"]:
        sections["gen"]["seed"] = sections["train"]["seed"]
    kwargs = dict(top)
    for section in ("model", "train", "loss", "eval", "gen"):
        if sections[section]:
            try:
                kwargs[section] = replace(getattr(base, section), **sections[section])
            except ValueError as e:
                raise ConfigError(f"{source}: {section} settings: {e}") from None
    return replace(base, **kwargs)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) then apply ``key=value`` overrides in order."""
    pairs = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        pairs = parse_pairs(path.read_text().splitlines(), str(path))
    extra = parse_pairs(list(overrides), "--set") if overrides else {}
    pairs.update(extra)
    return build_config(pairs)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=seed), gen=replace(cfg.gen, seed=seed))


def dump_config(cfg: RunConfig) -> str:
    m, t, l, e, g = cfg.model, cfg.train, cfg.loss, cfg.eval, cfg.gen
    lines = [
        f"use_ac_sppcspc = {str(m.use_ac_sppcspc).lower()}",
        f"use_esan = {str(m.use_esan).lower()}",
        f"esan_blocks = {m.esan_blocks}",
        f"box_loss = {m.box_loss}",
        f"width = {m.width}",
        f"input_size = {m.input_size}",
        "anchors = " + ";".join(f"{a[0]:g},{a[1]:g}" for a in m.anchors),
        *(f"{k} = {getattr(t, k)}" for k in ("epochs", "lr_init", "lr_min", "batch", "momentum", "weight_decay", "seed")),
        f"box_gain = {l.box}",
        f"obj_gain = {l.obj}",
        f"cls_gain = {l.cls}",
        *(f"{k} = {getattr(e, k)}" for k in ("conf_thresh", "nms_thresh", "ap_conf_thresh", "iou_thresh")),
        f"count = {g.count}",
        f"image_size = {g.size}",
        f"clutter = {g.clutter}",
        "class_weights = " + ",".join(f"{w:g}" for w in g.class_weights),
        f"min_objects = {g.min_objects}",
        f"max_objects = {g.max_objects}",
        "split_ratios = " + ",".join(f"{r:g}" for r in cfg.split_ratios),
        f"train_split = {cfg.train_split}",
        f"val_split = {cfg.val_split}",
    ]
    if cfg.data_dir is not None:
        lines.append(f"data_dir = {cfg.data_dir}")
    return "\n".join(lines) + "\n"


__all__ = [
    "TrainConfig", "EvalConfig", "RunConfig", "ConfigError", "KEYS", "parse_pairs", "build_config",
    "load_config", "with_seed", "dump_config",
]
