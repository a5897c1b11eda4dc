"""Desk-scale single-level YOLO-style detector with the three variant switches."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..blocks import ACSPPCSPC, CBS, ELAN, ESAN, MP, SPPCSPC
from ..geometry import NUM_CLASSES

STRIDE = 8
BOX_LOSSES = ("ciou", "mpdiou")
# (w, h) in pixels at the 64 px input: a round dial and both insulator orientations
DEFAULT_ANCHORS = ((16.0, 16.0), (11.0, 26.0), (26.0, 11.0))


@dataclass(frozen=True)
class ModelSpec:
    use_ac_sppcspc: bool = False
    use_esan: bool = False
    esan_blocks: int = 2  # neck aggregations swapped for ESAN when use_esan, counted top-down first
    box_loss: str = "ciou"
    width: float = 1.0
    input_size: int = 64
    anchors: Tuple[Tuple[float, float], ...] = DEFAULT_ANCHORS
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.box_loss not in BOX_LOSSES:
            raise ValueError(f"box_loss must be one of {BOX_LOSSES}, got {self.box_loss!r}")
        if self.input_size % STRIDE or self.input_size < 5 * STRIDE:
            raise ValueError(f"input_size {self.input_size} must be a multiple of {STRIDE} and >= {5 * STRIDE}")
        if (self.input_size // STRIDE) % 2:
            raise ValueError(f"input_size {self.input_size} must give an even {STRIDE}-stride grid")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        if not 0 <= self.esan_blocks <= 2:
            raise ValueError(f"esan_blocks must be 0, 1 or 2, got {self.esan_blocks}")
        if self.width <= 0:
            raise ValueError("width must be positive")
        if not self.anchors or any(len(a) != 2 or min(a) <= 0 for a in self.anchors):
            raise ValueError("anchors must be a non-empty list of positive (w, h) pairs")
        object.__setattr__(self, "anchors", tuple(tuple(float(v) for v in a) for a in self.anchors))

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def grid(self) -> int:
        return self.input_size // STRIDE

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    def channels(self):
        return tuple(max(16, int(round(c * self.width / 16)) * 16) for c in (32, 64, 128, 256))

    def to_dict(self):
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "anchors" in d:
            d["anchors"] = tuple(tuple(a) for a in d["anchors"])
        return cls(**d)


class Backbone(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        c0, c1, c2, c3 = spec.channels()
        self.stem = nn.Sequential(CBS(3, c0, 3), CBS(c0, c1, 3, 2))
        self.elan1 = ELAN(c1, c1)
        self.mp1 = MP(c1, c2)
        self.elan2 = ELAN(c2, c2)
        self.mp2 = MP(c2, c3)
        spp = ACSPPCSPC if spec.use_ac_sppcspc else SPPCSPC
        self.spp = spp(c3, c3, hidden=c3 // 2)

    def forward(self, x):
        skip = self.elan2(self.mp1(self.elan1(self.stem(x))))
        return skip, self.spp(self.mp2(skip))


class Neck(nn.Module):
    """Top-down then bottom-up pass between the stride-4 skip and the stride-8 top."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        _, _, c2, c3 = spec.channels()
        n = spec.esan_blocks if spec.use_esan else 0
        self.lat_top = CBS(c3, c2, 1)
        self.lat_skip = CBS(c2, c2, 1)
        self.agg_up = (ESAN if n >= 1 else ELAN)(2 * c2, c2)
        self.down = MP(c2, c2)
        self.agg_down = (ESAN if n >= 2 else ELAN)(c2 + c3, c3)

    def forward(self, skip, top):
        up = F.interpolate(self.lat_top(top), scale_factor=2.0, mode="nearest")
        p = self.agg_up(torch.cat([up, self.lat_skip(skip)], 1))
        return self.agg_down(torch.cat([self.down(p), top], 1))


class Detector(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.backbone = Backbone(spec)
        self.neck = Neck(spec)
        self.head = nn.Conv2d(spec.channels()[3], spec.num_anchors * spec.outputs_per_anchor, 1)
        self._init_head_bias()

    @torch.no_grad()
    def _init_head_bias(self):
        # priors: ~2 objects per image spread over all cells, uniform classes
        s = self.spec
        b = self.head.bias.view(s.num_anchors, s.outputs_per_anchor)
        b[:, 4] = math.log(2.0 / (s.grid * s.grid * s.num_anchors))
        b[:, 5:] = math.log(0.6 / (s.num_classes - 0.99))

    def forward(self, x):
        n = self.spec.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (n, n):
            raise ValueError(f"Detector expects [B, 3, {n}, {n}] input, got {tuple(x.shape)}")
        return self.head(self.neck(*self.backbone(x)))


def build_model(spec: ModelSpec) -> Detector:
    return Detector(spec)
