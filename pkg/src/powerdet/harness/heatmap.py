"""Activation-magnitude heatmaps of the pooling block output."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..blocks import ACSPPCSPC, SPPCSPC

LAYER_TAGS = {"sppcspc-out": SPPCSPC, "ac-sppcspc-out": ACSPPCSPC}


def heatmap_from_activation(act: torch.Tensor, size: int) -> np.ndarray:
    """``[C, h, w]`` activation -> ``[size, size]`` uint8 map.

    Channel-mean of |act|, bilinear upsampling, min-max scaling; a constant map
    becomes uniform mid-gray.
    """
    m = act.detach().double().abs().mean(0, keepdim=True)[None]
    up = F.interpolate(m, size=(size, size), mode="bilinear", align_corners=False)[0, 0]
    lo, hi = float(up.min()), float(up.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full((size, size), 128, dtype=np.uint8)
    return np.round((up.numpy() - lo) / (hi - lo) * 255).astype(np.uint8)


def layer_activation(model, image: np.ndarray, tag: str) -> torch.Tensor:
    if tag not in LAYER_TAGS:
        raise ValueError(f"unknown layer tag {tag!r}; valid tags: {', '.join(LAYER_TAGS)}")
    block = model.backbone.spp
    if not isinstance(block, LAYER_TAGS[tag]):
        have = next(t for t, cls in LAYER_TAGS.items() if isinstance(block, cls))
        raise ValueError(f"layer tag {tag!r} not present in this model; its pooling block is tagged {have!r}")
    captured = {}
    handle = block.register_forward_hook(lambda mod, inp, out: captured.setdefault("a", out))
    try:
        model.eval()
        with torch.no_grad():
            model(torch.as_tensor(image, dtype=torch.float32)[None])
    finally:
        handle.remove()
    return captured["a"][0]


def write_heatmap(model, image: np.ndarray, tag: str, path) -> np.ndarray:
    hm = heatmap_from_activation(layer_activation(model, image, tag), image.shape[-1])
    Image.fromarray(hm, "L").save(path, format="PNG")
    return hm
