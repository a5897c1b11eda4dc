from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class BlockParamCount:
    name: str
    count: int


def count_params(module: nn.Module) -> int:
    """Total number of trainable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def param_table(module: nn.Module, depth: int = 1):
    """Per-child trainable counts, children named by their dotted path up to ``depth``."""
    rows = {}
    for name, p in module.named_parameters():
        if p.requires_grad:
            key = ".".join(name.split(".")[:depth])
            rows[key] = rows.get(key, 0) + p.numel()
    return [BlockParamCount(k, v) for k, v in rows.items()]


@torch.no_grad()
def passthrough_bn(module: nn.Module) -> nn.Module:
    """Put every BatchNorm into an exact identity: eval mode, stats 0/1, scale 1, shift 0, eps 0."""
    for m in module.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()
            m.running_mean.zero_()
            m.running_var.fill_(1.0)
            m.weight.fill_(1.0)
            m.bias.zero_()
            m.eps = 0.0
    return module
