"""Convolutional building blocks: CBS, max pooling, the MP downsampler and ELAN."""
import torch
import torch.nn as nn
import torch.nn.functional as F


def check_channels(x: torch.Tensor, expected: int, block: str):
    if x.dim() != 4:
        raise ValueError(f"{block}: expected a [B, C, H, W] tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ValueError(f"{block}: expected {expected} input channels, got {x.shape[1]}")


class CBS(nn.Module):
    """Conv -> BatchNorm -> SiLU."""

    def __init__(self, c1, c2, k=1, s=1, p=None, groups=1):
        super().__init__()
        self.c1 = c1
        self.conv = nn.Conv2d(c1, c2, k, s, k // 2 if p is None else p, groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(c2, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU()

    def forward(self, x):
        check_channels(x, self.c1, "CBS")
        return self.act(self.bn(self.conv(x)))


def maxpool(x: torch.Tensor, k: int, stride: int = 1, pad: int = 0) -> torch.Tensor:
    """Sliding-window max; padding never wins because it is treated as -inf."""
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool: kernel {k} and stride {stride} must be >= 1")
    h, w = x.shape[-2:]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool: k={k}, stride={stride}, pad={pad} on {h}x{w} gives empty output")
    if pad > k // 2:
        x = F.pad(x, (pad, pad, pad, pad), value=float("-inf"))
        pad = 0
    return F.max_pool2d(x, k, stride, pad)


class MP(nn.Module):
    """Two-branch downsampler: maxpool + 1x1 conv, and 1x1 conv + strided 3x3 conv.

    Output channels are ``[conv branch | pool branch]``, ``c2 // 2`` each.
    """

    def __init__(self, c1, c2):
        super().__init__()
        if c2 % 2:
            raise ValueError("MP output channels must be even")
        c_ = c2 // 2
        self.c1 = c1
        self.pool_conv = CBS(c1, c_, 1)
        self.conv1 = CBS(c1, c_, 1)
        self.conv2 = CBS(c_, c_, 3, 2)

    def forward(self, x):
        check_channels(x, self.c1, "MP")
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"MP needs even spatial dims, got {h}x{w}")
        a = self.conv2(self.conv1(x))
        b = self.pool_conv(maxpool(x, 2, 2))
        return torch.cat([a, b], 1)


class ELAN(nn.Module):
    """Efficient layer aggregation block.

    Four taps are concatenated and fused by a 1x1 conv: a 1x1 projection
    (depth 0) and the outputs after 1, 2 and 4 stacked convolutions of a
    second projection.  ``deep_kernel`` sets the kernel of the two extra
    convolutions that only the deepest tap passes through.
    """

    def __init__(self, c1, c2, hidden=None, deep_kernel=3):
        super().__init__()
        c_ = hidden or c2 // 2
        self.c1, self.c2, self.hidden = c1, c2, c_
        self.cv1 = CBS(c1, c_, 1)
        self.cv2 = CBS(c1, c_, 1)
        self.m = nn.ModuleList([CBS(c_, c_, 3), CBS(c_, c_, 3), CBS(c_, c_, deep_kernel), CBS(c_, c_, deep_kernel)])
        self.fuse = CBS(4 * c_, c2, 1)

    def deep(self, h):
        return h

    def taps(self, x):
        check_channels(x, self.c1, type(self).__name__)
        h1 = self.m[0](self.cv2(x))
        h2 = self.m[1](h1)
        h4 = self.deep(self.m[3](self.m[2](h2)))
        return [self.cv1(x), h1, h2, h4]

    def forward(self, x):
        return self.fuse(torch.cat(self.taps(x), 1))
