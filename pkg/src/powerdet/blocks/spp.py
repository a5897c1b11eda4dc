"""SPPCSPC (parallel pooling) and AC-SPPCSPC (ACmix + serial pooling)."""
import torch
import torch.nn as nn

from .acmix import ACmix
from .common import CBS, check_channels, maxpool

MIN_SIZE = 5


def _check_size(x, block):
    h, w = x.shape[-2:]
    if min(h, w) < MIN_SIZE:
        raise ValueError(f"{block}: spatial dims {h}x{w} below the minimum {MIN_SIZE}")


class SPPCSPC(nn.Module):
    """Baseline block: three-conv stack, parallel max pools {5, 9, 13}, CSP fusion."""

    def __init__(self, c1, c2, hidden=None, kernels=(5, 9, 13)):
        super().__init__()
        c_ = hidden or c2
        self.c1 = c1
        self.cv1 = CBS(c1, c_, 1)
        self.cv2 = CBS(c1, c_, 1)
        self.cv3 = CBS(c_, c_, 3)
        self.cv4 = CBS(c_, c_, 1)
        self.kernels = tuple(kernels)
        self.cv5 = CBS(4 * c_, c_, 1)
        self.cv6 = CBS(c_, c_, 3)
        self.cv7 = CBS(2 * c_, c2, 1)

    def pooled(self, x):
        """Pre-fusion branches ``[x', pool5(x'), pool9(x'), pool13(x')]``."""
        check_channels(x, self.c1, "SPPCSPC")
        _check_size(x, "SPPCSPC")
        x1 = self.cv4(self.cv3(self.cv1(x)))
        return [x1] + [maxpool(x1, k, 1, k // 2) for k in self.kernels]

    def forward(self, x):
        y1 = self.cv6(self.cv5(torch.cat(self.pooled(x), 1)))
        return self.cv7(torch.cat([y1, self.cv2(x)], 1))


class ACSPPCSPC(nn.Module):
    """Pruned stack (one 1x1 conv), ACmix, then a chain of three stride-1 max-pool-5 taps."""

    def __init__(self, c1, c2, hidden=None, heads=4, kernel_size=3):
        super().__init__()
        c_ = hidden or c2
        self.c1 = c1
        self.cv1 = CBS(c1, c_, 1)
        self.cv2 = CBS(c1, c_, 1)
        self.acmix = ACmix(c_, heads, kernel_size)
        self.cv5 = CBS(4 * c_, c_, 1)
        self.cv6 = CBS(c_, c_, 3)
        self.cv7 = CBS(2 * c_, c2, 1)

    def pooled(self, x):
        """Pre-fusion branches ``[x', p1, p2, p3]`` with ``p_{i+1} = pool5(p_i)``."""
        check_channels(x, self.c1, "AC-SPPCSPC")
        _check_size(x, "AC-SPPCSPC")
        taps = [self.acmix(self.cv1(x))]
        for _ in range(3):
            taps.append(maxpool(taps[-1], 5, 1, 2))
        return taps

    def forward(self, x):
        y1 = self.cv6(self.cv5(torch.cat(self.pooled(x), 1)))
        return self.cv7(torch.cat([y1, self.cv2(x)], 1))
