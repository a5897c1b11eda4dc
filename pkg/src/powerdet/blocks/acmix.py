"""ACmix: convolution and self-attention computed from one set of 1x1 projections."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import check_channels


def shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """``out[..., i, j] = x[..., i + dy, j + dx]`` with zeros outside the map."""
    if dy == 0 and dx == 0:
        return x
    h, w = x.shape[-2:]
    p = max(abs(dy), abs(dx))
    padded = F.pad(x, (p, p, p, p))
    return padded[..., p + dy:p + dy + h, p + dx:p + dx + w]


class ACmix(nn.Module):
    """Mixed convolution / self-attention block, ``out = alpha * conv + beta * att``.

    Stage one projects the input into queries, keys and values (three 1x1
    convolutions, ``heads`` groups each).  The convolution path feeds the
    ``3 * heads`` group maps of every channel slot through a fully connected
    layer to get ``k * k`` maps per head, then shifts each map by its kernel
    offset and sums (fixed displacements, nothing learned there).  The
    attention path runs multi-head dot-product attention over all positions
    with the same projections.
    """

    def __init__(self, channels, heads=4, kernel_size=3):
        super().__init__()
        if channels % heads:
            raise ValueError(f"ACmix: heads={heads} must divide channels={channels}")
        if kernel_size % 2 == 0:
            raise ValueError(f"ACmix: kernel_size must be odd, got {kernel_size}")
        self.channels, self.heads, self.k = channels, heads, kernel_size
        self.head_dim = channels // heads
        self.q = nn.Conv2d(channels, channels, 1)
        self.key = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.fc = nn.Parameter(torch.empty(heads * kernel_size**2, 3 * heads))
        nn.init.kaiming_uniform_(self.fc, a=5**0.5)
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.beta = nn.Parameter(torch.tensor(1.0))
        r = kernel_size // 2
        self.offsets = [(i // kernel_size - r, i % kernel_size - r) for i in range(kernel_size**2)]

    def project(self, x):
        check_channels(x, self.channels, "ACmix")
        b, _, h, w = x.shape
        split = (b, self.heads, self.head_dim, h, w)
        return self.q(x).view(split), self.key(x).view(split), self.v(x).view(split)

    def conv_branch(self, q, k, v):
        b, n, d, h, w = q.shape
        f = torch.cat([q, k, v], 1)  # [B, 3N, d, H, W]
        f = torch.einsum("om,bmdhw->bodhw", self.fc, f).view(b, n, self.k**2, d, h, w)
        out = sum(shift(f[:, :, i], dy, dx) for i, (dy, dx) in enumerate(self.offsets))
        return out.reshape(b, n * d, h, w)

    def attention_weights(self, q, k):
        b, n, d, h, w = q.shape
        q = q.reshape(b, n, d, h * w).transpose(-1, -2) * d**-0.5
        return torch.softmax(q @ k.reshape(b, n, d, h * w), dim=-1)  # [B, N, HW, HW]

    def att_branch(self, q, k, v):
        b, n, d, h, w = q.shape
        attn = self.attention_weights(q, k)
        out = attn @ v.reshape(b, n, d, h * w).transpose(-1, -2)  # [B, N, HW, d]
        return out.transpose(-1, -2).reshape(b, n * d, h, w)

    def branches(self, x):
        q, k, v = self.project(x)
        return self.conv_branch(q, k, v), self.att_branch(q, k, v)

    def forward(self, x):
        f_conv, f_att = self.branches(x)
        return self.alpha * f_conv + self.beta * f_att
