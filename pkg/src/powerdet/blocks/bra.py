"""Bi-level routing attention and the BiFormer block built around it."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import check_channels


def region_partition(x: torch.Tensor, S: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, S*S, H*W/(S*S), C], regions in row-major order."""
    b, c, h, w = x.shape
    if S < 1 or h % S or w % S:
        raise ValueError(f"region grid S={S} must divide the {h}x{w} feature map")
    rh, rw = h // S, w // S
    x = x.view(b, c, S, rh, S, rw).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, S * S, rh * rw, c)


def region_merge(t: torch.Tensor, S: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`region_partition`."""
    b, _, _, c = t.shape
    rh, rw = h // S, w // S
    t = t.view(b, S, S, rh, rw, c).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(b, c, h, w)


def routing_topk(region_q: torch.Tensor, region_k: torch.Tensor, topk: int) -> torch.Tensor:
    """Indices of the ``topk`` most affine key regions for every query region.

    ``region_q``/``region_k``: [B, R, C] region descriptors.  Affinity is
    ``region_q @ region_k^T``; equal affinities resolve to the lower index.
    """
    n = region_k.shape[1]
    if not 1 <= topk <= n:
        raise ValueError(f"topk={topk} outside 1..{n}")
    affinity = region_q @ region_k.transpose(-1, -2)
    order = torch.sort(affinity, dim=-1, descending=True, stable=True).indices
    return order[..., :topk]


def gather_kv(k: torch.Tensor, v: torch.Tensor, idx: torch.Tensor):
    """Collect the routed regions' tokens: [B, R, T, C] x [B, R, topk] -> [B, R, topk*T, C]."""
    b, r, t, c = k.shape
    topk = idx.shape[-1]
    index = idx.reshape(b, r * topk, 1, 1).expand(-1, -1, t, c)
    kg = torch.gather(k, 1, index).view(b, r, topk * t, c)
    vg = torch.gather(v, 1, index).view(b, r, topk * t, c)
    return kg, vg


def multihead_attention(q, k, v, heads):
    """Softmax attention over the token axis; q: [..., Tq, C], k/v: [..., Tk, C]."""
    *lead, tq, c = q.shape
    tk = k.shape[-2]
    d = c // heads
    q = q.reshape(*lead, tq, heads, d).transpose(-2, -3)
    k = k.reshape(*lead, tk, heads, d).transpose(-2, -3)
    v = v.reshape(*lead, tk, heads, d).transpose(-2, -3)
    attn = torch.softmax((q * d**-0.5) @ k.transpose(-1, -2), dim=-1)
    out = (attn @ v).transpose(-2, -3).reshape(*lead, tq, c)
    return out, attn


class BiLevelRoutingAttention(nn.Module):
    """Region-to-region routing, then token attention over the gathered regions, plus LCE(V)."""

    def __init__(self, dim, S=2, topk=1, heads=4, lce_kernel=5):
        super().__init__()
        if dim % heads:
            raise ValueError(f"BRA: heads={heads} must divide dim={dim}")
        if not 1 <= topk <= S * S:
            raise ValueError(f"BRA: topk={topk} outside 1..{S * S}")
        self.dim, self.S, self.topk, self.heads = dim, S, topk, heads
        self.qkv = nn.Conv2d(dim, 3 * dim, 1)
        self.lce = nn.Conv2d(dim, dim, lce_kernel, padding=lce_kernel // 2, groups=dim)
        self.wo = nn.Conv2d(dim, dim, 1)

    def route(self, x):
        check_channels(x, self.dim, "BRA")
        b, c, h, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=1)
        qr, kr, vr = (region_partition(t, self.S) for t in (q, k, v))
        with torch.no_grad():
            idx = routing_topk(qr.mean(2), kr.mean(2), self.topk)
        return qr, kr, vr, v, idx

    def forward(self, x, return_attention=False):
        h, w = x.shape[-2:]
        qr, kr, vr, v, idx = self.route(x)
        kg, vg = gather_kv(kr, vr, idx)
        out, attn = multihead_attention(qr, kg, vg, self.heads)
        out = self.wo(region_merge(out, self.S, h, w) + self.lce(v))
        return (out, attn) if return_attention else out


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a [B, C, H, W] map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class BiFormerBlock(nn.Module):
    """Depthwise 3x3 position encoding, BRA and a two-layer MLP, each as a residual branch."""

    def __init__(self, dim, S=2, topk=1, heads=4, mlp_ratio=2, lce_kernel=5):
        super().__init__()
        self.pos = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = BiLevelRoutingAttention(dim, S, topk, heads, lce_kernel)
        self.norm2 = ChannelLayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Conv2d(dim, hidden, 1), nn.GELU(), nn.Conv2d(hidden, dim, 1))

    def forward(self, x):
        x = x + self.pos(x)
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    @torch.no_grad()
    def zero_residuals(self):
        """Zero the last layer of every residual branch, making the block an identity map."""
        for conv in (self.pos, self.attn.wo, self.mlp[2]):
            conv.weight.zero_()
            conv.bias.zero_()
        return self
