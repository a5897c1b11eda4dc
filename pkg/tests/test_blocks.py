import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from powerdet.blocks import (
    ACSPPCSPC,
    CBS,
    ELAN,
    ESAN,
    MP,
    SPPCSPC,
    ACmix,
    BiFormerBlock,
    BiLevelRoutingAttention,
    count_params,
    gather_kv,
    maxpool,
    passthrough_bn,
    read_tensors,
    region_merge,
    region_partition,
    routing_topk,
    state_to_arrays,
    write_tensors,
    load_arrays,
)
from oracles import param_fd_check


def seeded(shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


def dense_attention_plus_lce(bra: BiLevelRoutingAttention, x):
    """Full attention over every position plus LCE(V), written independently of the block."""
    b, c, h, w = x.shape
    q, k, v = bra.qkv(x).chunk(3, dim=1)
    d = c // bra.heads
    out = torch.zeros(b, c, h * w, dtype=x.dtype)
    for head in range(bra.heads):
        sl = slice(head * d, (head + 1) * d)
        qh = q[:, sl].reshape(b, d, h * w)
        kh = k[:, sl].reshape(b, d, h * w)
        vh = v[:, sl].reshape(b, d, h * w)
        logits = torch.einsum("bdi,bdj->bij", qh, kh) / math.sqrt(d)
        weights = torch.exp(logits - logits.amax(-1, keepdim=True))
        weights = weights / weights.sum(-1, keepdim=True)
        out[:, sl] = torch.einsum("bij,bdj->bdi", weights, vh)
    return bra.wo(out.view(b, c, h, w) + bra.lce(v))


class TestCBS:
    def test_zero_input(self):
        m = passthrough_bn(CBS(4, 4, 1))
        with torch.no_grad():
            m.conv.weight.copy_(torch.eye(4).view(4, 4, 1, 1))
        assert torch.equal(m(torch.zeros(1, 4, 5, 5)), torch.zeros(1, 4, 5, 5))

    def test_shape(self):
        assert CBS(3, 16, 3, 1, 1)(torch.zeros(1, 3, 8, 8)).shape == (1, 16, 8, 8)

    def test_averaging_kernel_closed_form(self):
        c = 0.7
        m = passthrough_bn(CBS(1, 1, 3)).double()
        with torch.no_grad():
            m.conv.weight.fill_(1 / 9)
        out = m(torch.full((1, 1, 6, 6), c, dtype=torch.float64))[0, 0]
        silu = lambda t: t / (1 + math.exp(-t))
        # zero padding: a cell sees (rows in map) x (cols in map) of its 3x3 window
        cover = [2, 3, 3, 3, 3, 2]
        expected = torch.tensor([[silu(c * r * q / 9) for q in cover] for r in cover], dtype=torch.float64)
        torch.testing.assert_close(out, expected, rtol=0, atol=1e-15)
        assert torch.allclose(out[1:-1, 1:-1], torch.tensor(silu(c), dtype=torch.float64))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="input channels"):
            CBS(3, 8)(torch.zeros(1, 4, 8, 8))


class TestMaxPool:
    def test_constant(self):
        x = torch.full((1, 2, 7, 7), 3.5)
        assert torch.equal(maxpool(x, 5, 1, 2), x)

    def test_shape(self):
        assert maxpool(seeded((1, 1, 9, 11)), 5, 1, 2).shape == (1, 1, 9, 11)

    def test_cascade(self):
        x = seeded((1, 1, 16, 16), 3)
        assert torch.equal(maxpool(maxpool(x, 5, 1, 2), 5, 1, 2), maxpool(x, 9, 1, 4))
        assert torch.equal(maxpool(maxpool(maxpool(x, 5, 1, 2), 5, 1, 2), 5, 1, 2), maxpool(x, 13, 1, 6))

    def test_padding_never_wins(self):
        x = -torch.ones(1, 1, 3, 3) - seeded((1, 1, 3, 3)).abs()
        assert torch.all(maxpool(x, 13, 1, 6) < 0)

    def test_empty_output(self):
        with pytest.raises(ValueError, match="empty output"):
            maxpool(torch.zeros(1, 1, 3, 3), 5, 1, 0)


class TestMP:
    def test_shape(self):
        assert MP(8, 16)(torch.zeros(1, 8, 8, 8)).shape == (1, 16, 4, 4)

    def test_zero(self):
        m = passthrough_bn(MP(8, 16))
        assert torch.equal(m(torch.zeros(1, 8, 8, 8)), torch.zeros(1, 16, 4, 4))

    def test_branch_isolation(self):
        x = seeded((1, 8, 8, 8))
        m = passthrough_bn(MP(8, 16))
        with torch.no_grad():
            m.conv2.conv.weight.zero_()
        out = m(x)
        assert torch.all(out[:, :8] == 0) and torch.all(out[:, 8:] != 0)
        m = passthrough_bn(MP(8, 16))
        with torch.no_grad():
            m.pool_conv.conv.weight.zero_()
        out = m(x)
        assert torch.all(out[:, 8:] == 0) and torch.all(out[:, :8] != 0)

    def test_odd(self):
        with pytest.raises(ValueError, match="even"):
            MP(8, 16)(torch.zeros(1, 8, 7, 8))


class TestELAN:
    def test_shape(self):
        assert ELAN(64, 48)(torch.zeros(1, 64, 16, 16)).shape == (1, 48, 16, 16)

    def test_zero(self):
        m = passthrough_bn(ELAN(16, 16))
        assert torch.equal(m(torch.zeros(1, 16, 8, 8)), torch.zeros(1, 16, 8, 8))

    def test_param_count(self):
        # c1=8, c2=16, hidden=4; conv weights + BN scale/shift
        cv = 8 * 4 + 2 * 4
        stack = 4 * (4 * 4 * 9 + 2 * 4)
        fuse = 16 * 16 + 2 * 16
        assert count_params(ELAN(8, 16, hidden=4)) == 2 * cv + stack + fuse == 976


class TestACmix:
    def test_shape(self):
        assert ACmix(16, heads=4, kernel_size=3)(seeded((1, 16, 8, 8))).shape == (1, 16, 8, 8)

    def test_beta_zero(self):
        m = ACmix(16, 4)
        x = seeded((2, 16, 8, 8))
        with torch.no_grad():
            m.alpha.fill_(0.8)
            m.beta.zero_()
            f_conv, _ = m.branches(x)
            assert (m(x) - 0.8 * f_conv).abs().max() <= 1e-6

    def test_single_token(self):
        m = ACmix(16, 4)
        x = seeded((1, 16, 1, 1))
        with torch.no_grad():
            m.alpha.zero_()
            m.beta.fill_(1.5)
            torch.testing.assert_close(m(x), 1.5 * m.v(x), rtol=0, atol=1e-6)

    def test_linear_in_mixing_scalars(self):
        m = ACmix(16, 4)
        x = seeded((1, 16, 6, 6), 2)

        def run(a, b):
            with torch.no_grad():
                m.alpha.fill_(a)
                m.beta.fill_(b)
                return m(x)

        a, b = 0.37, -1.25
        assert (run(a, b) - (a * run(1, 0) + b * run(0, 1))).abs().max() <= 1e-5

    def test_attention_rows_sum_to_one(self):
        m = ACmix(16, 4)
        q, k, _ = m.project(seeded((2, 16, 5, 5)))
        with torch.no_grad():
            w = m.attention_weights(q, k)
        assert (w.sum(-1) - 1).abs().max() <= 1e-6

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            ACmix(10, heads=4)

    def test_mixing_scalars_count_two(self):
        m = ACmix(16, 4)
        named = dict(m.named_parameters())
        assert named["alpha"].numel() + named["beta"].numel() == 2
        rest = sum(p.numel() for n, p in named.items() if n not in ("alpha", "beta"))
        assert count_params(m) - rest == 2


class TestRouting:
    def test_partition_roundtrip(self):
        x = seeded((2, 3, 8, 12))
        t = region_partition(x, 4)
        assert t.shape == (2, 16, 6, 3)
        assert torch.equal(region_merge(t, 4, 8, 12), x)
        # region 1 is the second region of the top row
        assert torch.equal(t[0, 1, :, 0], x[0, 0, :2, 3:6].reshape(-1))

    def test_partition_indivisible(self):
        with pytest.raises(ValueError, match="divide"):
            region_partition(torch.zeros(1, 1, 6, 6), 4)

    def test_dense_topk_gathers_everything(self):
        k = seeded((1, 4, 3, 2))
        v = seeded((1, 4, 3, 2), 1)
        idx = routing_topk(seeded((1, 4, 2), 2), seeded((1, 4, 2), 3), 4)
        kg, vg = gather_kv(k, v, idx)
        for r in range(4):
            assert sorted(idx[0, r].tolist()) == [0, 1, 2, 3]
            got = sorted(map(tuple, kg[0, r].tolist()))
            assert got == sorted(map(tuple, k[0].reshape(-1, 2).tolist()))

    def test_diagonal_dominant(self):
        q = torch.eye(4).unsqueeze(0) * 5 + 0.1
        assert routing_topk(q, torch.eye(4).unsqueeze(0), 1)[0, :, 0].tolist() == [0, 1, 2, 3]

    def test_ties_prefer_low_index(self):
        idx = routing_topk(torch.ones(1, 4, 3), torch.ones(1, 4, 3), 2)
        assert idx[0].tolist() == [[0, 1]] * 4

    def test_topk_range(self):
        with pytest.raises(ValueError):
            routing_topk(torch.ones(1, 4, 3), torch.ones(1, 4, 3), 5)


class TestBRA:
    def test_dense_degeneracy(self):
        bra = BiLevelRoutingAttention(16, S=1, topk=1, heads=4).double()
        x = seeded((2, 16, 6, 6)).double()
        with torch.no_grad():
            assert (bra(x) - dense_attention_plus_lce(bra, x)).abs().max() < 1e-5

    def test_constant_values(self):
        bra = BiLevelRoutingAttention(8, S=2, topk=2, heads=2)
        x = torch.full((1, 8, 4, 4), 0.3)
        with torch.no_grad():
            qr, kr, vr, v, idx = bra.route(x)
            kg, vg = gather_kv(kr, vr, idx)
            from powerdet.blocks import multihead_attention

            out, _ = multihead_attention(qr, kg, vg, bra.heads)
        torch.testing.assert_close(out, vr[:, :1, :1].expand_as(out), rtol=0, atol=1e-6)

    def test_shape_and_rows(self):
        bra = BiLevelRoutingAttention(32, S=2, topk=1, heads=4)
        with torch.no_grad():
            out, attn = bra(seeded((1, 32, 8, 8)), return_attention=True)
        assert out.shape == (1, 32, 8, 8)
        assert attn.shape == (1, 4, 4, 16, 16)
        assert (attn.sum(-1) - 1).abs().max() <= 1e-6

    def test_bad_grid(self):
        with pytest.raises(ValueError, match="divide"):
            BiLevelRoutingAttention(8, S=3)(torch.zeros(1, 8, 8, 8))


class TestBiFormer:
    def test_zero_residuals_identity(self):
        blk = BiFormerBlock(32).zero_residuals()
        x = seeded((1, 32, 8, 8))
        with torch.no_grad():
            assert torch.equal(blk(x), x)

    def test_nondegenerate(self):
        x = seeded((1, 32, 8, 8))
        with torch.no_grad():
            assert not torch.allclose(BiFormerBlock(32)(x), x)

    def test_shape(self):
        assert BiFormerBlock(32)(seeded((1, 32, 8, 8))).shape == (1, 32, 8, 8)


class TestSPP:
    def test_shapes(self):
        x = seeded((1, 64, 16, 16))
        assert SPPCSPC(64, 48)(x).shape == (1, 48, 16, 16)
        assert ACSPPCSPC(64, 48)(x).shape == (1, 48, 16, 16)

    def test_constant_pooled_branches(self):
        m = SPPCSPC(8, 8)
        with torch.no_grad():
            # centre-only 3x3 kernel so zero padding cannot make x' vary at the border
            centre = m.cv3.conv.weight[:, :, 1, 1].clone()
            m.cv3.conv.weight.zero_()
            m.cv3.conv.weight[:, :, 1, 1] = centre
            taps = m.pooled(torch.full((1, 8, 13, 13), 0.4))
        assert all(torch.allclose(t, taps[0]) for t in taps[1:])
        assert torch.allclose(taps[0], taps[0][..., :1, :1].expand_as(taps[0]))

    def test_concat_channels(self):
        m = SPPCSPC(16, 16, hidden=6)
        with torch.no_grad():
            assert torch.cat(m.pooled(seeded((1, 16, 13, 13))), 1).shape[1] == 4 * 6

    def test_serial_taps_equal_wide_pools(self):
        m = ACSPPCSPC(16, 16)
        with torch.no_grad():
            x0, p1, p2, p3 = m.pooled(seeded((1, 16, 16, 16)))
        assert torch.equal(p1, maxpool(x0, 5, 1, 2))
        assert torch.equal(p2, maxpool(x0, 9, 1, 4))
        assert torch.equal(p3, maxpool(x0, 13, 1, 6))

    @pytest.mark.parametrize("c", [16, 32, 64])
    def test_fewer_params(self, c):
        assert count_params(ACSPPCSPC(c, c)) < count_params(SPPCSPC(c, c))

    def test_too_small(self):
        with pytest.raises(ValueError, match="minimum"):
            SPPCSPC(4, 4)(torch.zeros(1, 4, 4, 4))


class TestESAN:
    def test_degenerates_to_elan(self):
        m = ESAN(64, 64, S=2)
        m.biformer.zero_residuals()
        x = seeded((1, 64, 16, 16))
        with torch.no_grad():
            assert torch.equal(m(x), m.elan_equivalent()(x))

    def test_same_shape_as_elan(self):
        x = seeded((1, 64, 16, 16))
        assert ESAN(64, 32)(x).shape == ELAN(64, 32)(x).shape

    def test_param_count_additive(self):
        m = ESAN(32, 32)
        assert count_params(m) == count_params(ELAN(32, 32, deep_kernel=1)) + count_params(m.biformer)

    def test_lighter_than_elan(self):
        assert count_params(ESAN(32, 32)) < count_params(ELAN(32, 32))

    def test_grid_divisibility(self):
        with pytest.raises(ValueError, match="divide"):
            ESAN(8, 8, S=3)(torch.zeros(1, 8, 8, 8))


def test_conv_param_count():
    assert count_params(nn.Conv2d(3, 16, 3, bias=True)) == 3 * 16 * 9 + 16 == 448


BLOCKS = {
    "CBS": lambda: (CBS(4, 6, 3), (2, 4, 6, 6)),
    "MP": lambda: (MP(4, 8), (2, 4, 6, 6)),
    "ELAN": lambda: (ELAN(4, 8, hidden=4), (2, 4, 6, 6)),
    "ESAN": lambda: (ESAN(4, 8, hidden=4, heads=2), (2, 4, 6, 6)),
    "SPPCSPC": lambda: (SPPCSPC(4, 4, hidden=4), (2, 4, 6, 6)),
    "AC-SPPCSPC": lambda: (ACSPPCSPC(4, 4, hidden=4, heads=2), (2, 4, 6, 6)),
    "ACmix": lambda: (ACmix(8, heads=2), (2, 8, 5, 5)),
    "BRA": lambda: (BiLevelRoutingAttention(8, S=2, topk=2, heads=2), (2, 8, 6, 6)),
    "BiFormer": lambda: (BiFormerBlock(8, S=2, topk=1, heads=2), (2, 8, 6, 6)),
}


@pytest.mark.parametrize("name", list(BLOCKS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_gradients(name, seed):
    torch.manual_seed(seed)
    block, shape = BLOCKS[name]()
    x = seeded(shape, 100 + seed)
    assert param_fd_check(block, [x], seed=seed) < 1e-3


@pytest.mark.parametrize("name", list(BLOCKS))
def test_shape_and_batch_preserved(name):
    block, shape = BLOCKS[name]()
    out = block(seeded(shape))
    assert out.shape[0] == shape[0]
    if name != "MP":
        assert out.shape[2:] == shape[2:]


def test_forward_deterministic():
    outs = []
    for _ in range(2):
        torch.manual_seed(5)
        m = ESAN(8, 8, heads=2)
        outs.append(m(seeded((1, 8, 8, 8))).detach().numpy().tobytes())
    assert outs[0] == outs[1]


def test_container_roundtrip(tmp_path):
    m = ACSPPCSPC(8, 8, heads=2)
    arrays = state_to_arrays(m)
    write_tensors(tmp_path / "w.bin", arrays, {"tag": "x"})
    back, meta = read_tensors(tmp_path / "w.bin")
    assert meta == {"tag": "x"}
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    m2 = load_arrays(ACSPPCSPC(8, 8, heads=2), back)
    x = seeded((1, 8, 8, 8))
    m.eval(), m2.eval()
    assert torch.equal(m(x), m2(x))


def test_container_layout(tmp_path):
    write_tensors(tmp_path / "t.bin", {"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = (tmp_path / "t.bin").read_bytes()
    expected = (
        b"PDNT" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"{}"
        + (1).to_bytes(4, "little") + (2).to_bytes(2, "little") + b"ab" + bytes([2])
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.0, 2.0], dtype="<f4").tobytes()
    )
    assert raw == expected


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError, match="magic"):
        read_tensors(tmp_path / "bad.bin")
