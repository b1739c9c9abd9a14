"""Blocks: patch embeddings, attention kernels, FFN, residual wiring."""

import numpy as np
import pytest

from matchformer import tensor as T
from matchformer.blocks import (Attention, AttentionBlock, MixFFN, PosPatchEmbed,
                                StdPatchEmbed, apply_checkpoint, load_checkpoint,
                                map_to_seq, save_checkpoint, seq_to_map,
                                sinusoidal_position_code)
from matchformer.tensor import Tensor


def rng_pair(seed):
    return np.random.default_rng(seed), np.random.default_rng(seed)


def clone_weights(src, dst):
    for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        b.data = a.data.copy()


class TestPosPatchEmbed:
    def test_zero_input_zero_biases_gives_zero(self):
        pe = PosPatchEmbed(np.random.default_rng(0), 1, 8, 7, 4, 3)
        pe.proj.bias.data[:] = 0.0
        pe.gate.bias.data[:] = 0.0
        out = pe(Tensor(np.zeros((1, 1, 32, 32))))
        assert np.abs(out.data).max() == 0.0

    @pytest.mark.parametrize("stride,expect", [(4, 16), (2, 32)])
    def test_stage1_output_extent(self, stride, expect):
        pe = PosPatchEmbed(np.random.default_rng(1), 1, 128, 7, stride, 3)
        out = pe(Tensor(np.random.default_rng(2).uniform(size=(1, 1, 64, 64))))
        assert out.shape == (1, 128, expect, expect)

    def test_saturated_gate_reduces_to_plain_conv(self):
        rng = np.random.default_rng(3)
        pe = PosPatchEmbed(rng, 1, 6, 7, 4, 3)
        pe.gate.weight.data[:] = 0.0
        pe.gate.bias.data[:] = 50.0  # sigmoid(50) == 1 to double precision
        x = Tensor(rng.uniform(size=(1, 1, 32, 32)))
        plain = T.conv2d(x, pe.proj.weight, pe.proj.bias, stride=4, padding=3)
        assert np.abs(pe(x).data - plain.data).max() < 1e-15

    def test_indivisible_extent_rejected(self):
        pe = PosPatchEmbed(np.random.default_rng(4), 1, 8, 7, 4, 3)
        with pytest.raises(T.ShapeError):
            pe(Tensor(np.zeros((1, 1, 30, 32))))


class TestStdPatchEmbed:
    def test_whole_image_patch_gives_single_token(self):
        pe = StdPatchEmbed(np.random.default_rng(5), 1, 16, 8)
        out = pe(Tensor(np.random.default_rng(6).uniform(size=(1, 1, 8, 8))))
        assert out.shape == (1, 16, 1, 1)

    def test_token_count(self):
        pe = StdPatchEmbed(np.random.default_rng(7), 1, 16, 4)
        out = pe(Tensor(np.zeros((1, 1, 64, 64))))
        assert out.shape[2] * out.shape[3] == 64 * 64 // 16

    def test_position_code_origin_values(self):
        code = sinusoidal_position_code(4, 4, 16)
        origin = code[0]
        assert np.array_equal(origin[0::2], np.zeros(8))  # sin(0)
        assert np.array_equal(origin[1::2], np.ones(8))   # cos(0)


class TestFullAttention:
    def test_single_kv_token_returns_projected_v(self):
        rng = np.random.default_rng(8)
        attn = Attention(rng, "full", 16, 4)
        q_src = Tensor(rng.normal(size=(1, 6, 16)))
        kv = Tensor(rng.normal(size=(1, 1, 16)))
        out = attn(q_src, kv, (1, 1)).data
        v_row = (kv.data @ attn.v.weight.data + attn.v.bias.data)
        expect = v_row @ attn.out.weight.data + attn.out.bias.data
        assert np.abs(out - expect).max() < 1e-12

    def test_matches_bruteforce_softmax_oracle(self):
        rng = np.random.default_rng(9)
        attn = Attention(rng, "full", 8, 2)
        q_src = Tensor(rng.normal(size=(1, 5, 8)))
        kv = Tensor(rng.normal(size=(1, 7, 8)))
        got = attn(q_src, kv, (7, 1)).data
        q = (q_src.data @ attn.q.weight.data + attn.q.bias.data).reshape(1, 5, 2, 4)
        k = (kv.data @ attn.k.weight.data + attn.k.bias.data).reshape(1, 7, 2, 4)
        v = (kv.data @ attn.v.weight.data + attn.v.bias.data).reshape(1, 7, 2, 4)
        out = np.zeros((1, 5, 2, 4))
        for h in range(2):
            for i in range(5):
                logits = np.array([q[0, i, h] @ k[0, j, h] / 2.0 for j in range(7)])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                out[0, i, h] = sum(w[j] * v[0, j, h] for j in range(7))
        expect = out.reshape(1, 5, 8) @ attn.out.weight.data + attn.out.bias.data
        assert np.abs(got - expect).max() < 1e-12

    def test_kv_permutation_invariance(self):
        rng = np.random.default_rng(10)
        attn = Attention(rng, "full", 16, 4)
        q_src = Tensor(rng.normal(size=(1, 6, 16)))
        kv = Tensor(rng.normal(size=(1, 12, 16)))
        perm = rng.permutation(12)
        a = attn(q_src, kv, (3, 4)).data
        b = attn(q_src, Tensor(kv.data[:, perm]), (3, 4)).data
        assert np.abs(a - b).max() < 1e-10

    def test_query_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        attn = Attention(rng, "full", 16, 4)
        q_src = Tensor(rng.normal(size=(1, 6, 16)))
        kv = Tensor(rng.normal(size=(1, 9, 16)))
        perm = rng.permutation(6)
        a = attn(Tensor(q_src.data[:, perm]), kv, (3, 3)).data
        b = attn(q_src, kv, (3, 3)).data[:, perm]
        assert np.abs(a - b).max() < 1e-12


class TestLinearAttention:
    def test_single_token_collapses_to_v(self):
        rng = np.random.default_rng(12)
        attn = Attention(rng, "la", 16, 4)
        x = Tensor(rng.normal(size=(1, 1, 16)))
        out = attn(x, x, (1, 1)).data
        v_row = x.data @ attn.v.weight.data + attn.v.bias.data
        expect = v_row @ attn.out.weight.data + attn.out.bias.data
        assert np.abs(out - expect).max() < 1e-12

    def test_kv_permutation_invariance(self):
        rng = np.random.default_rng(13)
        attn = Attention(rng, "la", 16, 8)
        q_src = Tensor(rng.normal(size=(1, 5, 16)))
        kv = Tensor(rng.normal(size=(1, 16, 16)))
        perm = rng.permutation(16)
        a = attn(q_src, kv, (4, 4)).data
        b = attn(q_src, Tensor(kv.data[:, perm]), (4, 4)).data
        assert np.abs(a - b).max() < 1e-12

    def test_agrees_with_unfactorized_oracle_n16(self):
        rng = np.random.default_rng(14)
        attn = Attention(rng, "la", 32, 4)
        x = Tensor(rng.normal(size=(1, 16, 32)))
        got = attn(x, x, (4, 4)).data
        q = (x.data @ attn.q.weight.data + attn.q.bias.data).reshape(1, 16, 4, 8).transpose(0, 2, 1, 3)
        k = (x.data @ attn.k.weight.data + attn.k.bias.data).reshape(1, 16, 4, 8).transpose(0, 2, 1, 3)
        v = (x.data @ attn.v.weight.data + attn.v.bias.data).reshape(1, 16, 4, 8).transpose(0, 2, 1, 3)

        def sm(m, ax):
            e = np.exp(m - m.max(axis=ax, keepdims=True))
            return e / e.sum(axis=ax, keepdims=True)

        explicit = sm(q, -1) @ sm(k, -2).transpose(0, 1, 3, 2)  # N x N materialized
        ref = (explicit @ v).transpose(0, 2, 1, 3).reshape(1, 16, 32)
        ref = ref @ attn.out.weight.data + attn.out.bias.data
        assert np.abs(got - ref).max() < 1e-12


class TestSpatialEfficientAttention:
    def test_r1_equals_full_bit_exact(self):
        full = Attention(np.random.default_rng(15), "full", 32, 4)
        sea = Attention(np.random.default_rng(16), "sea", 32, 4, reduction=1)
        clone_weights(full, sea)
        x = Tensor(np.random.default_rng(17).normal(size=(2, 16, 32)))
        assert np.array_equal(full(x, x, (4, 4)).data, sea(x, x, (4, 4)).data)

    def test_r4_reduces_16x16_to_16_tokens(self):
        rng = np.random.default_rng(18)
        attn = Attention(rng, "sea", 16, 1, reduction=4)
        kv = Tensor(rng.normal(size=(1, 256, 16)))
        reduced = attn._reduce(kv, (16, 16))
        assert reduced.shape == (1, 16, 16)

    def test_r2_matches_straightline_reimplementation(self):
        rng = np.random.default_rng(19)
        attn = Attention(rng, "sea", 8, 2, reduction=2)
        q_src = Tensor(rng.normal(size=(1, 16, 8)))
        kv = Tensor(rng.normal(size=(1, 16, 8)))
        got = attn(q_src, kv, (4, 4)).data

        # independent reduce-then-attend, written straight-line
        kv_map = kv.data.reshape(1, 4, 4, 8)
        blocks = np.zeros((1, 4, 2 * 2 * 8))
        for bi, (r0, c0) in enumerate([(0, 0), (0, 2), (2, 0), (2, 2)]):
            blocks[0, bi] = kv_map[0, r0:r0 + 2, c0:c0 + 2].reshape(-1)
        red = blocks @ attn.sr.weight.data + attn.sr.bias.data
        mu = red.mean(-1, keepdims=True)
        var = ((red - mu) ** 2).mean(-1, keepdims=True)
        red = (red - mu) / np.sqrt(var + 1e-6)
        red = red * attn.sr_norm.gain.data + attn.sr_norm.offset.data
        q = (q_src.data @ attn.q.weight.data + attn.q.bias.data).reshape(1, 16, 2, 4).transpose(0, 2, 1, 3)
        k = (red @ attn.k.weight.data + attn.k.bias.data).reshape(1, 4, 2, 4).transpose(0, 2, 1, 3)
        v = (red @ attn.v.weight.data + attn.v.bias.data).reshape(1, 4, 2, 4).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / 2.0
        e = np.exp(scores - scores.max(-1, keepdims=True))
        y = (e / e.sum(-1, keepdims=True)) @ v
        ref = y.transpose(0, 2, 1, 3).reshape(1, 16, 8) @ attn.out.weight.data + attn.out.bias.data
        assert np.abs(got - ref).max() < 1e-12

    def test_indivisible_reduction_rejected(self):
        attn = Attention(np.random.default_rng(20), "sea", 8, 2, reduction=4)
        with pytest.raises(T.ShapeError):
            attn(Tensor(np.zeros((1, 6, 8))), Tensor(np.zeros((1, 6, 8))), (2, 3))


class TestMixFFN:
    def test_zero_weights_zero_output(self):
        ffn = MixFFN(np.random.default_rng(21), 8, 4)
        for _, p in ffn.named_parameters():
            p.data[:] = 0.0
        out = ffn(Tensor(np.random.default_rng(22).normal(size=(1, 9, 8))), (3, 3))
        assert np.abs(out.data).max() == 0.0

    def test_hidden_width_is_expansion_times_dim(self):
        ffn = MixFFN(np.random.default_rng(23), 128, 4)
        assert ffn.fc1.weight.shape == (128, 512)

    def test_gradient_through_block(self):
        rng = np.random.default_rng(24)
        block = AttentionBlock(rng, dim=8, heads=2, kind="la")
        w = Tensor(rng.normal(size=(1, 4, 8)))
        rep = T.fd_check(lambda x: T.reduce_sum(T.mul(block.forward_single(x, (2, 2)), w)),
                         Tensor(rng.normal(size=(1, 4, 8))), tol=1e-3)
        assert rep.passed, rep.max_rel_err


class TestAttentionBlock:
    def make(self, seed, kind="full"):
        return AttentionBlock(np.random.default_rng(seed), dim=16, heads=4, kind=kind)

    def test_self_mode_ignores_partner(self):
        rng = np.random.default_rng(25)
        block = self.make(26)
        xa = Tensor(rng.normal(size=(1, 9, 16)))
        xb = Tensor(rng.normal(size=(1, 9, 16)))
        ya1, _ = block.forward_pair(xa, xb, (3, 3), cross=False)
        ya2, _ = block.forward_pair(xa, Tensor(np.zeros((1, 9, 16))), (3, 3), cross=False)
        assert np.array_equal(ya1.data, ya2.data)

    def test_cross_with_identical_streams_equals_self(self):
        rng = np.random.default_rng(27)
        block = self.make(28)
        x = Tensor(rng.normal(size=(1, 9, 16)))
        ya, yb = block.forward_pair(x, x, (3, 3), cross=True)
        ys = block.forward_single(x, (3, 3))
        assert np.array_equal(ya.data, ys.data) and np.array_equal(yb.data, ys.data)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(29)
        block = self.make(30)
        xa = Tensor(rng.normal(size=(1, 9, 16)))
        xb = Tensor(rng.normal(size=(1, 9, 16)))
        ya, yb = block.forward_pair(xa, xb, (3, 3), cross=True)
        yb2, ya2 = block.forward_pair(xb, xa, (3, 3), cross=True)
        assert np.array_equal(ya.data, ya2.data) and np.array_equal(yb.data, yb2.data)

    def test_output_shape_preserved(self):
        rng = np.random.default_rng(31)
        for kind, red in (("full", 1), ("la", 1), ("sea", 2)):
            block = AttentionBlock(np.random.default_rng(32), 16, 4, kind, red)
            x = Tensor(rng.normal(size=(1, 16, 16)))
            ya, yb = block.forward_pair(x, Tensor(x.data + 1), (4, 4), cross=True)
            assert ya.shape == x.shape and yb.shape == x.shape

    def test_all_parameters_receive_gradient(self):
        rng = np.random.default_rng(33)
        block = AttentionBlock(np.random.default_rng(34), 8, 2, "sea", 2)
        xa = Tensor(rng.normal(size=(1, 16, 8)))
        xb = Tensor(rng.normal(size=(1, 16, 8)))
        ya, yb = block.forward_pair(xa, xb, (4, 4), cross=True)
        T.backward(T.reduce_sum(T.mul(T.add(ya, yb), T.add(ya, yb))))
        dead = [n for n, p in block.named_parameters()
                if p.grad is None or np.abs(p.grad).max() == 0.0]
        assert dead == []


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        block = AttentionBlock(np.random.default_rng(35), 8, 2, "sea", 2)
        path = tmp_path / "ckpt.txt"
        save_checkpoint(path, block.named_parameters())
        other = AttentionBlock(np.random.default_rng(99), 8, 2, "sea", 2)
        apply_checkpoint(other, load_checkpoint(path))
        for (_, a), (_, b) in zip(block.named_parameters(), other.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_name_mismatch_rejected(self, tmp_path):
        block = AttentionBlock(np.random.default_rng(36), 8, 2, "full")
        path = tmp_path / "ckpt.txt"
        save_checkpoint(path, block.named_parameters())
        other = AttentionBlock(np.random.default_rng(37), 8, 2, "sea", 2)
        with pytest.raises(ValueError):
            apply_checkpoint(other, load_checkpoint(path))

    def test_seq_map_roundtrip(self):
        rng = np.random.default_rng(38)
        x = Tensor(rng.normal(size=(2, 4, 6, 5)))
        assert np.array_equal(seq_to_map(map_to_seq(x), 6, 5).data, x.data)
