"""Building blocks of the matching encoder.

Contains the gated positional patch embedding, the standard patch embedding
baseline (sinusoidal codes), the three attention kernels (full,
linear-factorized, spatially reduced) wired for self or cross attention, and
the conv-augmented feed-forward unit.  Blocks share weights across the two
image streams and are pure functions of (weights, inputs).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Parameter plumbing
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container: children discovered by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(value, Tensor):
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two deviations."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int):
        self.weight = _param(trunc_normal(rng, (d_in, d_out)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding: int = 0, groups: int = 1):
        fan_out = k * k * c_out // groups
        self.weight = _param(rng.normal(0.0, math.sqrt(2.0 / fan_out),
                                        size=(c_out, c_in // groups, k, k)))
        self.bias = _param(np.zeros(c_out))
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = _param(np.ones(dim))
        self.offset = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.offset, eps=self.eps)


# ---------------------------------------------------------------------------
# Sequence/map layout helpers
# ---------------------------------------------------------------------------


def map_to_seq(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C]"""
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def seq_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """[B, H*W, C] -> [B, C, H, W]"""
    b, n, c = x.shape
    if n != h * w:
        raise T.ShapeError(f"sequence length {n} does not match {h}x{w}")
    return T.transpose(T.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Patch embeddings
# ---------------------------------------------------------------------------


class PosPatchEmbed(Module):
    """Overlapping strided convolution gated by sigmoid(depthwise conv).

    The depthwise 3x3 gate encodes position implicitly through its zero
    padding; the gate bias starts at 0 so the gate opens at 0.5.
    """

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int, padding: int):
        self.proj = Conv2d(rng, c_in, c_out, k, stride=stride, padding=padding)
        self.gate = Conv2d(rng, c_out, c_out, 3, stride=1, padding=1, groups=c_out)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise T.ShapeError(f"input extents {x.shape[2:]} not divisible by stride {self.stride}")
        c = self.proj(x)
        return T.mul(c, T.sigmoid(self.gate(c)))


def sinusoidal_position_code(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine code, x in the first half of channels, y in the
    second; returns [h*w, dim]."""
    if dim % 4:
        raise T.ShapeError("sinusoidal code needs dim divisible by 4")
    half = dim // 2

    def axis_code(n, positions):
        freq = np.exp(-math.log(10000.0) * np.arange(half // 2) * 2.0 / half)
        ang = positions[:, None] * freq[None, :]
        code = np.zeros((len(positions), half))
        code[:, 0::2] = np.sin(ang)
        code[:, 1::2] = np.cos(ang)
        return code

    ys, xs = np.mgrid[0:h, 0:w]
    return np.concatenate([axis_code(w, xs.reshape(-1).astype(float)),
                           axis_code(h, ys.reshape(-1).astype(float))], axis=1)


class StdPatchEmbed(Module):
    """Non-overlapping PxP patches, linear projection, additive fixed code."""

    def __init__(self, rng, c_in: int, c_out: int, patch: int):
        self.proj = Linear(rng, c_in * patch * patch, c_out)
        self.patch = patch
        self.c_out = c_out
        self.stride = patch
        self._codes: dict[tuple, np.ndarray] = {}

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise T.ShapeError(f"input extents {(h, w)} not divisible by patch {p}")
        ho, wo = h // p, w // p
        tokens = T.reshape(x, (b, c, ho, p, wo, p))
        tokens = T.transpose(tokens, (0, 2, 4, 1, 3, 5))
        tokens = T.reshape(tokens, (b, ho * wo, c * p * p))
        y = self.proj(tokens)
        key = (ho, wo)
        if key not in self._codes:
            self._codes[key] = sinusoidal_position_code(ho, wo, self.c_out)
        y = T.add(y, Tensor(self._codes[key]))
        return seq_to_map(y, ho, wo)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

ATTENTION_KINDS = ("full", "la", "sea")


class Attention(Module):
    """Multi-head attention over token sequences.

    kind:
      full  softmax(Q K^T / sqrt(d)) V
      la    softmax_feat(Q) (softmax_pos(K)^T V), never materializes N x N
      sea   key/value map reduced RxR before full attention; R == 1 skips the
            reduction entirely so it equals ``full`` bit for bit
    """

    def __init__(self, rng, kind: str, dim: int, heads: int, reduction: int = 1):
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {kind!r}")
        if dim % heads:
            raise T.ShapeError(f"dim {dim} not divisible by heads {heads}")
        if reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        self.kind = kind
        self.dim, self.heads, self.reduction = dim, heads, reduction
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        if kind == "sea" and reduction > 1:
            # RxR stride-R aggregation expressed as reshape + linear (exactly
            # an RxR stride-R convolution with zero padding).
            self.sr = Linear(rng, dim * reduction * reduction, dim)
            self.sr_norm = LayerNorm(dim)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        d = self.dim // self.heads
        return T.transpose(T.reshape(x, (b, n, self.heads, d)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, a, n, d = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, a * d))

    def _reduce(self, kv: Tensor, hw: tuple) -> Tensor:
        h, w = hw
        r = self.reduction
        if h % r or w % r:
            raise T.ShapeError(f"kv extents {(h, w)} not divisible by reduction {r}")
        b, n, c = kv.shape
        blocks = T.reshape(kv, (b, h // r, r, w // r, r, c))
        blocks = T.transpose(blocks, (0, 1, 3, 2, 4, 5))
        blocks = T.reshape(blocks, (b, (h // r) * (w // r), r * r * c))
        return self.sr_norm(self.sr(blocks))

    def __call__(self, q_src: Tensor, kv_src: Tensor, kv_hw: tuple) -> Tensor:
        if q_src.shape[-1] != self.dim or kv_src.shape[-1] != self.dim:
            raise T.ShapeError("attention input width does not match configured dim")
        if self.kind == "sea" and self.reduction > 1:
            kv_src = self._reduce(kv_src, kv_hw)
        q = self._split(self.q(q_src))
        k = self._split(self.k(kv_src))
        v = self._split(self.v(kv_src))
        if self.kind == "la":
            qn = T.softmax(q, axis=-1)
            kn = T.softmax(k, axis=-2)
            ctx = T.matmul(T.transpose(kn, (0, 1, 3, 2)), v)   # [B, A, d, d]
            y = T.matmul(qn, ctx)
        else:
            d = self.dim // self.heads
            scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
            y = T.matmul(T.softmax(scores, axis=-1), v)
        return self.out(self._merge(y))


class MixFFN(Module):
    """linear C -> EC, depthwise 3x3 on the spatial map, GELU, linear EC -> C."""

    def __init__(self, rng, dim: int, expansion: int = 4):
        hidden = dim * expansion
        self.fc1 = Linear(rng, dim, hidden)
        self.dw = Conv2d(rng, hidden, hidden, 3, stride=1, padding=1, groups=hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor, hw: tuple) -> Tensor:
        h, w = hw
        y = self.fc1(x)
        y = map_to_seq(self.dw(seq_to_map(y, h, w)))
        return self.fc2(T.gelu(y))


class AttentionBlock(Module):
    """Pre-norm residual block; cross wiring swaps the key/value stream.

    Cross attention updates both streams simultaneously from pre-update
    values, and weights are shared across streams.
    """

    def __init__(self, rng, dim: int, heads: int, kind: str,
                 reduction: int = 1, expansion: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, kind, dim, heads, reduction)
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(rng, dim, expansion)

    def _ffn_step(self, x: Tensor, hw: tuple) -> Tensor:
        return T.add(x, self.ffn(self.norm2(x), hw))

    def forward_single(self, x: Tensor, hw: tuple) -> Tensor:
        y = self.attn(self.norm1(x), self.norm1(x), hw)
        return self._ffn_step(T.add(x, y), hw)

    def forward_pair(self, xa: Tensor, xb: Tensor, hw: tuple, cross: bool):
        if xa.shape != xb.shape:
            raise T.ShapeError("stream shapes differ")
        if not cross:
            return self.forward_single(xa, hw), self.forward_single(xb, hw)
        na, nb = self.norm1(xa), self.norm1(xb)
        xa = T.add(xa, self.attn(na, nb, hw))
        xb = T.add(xb, self.attn(nb, na, hw))
        return self._ffn_step(xa, hw), self._ffn_step(xb, hw)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "# matchformer-checkpoint v1"


def save_checkpoint(path, named_params) -> None:
    """One file: magic line, then per tensor a name line followed by its
    snapshot (``shape:`` header plus row-major decimals)."""
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        for name, p in named_params:
            arr = p.data if isinstance(p, Tensor) else np.asarray(p)
            fh.write(name + "\n")
            fh.write(T._snapshot_str(arr))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic line)")
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        if i + 2 >= len(lines) + 1:
            raise ValueError(f"{path}: truncated at tensor {name!r}")
        tokens = (lines[i + 1] + " " + lines[i + 2]).split()
        out[name] = T._parse_snapshot(tokens)
        i += 3
    return out


def apply_checkpoint(module: Module, state: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={missing[:4]} extra={extra[:4]}")
    for name, p in params.items():
        if p.data.shape != state[name].shape:
            raise ValueError(f"checkpoint shape mismatch at {name}: "
                             f"{state[name].shape} vs {p.data.shape}")
        p.data = state[name].astype(np.float64).copy()
