"""Four-stage hierarchical two-stream encoder with interleaved attention.

Each stage applies a patch embedding shared across the two streams and then a
fixed number of attention blocks, each flagged self or cross.  The per-stage
self/cross pattern is fully configurable; the default follows the strongest
arrangement, SSC SSC SCC SCC, with relatively more cross layers in the deeper
stages.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import tensor as T
from .blocks import (AttentionBlock, LayerNorm, Module, PosPatchEmbed,
                     StdPatchEmbed, map_to_seq, seq_to_map)
from .tensor import Tensor

VARIANTS = ("lite", "large")
ATTENTIONS = ("la", "sea", "full")
PATCH_EMBEDS = ("pos", "std")

DEFAULT_CHANNELS = (128, 192, 256, 512)
SEA_HEADS = (1, 2, 4, 8)
SEA_REDUCTIONS = (4, 2, 2, 1)
LA_HEADS = (8, 8, 8, 8)
FINE_STRIDE = 8


def default_schedule() -> tuple:
    """Cross flags for SSC SSC SCC SCC."""
    return ((False, False, True), (False, False, True),
            (False, True, True), (False, True, True))


def schedule_from_strings(rows) -> tuple:
    """Parse per-stage strings like 'SSC' into cross-flag tuples."""
    out = []
    for row in rows:
        flags = []
        for ch in row.strip().upper():
            if ch not in "SC":
                raise ValueError(f"schedule token {row!r}: use only S and C")
            flags.append(ch == "C")
        out.append(tuple(flags))
    if len(out) != 4:
        raise ValueError("schedule needs exactly 4 stage rows")
    return tuple(out)


NAMED_SCHEDULES = {
    "interleaving": ("SSC", "SSC", "SCC", "SCC"),
    "self_only": ("SSS", "SSS", "SSS", "SSS"),
    "cross_only": ("CCC", "CCC", "CCC", "CCC"),
    "sequential": ("SSS", "SSS", "CCC", "CCC"),
}


@dataclass(frozen=True)
class StageConfig:
    channels: int
    pe_kernel: int
    pe_stride: int
    pe_padding: int
    cross_flags: tuple
    attention: str
    heads: int
    reduction: int = 1
    ffn_ratio: int = 4

    @property
    def depth(self) -> int:
        return len(self.cross_flags)


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    attention: str
    patch_embed: str = "pos"
    stages: tuple = ()
    in_channels: int = 1
    coarse_channels: int = 128
    fine_channels: int = 192
    fusion_channels: int = 128

    @property
    def stage_strides(self) -> tuple:
        """Cumulative downscale factor of each stage output."""
        out, s = [], 1
        for st in self.stages:
            s *= st.pe_stride
            out.append(s)
        return tuple(out)

    @property
    def coarse_stride(self) -> int:
        return self.stage_strides[0]

    @property
    def fine_stride(self) -> int:
        return FINE_STRIDE

    @property
    def fine_level(self) -> int:
        """Stage index whose resolution matches the fine output (1/8)."""
        return self.stage_strides.index(FINE_STRIDE)


def make_config(variant: str = "lite", attention: str = "sea",
                patch_embed: str = "pos", channels=None, schedule=None,
                coarse_channels: int | None = None,
                fine_channels: int | None = None,
                fusion_channels: int | None = None) -> ModelConfig:
    """Build a model configuration.

    Defaults reproduce the four published variants; ``channels`` and the
    head widths may be overridden for toy-scale models (heads scale with the
    channel override so the per-head width stays valid).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if attention not in ATTENTIONS:
        raise ValueError(f"attention must be one of {ATTENTIONS}")
    if patch_embed not in PATCH_EMBEDS:
        raise ValueError(f"patch_embed must be one of {PATCH_EMBEDS}")
    channels = tuple(channels) if channels is not None else DEFAULT_CHANNELS
    if len(channels) != 4:
        raise ValueError("channels override needs 4 values")
    schedule = tuple(schedule) if schedule is not None else default_schedule()
    if len(schedule) != 4:
        raise ValueError("schedule needs 4 stages")

    first_stride = 4 if variant == "lite" else 2
    pe_params = [(7, first_stride, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1)]
    stages = []
    for i in range(4):
        kind = "full" if attention == "full" else attention
        if attention == "sea":
            heads, red = SEA_HEADS[i], SEA_REDUCTIONS[i]
        else:
            heads, red = LA_HEADS[i], 1
        # keep per-head width integral and >= 2 under toy overrides (a single
        # feature per head would make the LA feature softmax constant)
        while channels[i] % heads or channels[i] // heads < 2:
            heads //= 2
        k, s, p = pe_params[i]
        stages.append(StageConfig(channels=channels[i], pe_kernel=k, pe_stride=s,
                                  pe_padding=p, cross_flags=tuple(schedule[i]),
                                  attention=kind, heads=heads, reduction=red))
    fine_default = 192 if variant == "lite" else 256
    return ModelConfig(
        variant=variant, attention=attention, patch_embed=patch_embed,
        stages=tuple(stages),
        coarse_channels=coarse_channels if coarse_channels is not None else 128,
        fine_channels=fine_channels if fine_channels is not None else fine_default,
        fusion_channels=fusion_channels if fusion_channels is not None else 128,
    )


def with_schedule(cfg: ModelConfig, schedule) -> ModelConfig:
    stages = tuple(replace(st, cross_flags=tuple(flags))
                   for st, flags in zip(cfg.stages, schedule))
    return replace(cfg, stages=stages)


# ---------------------------------------------------------------------------
# Shape planning (symbolic, no weights)
# ---------------------------------------------------------------------------


def check_input_extents(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise T.ShapeError(f"input extents {(h, w)} must be divisible by 32")


def stage_plan(cfg: ModelConfig, h: int, w: int):
    """Per-stage (channels, height, width) for an input of extent h x w."""
    check_input_extents(h, w)
    plan = []
    for st in cfg.stages:
        h, w = h // st.pe_stride, w // st.pe_stride
        plan.append((st.channels, h, w))
    return plan


def output_plan(cfg: ModelConfig, h: int, w: int):
    """(coarse (C, h, w), fine (C, h, w)) for an input of extent h x w."""
    check_input_extents(h, w)
    rc, rf = cfg.coarse_stride, cfg.fine_stride
    return ((cfg.coarse_channels, h // rc, w // rc),
            (cfg.fine_channels, h // rf, w // rf))


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    maps: list  # four [B, C, h, w] tensors

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, i):
        return self.maps[i]

    def shapes(self):
        return [m.shape for m in self.maps]


class Stage(Module):
    def __init__(self, rng, cfg: StageConfig, c_in: int, patch_embed: str):
        if patch_embed == "pos":
            self.pe = PosPatchEmbed(rng, c_in, cfg.channels, cfg.pe_kernel,
                                    cfg.pe_stride, cfg.pe_padding)
        else:
            self.pe = StdPatchEmbed(rng, c_in, cfg.channels, cfg.pe_stride)
        self.blocks = [AttentionBlock(rng, cfg.channels, cfg.heads, cfg.attention,
                                      cfg.reduction, cfg.ffn_ratio)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.channels)
        self.cfg = cfg

    def forward_pair(self, xa: Tensor, xb: Tensor):
        xa, xb = self.pe(xa), self.pe(xb)
        _, _, h, w = xa.shape
        sa, sb = map_to_seq(xa), map_to_seq(xb)
        for block, cross in zip(self.blocks, self.cfg.cross_flags):
            sa, sb = block.forward_pair(sa, sb, (h, w), cross)
        return seq_to_map(self.norm(sa), h, w), seq_to_map(self.norm(sb), h, w)

    def forward_single(self, x: Tensor):
        x = self.pe(x)
        _, _, h, w = x.shape
        s = map_to_seq(x)
        for block in self.blocks:
            s = block.forward_single(s, (h, w))
        return seq_to_map(self.norm(s), h, w)


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.stages = []
        c_in = cfg.in_channels
        for st in cfg.stages:
            self.stages.append(Stage(rng, st, c_in, cfg.patch_embed))
            c_in = st.channels
        self.cfg = cfg

    def encode_pair(self, img_a: Tensor, img_b: Tensor):
        """Run both streams through all stages with shared weights."""
        if img_a.shape != img_b.shape:
            raise T.ShapeError("paired images must share a shape")
        check_input_extents(img_a.shape[2], img_a.shape[3])
        maps_a, maps_b = [], []
        xa, xb = img_a, img_b
        for stage in self.stages:
            xa, xb = stage.forward_pair(xa, xb)
            maps_a.append(xa)
            maps_b.append(xb)
        return FeaturePyramid(maps_a), FeaturePyramid(maps_b)

    def encode_single(self, img: Tensor) -> FeaturePyramid:
        check_input_extents(img.shape[2], img.shape[3])
        maps = []
        x = img
        for stage in self.stages:
            x = stage.forward_single(x)
            maps.append(x)
        return FeaturePyramid(maps)


# ---------------------------------------------------------------------------
# Config file grammar
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "variant", "attention", "pe", "channels", "cross_flags",
    "coarse_channels", "fine_channels", "fusion_channels",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key: value`` lines; '#' starts a comment; order-insensitive."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ValueError(f"config line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        key = key.strip().lower()
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def model_config_from_dict(raw: dict[str, str], **defaults) -> ModelConfig:
    """Build a ModelConfig from parsed config keys (unknown keys rejected
    by the caller, which may own additional key groups)."""
    kwargs = dict(defaults)
    if "variant" in raw:
        kwargs["variant"] = raw["variant"]
    if "attention" in raw:
        kwargs["attention"] = raw["attention"]
    if "pe" in raw:
        kwargs["patch_embed"] = raw["pe"]
    if "channels" in raw:
        kwargs["channels"] = tuple(int(v) for v in raw["channels"].split())
    if "cross_flags" in raw:
        name = raw["cross_flags"].strip().lower()
        if name in NAMED_SCHEDULES:
            kwargs["schedule"] = schedule_from_strings(NAMED_SCHEDULES[name])
        else:
            kwargs["schedule"] = schedule_from_strings(raw["cross_flags"].split())
    for key in ("coarse_channels", "fine_channels", "fusion_channels"):
        if key in raw:
            kwargs[key] = int(raw[key])
    return make_config(**kwargs)
