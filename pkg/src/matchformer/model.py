"""Full model assembly: encoder + decoder plus checkpoint round-tripping."""

from __future__ import annotations

import numpy as np

from .blocks import Module, apply_checkpoint, load_checkpoint, save_checkpoint
from .decoder import FPNDecoder
from .encoder import Encoder, ModelConfig, make_config
from .tensor import Tensor


class MatchModel(Module):
    """Two-stream feature extractor producing coarse/fine map pairs."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng, cfg)
        self.decoder = FPNDecoder(rng, cfg)
        self.cfg = cfg

    def forward_pair(self, img_a: Tensor, img_b: Tensor):
        """Returns (coarse_a, fine_a, coarse_b, fine_b)."""
        pyr_a, pyr_b = self.encoder.encode_pair(img_a, img_b)
        coarse_a, fine_a = self.decoder.fuse(pyr_a)
        coarse_b, fine_b = self.decoder.fuse(pyr_b)
        return coarse_a, fine_a, coarse_b, fine_b

    def save(self, path) -> None:
        save_checkpoint(path, self.named_parameters())

    def load(self, path) -> None:
        apply_checkpoint(self, load_checkpoint(path))


def build_model(variant: str = "lite", attention: str = "sea", seed: int = 0,
                **config_kwargs) -> MatchModel:
    return MatchModel(make_config(variant=variant, attention=attention,
                                  **config_kwargs), seed=seed)
