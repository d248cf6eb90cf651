"""All-MLP task decoder over the four encoder scales."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import NUM_STAGES, ModelConfig


def task_seed(seed: int, task: str) -> int:
    """Initialization seed keyed by task name, so duplicated tasks start identical."""
    return int(np.random.SeedSequence([seed, *task.encode()]).generate_state(1)[0])


class Decoder:
    """Project each scale to a common width, upsample to the finest scale,
    concatenate, classify, then upsample to full resolution."""

    def __init__(self, cfg: ModelConfig, out_channels: int, seed: int, prefix: str = "decoder", dtype=None):
        self.cfg = cfg
        self.out_channels = out_channels
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        E = cfg.decoder_dim
        self.params: dict[str, Tensor] = {}

        def param(name, value):
            self.params[f"{prefix}.{name}"] = Tensor(value, requires_grad=True, name=f"{prefix}.{name}", dtype=dtype)

        for j, d in enumerate(cfg.stage_dims, start=1):
            param(f"proj{j}.w", rng.standard_normal((d, E)) / np.sqrt(d))
            param(f"proj{j}.b", np.zeros(E))
        param("classifier.w", rng.standard_normal((NUM_STAGES * E, out_channels)) / np.sqrt(NUM_STAGES * E))
        param("classifier.b", np.zeros(out_channels))

    def __call__(self, feats: list[Tensor]) -> Tensor:
        """Logits shaped [B, H, W, C] (channel-last)."""
        if len(feats) != NUM_STAGES:
            raise ShapeError(f"decoder expects {NUM_STAGES} scales, got {len(feats)}")
        P = self.params
        finest = feats[0].shape[1]
        projected = []
        for j, f in enumerate(feats, start=1):
            side = f.shape[1]
            if finest % side:
                raise ShapeError(f"scale {j} side {side} does not divide finest side {finest}")
            y = f @ P[f"{self.prefix}.proj{j}.w"] + P[f"{self.prefix}.proj{j}.b"]
            projected.append(ad.upsample_nearest(y, finest // side))
        fused = ad.concat(projected, axis=-1)
        logits = fused @ P[f"{self.prefix}.classifier.w"] + P[f"{self.prefix}.classifier.b"]
        return ad.upsample_nearest(logits, self.cfg.image_size // finest)

    def predict(self, feats: list[Tensor]) -> np.ndarray:
        """Logits as a [B, C, H, W] array."""
        return np.moveaxis(self(feats).data, -1, 1)
