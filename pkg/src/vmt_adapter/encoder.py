"""Desk-scale hierarchical transformer encoder with parallel adapter sites.

Four stages of pre-norm transformer layers with full multi-head
self-attention, separated by 2x2 patch merging. Every layer offers an adapter
site in parallel to its MLP. The generic adapter output joins the residual
stream, so a stage's generic features are simply its output stream; task
features from the layers of one stage are summed and handed to the decoders
alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank, LayerAdapter, adapter_branch, stage_task_features, task_scale_shift
from .autodiff import ShapeError, Tensor
from .config import NUM_STAGES, ModelConfig


@dataclass
class MultiScaleFeatures:
    """Decoder inputs: ``per_task[i][j]`` is task i's map for stage j, shaped [B, side, side, d_j].

    ``streams`` keeps the generic stage outputs of every encoder pass (one
    pass for shared regimes, one per task for Multiple).
    """

    per_task: list[list[Tensor]]
    streams: list[list[Tensor]]


class Encoder:
    """Frozen backbone; adapters come from an :class:`AdapterBank` at call time."""

    def __init__(self, cfg: ModelConfig, dtype=None):
        self.cfg = cfg.validate()
        self.body_calls = 0
        rng = np.random.default_rng(cfg.backbone_seed)
        self.params: dict[str, Tensor] = {}

        def frozen(name, value):
            self.params[name] = Tensor(value, name=name, dtype=dtype)

        p, c = cfg.patch_size, cfg.in_channels
        d1 = cfg.stage_dims[0]
        frozen("patch_embed.w", rng.standard_normal((c * p * p, d1)) / np.sqrt(c * p * p))
        frozen("patch_embed.b", np.zeros(d1))
        for j, (d, depth) in enumerate(zip(cfg.stage_dims, cfg.stage_depths), start=1):
            side = cfg.stage_side(j - 1)
            frozen(f"stage{j}.pos", 0.02 * rng.standard_normal((side * side, d)))
            hidden = d * cfg.mlp_ratio
            for l in range(1, depth + 1):
                pre = f"stage{j}.layer{l}"
                for ln in ("ln1", "ln2"):
                    frozen(f"{pre}.{ln}.w", np.ones(d))
                    frozen(f"{pre}.{ln}.b", np.zeros(d))
                frozen(f"{pre}.attn.qkv.w", rng.standard_normal((d, 3 * d)) / np.sqrt(d))
                frozen(f"{pre}.attn.qkv.b", np.zeros(3 * d))
                frozen(f"{pre}.attn.proj.w", rng.standard_normal((d, d)) / np.sqrt(d))
                frozen(f"{pre}.attn.proj.b", np.zeros(d))
                frozen(f"{pre}.mlp.fc1.w", rng.standard_normal((d, hidden)) * np.sqrt(2.0 / d))
                frozen(f"{pre}.mlp.fc1.b", np.zeros(hidden))
                frozen(f"{pre}.mlp.fc2.w", rng.standard_normal((hidden, d)) / np.sqrt(hidden))
                frozen(f"{pre}.mlp.fc2.b", np.zeros(d))
            if j < NUM_STAGES:
                frozen(f"merge{j}.ln.w", np.ones(4 * d))
                frozen(f"merge{j}.ln.b", np.zeros(4 * d))
                frozen(f"merge{j}.w", rng.standard_normal((4 * d, cfg.stage_dims[j])) / np.sqrt(4 * d))

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def patch_embed(self, images) -> Tensor:
        """[B, C, H, W] (or [C, H, W]) pixels to [B, N, d1] tokens."""
        x = images.data if isinstance(images, Tensor) else np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        B, C, H, W = x.shape
        p = self.cfg.patch_size
        if C != self.cfg.in_channels or H % p or W % p:
            raise ShapeError(f"patch_embed: image shape {x.shape[1:]} incompatible with patch {p} and {self.cfg.in_channels} channels")
        if isinstance(images, Tensor):
            t = images if images.ndim == 4 else images.reshape((1, C, H, W))
            patches = t.reshape((B, C, H // p, p, W // p, p)).transpose((0, 2, 4, 1, 3, 5)).reshape((B, (H // p) * (W // p), C * p * p))
        else:
            patches = Tensor(
                x.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), C * p * p),
                dtype=self.params["patch_embed.w"].dtype,
            )
        return patches @ self.params["patch_embed.w"] + self.params["patch_embed.b"]

    def _attention(self, x: Tensor, pre: str, heads: int) -> Tensor:
        B, N, d = x.shape
        dh = d // heads
        P = self.params
        qkv = (x @ P[f"{pre}.attn.qkv.w"] + P[f"{pre}.attn.qkv.b"]).reshape((B, N, 3, heads, dh)).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.scale(q @ k.transpose((0, 1, 3, 2)), dh**-0.5), axis=-1)
        out = (att @ v).transpose((0, 2, 1, 3)).reshape((B, N, d))
        return out @ P[f"{pre}.attn.proj.w"] + P[f"{pre}.attn.proj.b"]

    def layer_forward(
        self,
        x: Tensor,
        stage: int,
        layer: int,
        adapter: LayerAdapter | None = None,
        variant: str = "none",
        gating: float = 0.5,
        task: int = 0,
    ) -> tuple[Tensor, Tensor | None]:
        """One transformer layer with an optional adapter beside the MLP.

        Returns the new token stream and, for VMT/Lite, the per-task features
        stacked as [T, B, N, d] (they do not enter the stream).
        """
        out, gated = self._layer(x, stage, layer, adapter, variant, gating, task)
        if gated is None:
            return out, None
        return out, task_scale_shift(gated, adapter.extractors)

    def _layer(self, x, stage, layer, adapter, variant, gating, task) -> tuple[Tensor, Tensor | None]:
        # returns the stream and, for VMT/Lite, the gated features s * F
        d = self.cfg.stage_dims[stage - 1]
        if x.shape[-1] != d:
            raise ShapeError(f"layer stage{stage}.layer{layer}: input width {x.shape[-1]} != {d}")
        P = self.params
        pre = f"stage{stage}.layer{layer}"
        h = x + self._attention(ad.layer_norm(x, P[f"{pre}.ln1.w"], P[f"{pre}.ln1.b"]), pre, self.cfg.heads[stage - 1])
        u = ad.layer_norm(h, P[f"{pre}.ln2.w"], P[f"{pre}.ln2.b"])
        mlp = ad.relu(u @ P[f"{pre}.mlp.fc1.w"] + P[f"{pre}.mlp.fc1.b"]) @ P[f"{pre}.mlp.fc2.w"] + P[f"{pre}.mlp.fc2.b"]
        out = h + mlp
        if adapter is None or variant == "none":
            return out, None
        if adapter.dim != d:
            raise ShapeError(f"adapter width {adapter.dim} != layer width {d}")
        proj = adapter.projection(task)
        if variant in ("multiple", "shared"):
            return out + adapter_branch(u, proj), None
        if not 0.0 <= gating <= 1.0:
            raise ValueError(f"gating ratio must lie in [0, 1], got {gating}")
        features = adapter_branch(u, proj)
        return out + ad.scale(features, 1.0 - gating), ad.scale(features, gating)

    def _merge(self, x: Tensor, stage: int, side: int) -> Tensor:
        B, _, d = x.shape
        half = side // 2
        x = x.reshape((B, half, 2, half, 2, d)).transpose((0, 1, 3, 2, 4, 5)).reshape((B, half * half, 4 * d))
        P = self.params
        return ad.layer_norm(x, P[f"merge{stage}.ln.w"], P[f"merge{stage}.ln.b"]) @ P[f"merge{stage}.w"]

    def body(self, images, bank: AdapterBank | None = None, task: int = 0) -> tuple[list[Tensor], list[Tensor | None]]:
        """One pass through all stages.

        Returns the stage outputs as [B, side, side, d] maps and, per stage, the
        sum of that stage's task features as [T, B, side, side, d] (None when
        the regime has no task features).
        """
        self.body_calls += 1
        variant = bank.variant if bank is not None else "none"
        gating = bank.gating if bank is not None else 0.0
        x = self.patch_embed(images)
        B = x.shape[0]
        outputs: list[Tensor] = []
        task_sums: list[Tensor | None] = []
        for j in range(1, NUM_STAGES + 1):
            side = self.cfg.stage_side(j - 1)
            d = self.cfg.stage_dims[j - 1]
            x = x + self.params[f"stage{j}.pos"]
            gated, extractors = [], []
            for l in range(1, self.cfg.stage_depths[j - 1] + 1):
                adapter = bank.layer(j, l) if bank is not None else None
                x, g = self._layer(x, j, l, adapter, variant, gating, task)
                if g is not None:
                    gated.append(g)
                    extractors.append(adapter.extractors)
            outputs.append(x.reshape((B, side, side, d)))
            if gated:
                feats = stage_task_features(x, gated, extractors)
                task_sums.append(feats.reshape((feats.shape[0], B, side, side, d)))
            else:
                task_sums.append(None)
            if j < NUM_STAGES:
                x = self._merge(x, j, side)
        return outputs, task_sums

    def forward(self, images, bank: AdapterBank | None = None, num_tasks: int | None = None) -> MultiScaleFeatures:
        """Multi-scale features for every task.

        Multiple runs the body once per task with that task's adapters; all
        other regimes run it once and add the per-stage task features to the
        shared stage outputs.
        """
        T = bank.num_tasks if bank is not None else (num_tasks or self.cfg.num_tasks)
        if bank is not None and bank.variant == "multiple":
            streams = [self.body(images, bank, task=i)[0] for i in range(T)]
            return MultiScaleFeatures([list(s) for s in streams], streams)
        outputs, task_sums = self.body(images, bank)
        per_stage = []
        for out, sums in zip(outputs, task_sums):
            if sums is None:
                per_stage.append([out] * T)
            else:
                per_stage.append([sums[i] for i in range(T)])
        per_task = [[per_stage[j][i] for j in range(NUM_STAGES)] for i in range(T)]
        return MultiScaleFeatures(per_task, [outputs])
