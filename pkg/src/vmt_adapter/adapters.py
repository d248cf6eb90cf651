"""Adapter regimes: Multiple, Shared, VMT and VMT-Lite.

All regimes sit in parallel to each transformer layer's MLP. The bank keeps
an explicit split between parameters shared by every task and parameters
owned by a single task, since gradient-conflict analysis is defined over the
shared part only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import ConfigError, ModelConfig

ADAPTER_VARIANTS = ("multiple", "shared", "vmt", "lite", "none")


@dataclass
class AdapterParams:
    w_down: Tensor
    w_up: Tensor

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    def __iter__(self):
        # unpacks as (w_down, w_up)
        return iter((self.w_down, self.w_up))


@dataclass
class TaskExtractorParams:
    alpha: Tensor
    gamma: Tensor


@dataclass
class LiteFactorization:
    """Kronecker factors for one layer; ``a`` is the globally shared set."""

    a: list[Tensor]
    b_down: list[Tensor]
    b_up: list[Tensor]


@dataclass
class LayerAdapter:
    stage: int
    layer: int
    dim: int
    projections: list[AdapterParams] = field(default_factory=list)
    lite: LiteFactorization | None = None
    extractors: list[TaskExtractorParams] = field(default_factory=list)

    def projection(self, task: int = 0) -> AdapterParams:
        if self.lite is not None:
            return lite_materialize(self.lite)
        if len(self.projections) == 1:
            return self.projections[0]
        return self.projections[task]


def _check_width(x: Tensor, p: AdapterParams) -> None:
    if x.shape[-1] != p.w_down.shape[0] or p.w_up.shape[-1] != p.w_down.shape[0] or p.w_down.shape[1] != p.w_up.shape[0]:
        raise ShapeError(f"adapter: input {x.shape} incompatible with W_down {p.w_down.shape} / W_up {p.w_up.shape}")


def adapter_branch(x: Tensor, p: AdapterParams) -> Tensor:
    """Bottleneck features ReLU(x W_down) W_up, without residual."""
    _check_width(x, p)
    return ad.relu(x @ p.w_down) @ p.w_up


def adapter_forward(x: Tensor, p: AdapterParams) -> Tensor:
    """Classic adapter with its own residual connection."""
    return adapter_branch(x, p) + x


def task_scale_shift(gated: Tensor, tasks: list[TaskExtractorParams]) -> Tensor:
    """All task extractors in one node: ``out[i] = alpha_i * gated + gamma_i``, shape [T, *gated.shape]."""
    d = gated.shape[-1]
    for t in tasks:
        if t.alpha.shape != (d,) or t.gamma.shape != (d,):
            raise ShapeError(f"task extractor shapes {t.alpha.shape}/{t.gamma.shape} do not match width {d}")
    lead = tuple(range(gated.ndim - 1))
    # one contiguous pass per task; a broadcast over a leading task axis is far slower in numpy
    out = np.empty((len(tasks),) + gated.shape, dtype=np.result_type(gated.dtype, tasks[0].alpha.dtype))
    for i, t in enumerate(tasks):
        np.multiply(gated.data, t.alpha.data, out=out[i])
        out[i] += t.gamma.data

    def backward(g):
        d_gated = np.zeros_like(gated.data)
        d_alpha, d_gamma = [], []
        for i, t in enumerate(tasks):
            d_gated += g[i] * t.alpha.data
            d_alpha.append((g[i] * gated.data).sum(axis=lead))
            d_gamma.append(g[i].sum(axis=lead))
        return (d_gated, *d_alpha, *d_gamma)

    parents = [gated] + [t.alpha for t in tasks] + [t.gamma for t in tasks]
    return ad.apply_op(out, parents, backward, "task_scale_shift")


def stage_task_features(stream: Tensor, gated: list[Tensor], extractors: list[list[TaskExtractorParams]]) -> Tensor:
    """Per-task stage features in one node.

    ``out[i] = stream + sum_l (alpha_il * gated_l + gamma_il)``, shape
    [T, *stream.shape], where ``gated_l`` is layer l's ``s * F`` and
    ``extractors[l][i]`` its task-i scale and shift. Equivalent to summing
    :func:`task_scale_shift` over the stage's layers and adding the stream,
    but writes the task-stacked result once.
    """
    if not gated or len(gated) != len(extractors):
        raise ValueError("stage_task_features needs one extractor list per gated layer")
    T = len(extractors[0])
    d = stream.shape[-1]
    for g, exs in zip(gated, extractors):
        if g.shape != stream.shape or len(exs) != T:
            raise ShapeError(f"stage features: layer shape {g.shape} / {len(exs)} tasks vs stream {stream.shape} / {T} tasks")
        for t in exs:
            if t.alpha.shape != (d,) or t.gamma.shape != (d,):
                raise ShapeError(f"task extractor shapes {t.alpha.shape}/{t.gamma.shape} do not match width {d}")
    lead = tuple(range(stream.ndim - 1))
    out = np.empty((T,) + stream.shape, dtype=stream.dtype)
    scratch = np.empty_like(stream.data)
    for i in range(T):
        shift = sum(exs[i].gamma.data for exs in extractors)
        np.add(stream.data, shift, out=out[i])
        for g, exs in zip(gated, extractors):
            np.multiply(g.data, exs[i].alpha.data, out=scratch)
            out[i] += scratch

    def backward(grad):
        d_stream = grad.sum(axis=0)
        d_gated = [np.zeros_like(g.data) for g in gated]
        d_alpha = [[None] * T for _ in gated]
        d_gamma = [[None] * T for _ in gated]
        for i in range(T):
            g_sum = grad[i].sum(axis=lead)
            for l, (g, exs) in enumerate(zip(gated, extractors)):
                d_gated[l] += grad[i] * exs[i].alpha.data
                d_alpha[l][i] = (grad[i] * g.data).sum(axis=lead)
                d_gamma[l][i] = g_sum
        flat = [x for l in range(len(gated)) for x in d_alpha[l] + d_gamma[l]]
        return (d_stream, *d_gated, *flat)

    parents = [stream, *gated]
    for exs in extractors:
        parents += [t.alpha for t in exs] + [t.gamma for t in exs]
    return ad.apply_op(out, parents, backward, "stage_task_features")


def vmt_forward_stacked(x: Tensor, shared: AdapterParams, tasks: list[TaskExtractorParams], s: float) -> tuple[Tensor, Tensor]:
    """Like :func:`vmt_forward` but with task features stacked on a leading axis."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"gating ratio must lie in [0, 1], got {s}")
    if not tasks:
        raise ValueError("vmt_forward needs at least one task extractor")
    features = adapter_branch(x, shared)
    return ad.scale(features, 1.0 - s), task_scale_shift(ad.scale(features, s), tasks)


def vmt_forward(x: Tensor, shared: AdapterParams, tasks: list[TaskExtractorParams], s: float) -> tuple[Tensor, list[Tensor]]:
    """Split shared bottleneck features into a generic part and per-task parts.

    The generic part is ``(1 - s) * F``; task ``i`` receives
    ``alpha_i * (s * F) + gamma_i``.
    """
    generic, stacked = vmt_forward_stacked(x, shared, tasks, s)
    return generic, [stacked[i] for i in range(len(tasks))]


def lite_materialize(f: LiteFactorization) -> AdapterParams:
    """Build full projections as sums of Kronecker products A^i (x) B^i."""
    if not (len(f.a) == len(f.b_down) == len(f.b_up)) or not f.a:
        raise ShapeError(f"lite factorization needs equal, nonzero factor counts: {len(f.a)}/{len(f.b_down)}/{len(f.b_up)}")
    m = len(f.a)
    if any(a.shape != (m, m) for a in f.a):
        raise ShapeError(f"shared factors must be {m}x{m}, got {[a.shape for a in f.a]}")
    w_down = w_up = None
    for a, bd, bu in zip(f.a, f.b_down, f.b_up):
        kd, ku = ad.kronecker(a, bd), ad.kronecker(a, bu)
        w_down = kd if w_down is None else w_down + kd
        w_up = ku if w_up is None else w_up + ku
    return AdapterParams(w_down, w_up)


class AdapterBank:
    """Trainable adaptation parameters for one regime.

    ``shared`` holds parameters common to all tasks; ``task_specific[i]``
    holds those owned by task ``i``. Together they cover every trainable leaf
    exactly once.
    """

    def __init__(self, variant: str, num_tasks: int, gating: float):
        self.variant = variant
        self.num_tasks = num_tasks
        self.gating = gating
        self.layers: dict[tuple[int, int], LayerAdapter] = {}
        self.shared: dict[str, Tensor] = {}
        self.task_specific: list[dict[str, Tensor]] = [{} for _ in range(num_tasks)]

    def layer(self, stage: int, layer: int) -> LayerAdapter | None:
        return self.layers.get((stage, layer))

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.shared)
        for group in self.task_specific:
            params.update(group)
        return params

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def perturb(self, seed: int, scale: float = 0.1) -> None:
        """Add Gaussian noise to every leaf, leaving identity initialization.

        Used to probe behaviour away from the zero-initialised up-projection.
        """
        rng = np.random.default_rng(seed)
        for name in sorted(self.parameters()):
            p = self.parameters()[name]
            p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def build_adapter_bank(cfg: ModelConfig, seed: int = 0) -> AdapterBank:
    """Create a bank with the variant's layout and identity initialization.

    Down-projections (and Lite's shared and down factors) are random with
    fan-in scaling; up-projections start at zero, scales at one and shifts at
    zero, so the adapted network initially computes the frozen backbone.
    Names follow ``stage{j}.layer{l}.<leaf>`` with 1-based indices.
    """
    if cfg.variant not in ADAPTER_VARIANTS:
        raise ConfigError(f"model.variant: unknown variant {cfg.variant!r}")
    cfg.validate(check_spatial=False)
    rng = np.random.default_rng(seed)
    T = cfg.num_tasks
    bank = AdapterBank(cfg.variant, T, cfg.gating)
    if cfg.variant == "none":
        return bank

    def leaf(name: str, value: np.ndarray, owner: int | None) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        (bank.shared if owner is None else bank.task_specific[owner])[name] = t
        return t

    shared_a: list[Tensor] = []
    if cfg.variant == "lite":
        m = cfg.m
        shared_a = [leaf(f"shared.A{i + 1}", _uniform(rng, (m, m), 1.0 / np.sqrt(m)), None) for i in range(m)]

    for j, (d, depth) in enumerate(zip(cfg.stage_dims, cfg.stage_depths), start=1):
        k = cfg.bottleneck(d)
        for l in range(1, depth + 1):
            prefix = f"stage{j}.layer{l}"
            slot = LayerAdapter(j, l, d)
            if cfg.variant == "multiple":
                for t in range(T):
                    slot.projections.append(
                        AdapterParams(
                            leaf(f"{prefix}.wdown.task{t + 1}", _uniform(rng, (d, k), 1.0 / np.sqrt(d)), t),
                            leaf(f"{prefix}.wup.task{t + 1}", np.zeros((k, d)), t),
                        )
                    )
            elif cfg.variant in ("shared", "vmt"):
                slot.projections.append(
                    AdapterParams(
                        leaf(f"{prefix}.wdown", _uniform(rng, (d, k), 1.0 / np.sqrt(d)), None),
                        leaf(f"{prefix}.wup", np.zeros((k, d)), None),
                    )
                )
            else:
                m = cfg.m
                slot.lite = LiteFactorization(
                    shared_a,
                    [leaf(f"{prefix}.Bdown{i + 1}", _uniform(rng, (d // m, k // m), 1.0 / np.sqrt(d)), None) for i in range(m)],
                    [leaf(f"{prefix}.Bup{i + 1}", np.zeros((k // m, d // m)), None) for i in range(m)],
                )
            if cfg.variant in ("vmt", "lite"):
                for t in range(T):
                    slot.extractors.append(
                        TaskExtractorParams(
                            leaf(f"{prefix}.alpha.task{t + 1}", np.ones(d), t),
                            leaf(f"{prefix}.gamma.task{t + 1}", np.zeros(d), t),
                        )
                    )
            bank.layers[(j, l)] = slot
    return bank
