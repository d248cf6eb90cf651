"""Parameter budgets, gradient-conflict statistics and the efficiency probe."""

from __future__ import annotations

import gc
import itertools
import re
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank, build_adapter_bank
from .config import ConfigError, ExperimentConfig, ModelConfig
from .data import collate, make_dataset
from .encoder import Encoder
from .training import Adam, MultiTaskModel, linear_lr, task_losses, train_seeds

BIN_WIDTH = 0.05
BIN_EDGES = np.linspace(-1.0, 1.0, int(round(2 / BIN_WIDTH)) + 1)


# parameter budgets


def layer_count(cfg: ModelConfig, variant: str, d: int) -> int:
    """Closed-form trainable parameters contributed by one layer of width d."""
    T, rho = cfg.num_tasks, cfg.rho
    if variant == "multiple":
        return 2 * T * d * d // rho
    if variant == "shared":
        return 2 * d * d // rho
    if variant == "vmt":
        return 2 * d * d // rho + 2 * T * d
    if variant == "lite":
        return 2 * d * d // (cfg.m * rho) + 2 * T * d
    if variant == "none":
        return 0
    raise ConfigError(f"model.variant: unknown variant {variant!r}")


def closed_form_breakdown(cfg: ModelConfig, variant: str | None = None) -> tuple[list[int], int]:
    """Per-stage closed-form counts plus the global term (Lite's m^3, else 0)."""
    variant = variant or cfg.variant
    cfg.replace(variant=variant).validate(check_spatial=False)
    stages = [depth * layer_count(cfg, variant, d) for d, depth in zip(cfg.stage_dims, cfg.stage_depths)]
    return stages, (cfg.m**3 if variant == "lite" else 0)


def closed_form_count(cfg: ModelConfig, variant: str | None = None) -> int:
    stages, extra = closed_form_breakdown(cfg, variant)
    return sum(stages) + extra


def enumerate_count(bank: AdapterBank) -> int:
    return sum(p.size for p in bank.parameters().values())


_STAGE = re.compile(r"^stage(\d+)\.")


def enumerate_breakdown(bank: AdapterBank, num_stages: int = 4) -> tuple[list[int], int]:
    stages = [0] * num_stages
    extra = 0
    for name, p in bank.parameters().items():
        match = _STAGE.match(name)
        if match:
            stages[int(match.group(1)) - 1] += p.size
        else:
            extra += p.size
    return stages, extra


@dataclass
class BudgetReport:
    variant: str
    closed_form_stages: list[int]
    closed_form_global: int
    enumerated_stages: list[int]
    enumerated_global: int

    @property
    def closed_form_total(self) -> int:
        return sum(self.closed_form_stages) + self.closed_form_global

    @property
    def enumerated_total(self) -> int:
        return sum(self.enumerated_stages) + self.enumerated_global

    @property
    def match(self) -> bool:
        return self.closed_form_stages == self.enumerated_stages and self.closed_form_global == self.enumerated_global

    def rows(self) -> list[tuple[str, int, int]]:
        rows = [(f"stage{j + 1}", c, e) for j, (c, e) in enumerate(zip(self.closed_form_stages, self.enumerated_stages))]
        rows.append(("global", self.closed_form_global, self.enumerated_global))
        rows.append(("total", self.closed_form_total, self.enumerated_total))
        return rows


def budget_report(cfg: ModelConfig, variant: str | None = None) -> BudgetReport:
    variant = variant or cfg.variant
    cfg = cfg.replace(variant=variant)
    closed, extra = closed_form_breakdown(cfg)
    enum, enum_extra = enumerate_breakdown(build_adapter_bank(cfg))
    return BudgetReport(variant, closed, extra, enum, enum_extra)


# gradient conflict


def grad_conflict(g_i: np.ndarray, g_j: np.ndarray) -> tuple[float | None, float]:
    """Cosine similarity and dot product of two flat gradients.

    The cosine is None when both gradients vanish and 0 when exactly one does.
    """
    g_i = np.asarray(g_i, dtype=np.float64).reshape(-1)
    g_j = np.asarray(g_j, dtype=np.float64).reshape(-1)
    if g_i.shape != g_j.shape or g_i.size == 0:
        raise ValueError(f"gradients must be non-empty and equal length, got {g_i.size} and {g_j.size}")
    dot = float(g_i @ g_j)
    ni, nj = float(np.linalg.norm(g_i)), float(np.linalg.norm(g_j))
    if ni == 0 and nj == 0:
        return None, dot
    if ni == 0 or nj == 0:
        return 0.0, dot
    return dot / (ni * nj), dot


@dataclass
class GradientConflictRecord:
    iteration: int
    pair: tuple[int, int]
    cos_phi: float | None
    taylor_delta: float
    eta: float


def shared_task_gradients(model: MultiTaskModel, losses: list[ad.Tensor]) -> list[np.ndarray]:
    """One backward pass per task loss, flattened over the shared adapter parameters."""
    shared = model.bank.shared
    names = sorted(shared)
    return [ad.flatten_grads(ad.backward(loss, shared), names) for loss in losses]


def conflict_records(iteration: int, grads: list[np.ndarray], eta: float) -> list[GradientConflictRecord]:
    records = []
    for i, j in itertools.combinations(range(len(grads)), 2):
        cos, dot = grad_conflict(grads[i], grads[j])
        records.append(GradientConflictRecord(iteration, (i, j), cos, -eta * dot, eta))
    return records


@dataclass
class ConflictReport:
    variant: str
    tasks: list[str]
    iterations: int
    records: list[GradientConflictRecord] = field(default_factory=list)

    def pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(range(len(self.tasks)), 2))

    def values(self, pair: tuple[int, int]) -> np.ndarray:
        return np.array([r.cos_phi for r in self.records if r.pair == pair and r.cos_phi is not None])

    def histogram(self, pair: tuple[int, int]) -> np.ndarray:
        counts, _ = np.histogram(np.clip(self.values(pair), -1.0, 1.0), bins=BIN_EDGES)
        return counts

    def positive_fraction(self, pair: tuple[int, int] | None = None) -> float:
        vals = self.values(pair) if pair is not None else np.array([r.cos_phi for r in self.records if r.cos_phi is not None])
        return float((vals > 0).mean()) if vals.size else float("nan")

    def null_records(self) -> int:
        return sum(r.cos_phi is None for r in self.records)


def conflict_histogram(cfg: ExperimentConfig, iterations: int | None = None) -> ConflictReport:
    """Train while recording pairwise cosine similarity of shared-parameter gradients.

    Each iteration runs one forward, one backward per task over the shared
    parameters, then the usual update from the summed loss.
    """
    cfg.validate()
    tc = cfg.training
    T = len(cfg.tasks)
    if T < 2:
        raise ConfigError(f"tasks.enabled: gradient conflict needs at least 2 tasks, got {T}")
    if cfg.model.variant not in ("vmt", "shared", "lite"):
        raise ConfigError(f"model.variant: gradient conflict needs shared adapter parameters, got {cfg.model.variant!r}")
    iterations = tc.iterations if iterations is None else iterations
    report = ConflictReport(cfg.model.variant, list(cfg.tasks), iterations)
    with ad.precision(tc.precision):
        model = MultiTaskModel(cfg.model, cfg.tasks, tc.seed)
        pool = make_dataset(train_seeds(tc.seed, tc.train_pool))
        rng = np.random.default_rng(tc.seed)
        optimizer = Adam(model.trainable(), tc.lr, (tc.beta1, tc.beta2), tc.adam_eps, tc.weight_decay)
        for it in range(iterations):
            batch = [pool[i] for i in rng.choice(len(pool), size=tc.batch_size, replace=False)]
            images, targets = collate(batch, cfg.tasks)
            lr = linear_lr(tc.lr, it, iterations)
            losses = task_losses(model, images, targets)
            report.records.extend(conflict_records(it, shared_task_gradients(model, losses), lr))
            total = None
            for w, loss in zip(cfg.weights, losses):
                term = ad.scale(loss, w)
                total = term if total is None else total + term
            optimizer.step(ad.backward(total, optimizer.params), lr)
    return report


def taylor_discrepancy(model: MultiTaskModel, images: np.ndarray, targets: dict, i: int, j: int, eta: float) -> float:
    """|[L_j(theta - eta g_i) - L_j(theta)] - (-eta g_i . g_j)| / eta over the shared parameters."""
    shared = model.bank.shared
    names = sorted(shared)
    losses = task_losses(model, images, targets)
    g_i = ad.backward(losses[i], shared)
    g_j = ad.backward(losses[j], shared)
    predicted = -eta * sum(float((g_i[n].astype(np.float64) * g_j[n]).sum()) for n in names)
    base = losses[j].item()
    saved = {n: shared[n].data.copy() for n in names}
    try:
        for n in names:
            shared[n].data = saved[n] - eta * g_i[n]
        moved = task_losses(model, images, targets)[j].item()
    finally:
        for n in names:
            shared[n].data = saved[n]
    return abs((moved - base) - predicted) / eta


# efficiency


@dataclass
class EfficiencyRow:
    variant: str
    num_tasks: int
    invocations: int
    wall_time: float
    adapter_overhead: float


def efficiency_probe(
    cfg: ModelConfig,
    task_counts: Sequence[int],
    variants: Sequence[str] = ("multiple", "shared", "vmt", "lite"),
    batch_size: int = 8,
    repeats: int = 20,
    warmup: int = 3,
    seed: int = 0,
) -> list[EfficiencyRow]:
    """Encoder-body invocations and median encoder wall time per forward.

    Configurations are timed round-robin so drift affects all of them alike.
    As with ``timeit``, the cyclic garbage collector is paused while timing.
    Adapter overhead is the median time minus that of the adapter-free encoder.
    """
    if not task_counts:
        raise ValueError("task_counts must be non-empty")
    encoder = Encoder(cfg)
    images = np.random.default_rng(seed).uniform(size=(batch_size, cfg.in_channels, cfg.image_size, cfg.image_size))
    setups = [("none", 1, None)]
    for variant in variants:
        for T in task_counts:
            setups.append((variant, T, build_adapter_bank(cfg.replace(variant=variant, num_tasks=T), seed=seed)))
    calls: dict[int, int] = {}
    times: dict[int, list[float]] = {k: [] for k in range(len(setups))}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for rep in range(warmup + repeats):
            for k, (_, T, bank) in enumerate(setups):
                before = encoder.body_calls
                start = time.perf_counter()
                encoder.forward(images, bank, num_tasks=T)
                elapsed = time.perf_counter() - start
                calls[k] = encoder.body_calls - before
                if rep >= warmup:
                    times[k].append(elapsed)
            gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()
    base = statistics.median(times[0])
    rows = []
    for k, (variant, T, _) in enumerate(setups[1:], start=1):
        med = statistics.median(times[k])
        rows.append(EfficiencyRow(variant, T, calls[k], med, med - base))
    return rows
