"""Multi-task model assembly, losses, Adam, training loop and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank, build_adapter_bank
from .autodiff import NumericError, Tensor
from .config import ExperimentConfig, ModelConfig
from .data import TASKS, Sample, collate, make_dataset
from .decoder import Decoder, task_seed
from .encoder import Encoder
from .metrics import angular_errors, confusion_matrix, delta_up, miou

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_000
NORMAL_EPS = 1e-6


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite values at iteration {iteration}: {detail}")
        self.iteration = iteration


class MultiTaskModel:
    """Frozen encoder, an adapter bank and one decoder per task."""

    def __init__(self, cfg: ModelConfig, tasks: Sequence[str], seed: int):
        self.cfg = cfg
        self.tasks = list(tasks)
        self.encoder = Encoder(cfg)
        self.bank: AdapterBank = build_adapter_bank(cfg.replace(num_tasks=len(self.tasks)), seed=seed)
        self.decoders = [
            Decoder(cfg, TASKS[t].output_channels, task_seed(seed, t), prefix=f"decoder{i + 1}.{t}") for i, t in enumerate(self.tasks)
        ]

    def decoder_params(self) -> dict[str, Tensor]:
        out = {}
        for dec in self.decoders:
            out.update(dec.params)
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {**self.bank.parameters(), **self.decoder_params()}

    def forward(self, images: np.ndarray) -> list[Tensor]:
        feats = self.encoder.forward(images, self.bank, num_tasks=len(self.tasks))
        return [dec(f) for dec, f in zip(self.decoders, feats.per_task)]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"backbone.{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({k: p.data for k, p in self.trainable().items()})
        return state


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy; logits [..., C], integer target [...]."""
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[target]
    return ad.neg(ad.mean(ad.tsum(ad.log_softmax(logits, axis=-1) * onehot, axis=-1)))


def cosine_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean of 1 - <pred/|pred|, target> over pixels."""
    norm = ad.sqrt(ad.tsum(pred * pred, axis=-1, keepdims=True) + NORMAL_EPS)
    cos = ad.tsum((pred / norm) * target.astype(pred.dtype), axis=-1)
    return ad.mean(1.0 - cos)


def task_loss(task: str, logits: Tensor, target: np.ndarray) -> Tensor:
    if TASKS[task].metric == "miou":
        return cross_entropy(logits, target)
    return cosine_loss(logits, target)


def task_losses(model: MultiTaskModel, images: np.ndarray, targets: dict[str, np.ndarray]) -> list[Tensor]:
    outputs = model.forward(images)
    return [task_loss(t, out, targets[t]) for t, out in zip(model.tasks, outputs)]


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            if lr == 0:
                continue
            update = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


@dataclass
class TaskLoss:
    per_task: list[float]
    total: float


def linear_lr(base: float, iteration: int, total: int) -> float:
    return base * (1.0 - iteration / total) if total else base


def multitask_step(
    model: MultiTaskModel,
    images: np.ndarray,
    targets: dict[str, np.ndarray],
    optimizer: Adam,
    lr: float,
    weights: Sequence[float] | None = None,
) -> TaskLoss:
    """Forward all tasks, sum weighted losses, one Adam update of trainable leaves."""
    weights = weights or [1.0] * len(model.tasks)
    losses = task_losses(model, images, targets)
    total = None
    for w, loss in zip(weights, losses):
        term = ad.scale(loss, w)
        total = term if total is None else total + term
    grads = ad.backward(total, optimizer.params)
    optimizer.step(grads, lr)
    return TaskLoss([loss.item() for loss in losses], total.item())


def evaluate(model: MultiTaskModel, samples: list[Sample], batch_size: int = 16) -> list[float]:
    """Per-task metric aligned with ``model.tasks``: mIoU in [0, 1], or mean angular error in degrees."""
    if not samples:
        raise ValueError("evaluate needs a non-empty eval set")
    confs = [np.zeros((TASKS[t].output_channels,) * 2, dtype=np.int64) for t in model.tasks]
    angle_sum = [0.0] * len(model.tasks)
    pixels = 0
    for start in range(0, len(samples), batch_size):
        images, targets = collate(samples[start : start + batch_size], model.tasks)
        outputs = model.forward(images)
        pixels += targets[model.tasks[0]].shape[0] * images.shape[2] * images.shape[3]
        for i, (task, out) in enumerate(zip(model.tasks, outputs)):
            if TASKS[task].metric == "miou":
                confs[i] += confusion_matrix(out.data.argmax(axis=-1), targets[task], TASKS[task].output_channels)
            else:
                angle_sum[i] += float(angular_errors(out.data.astype(np.float64), targets[task]).sum())
    return [miou(confs[i]) if TASKS[t].metric == "miou" else angle_sum[i] / pixels for i, t in enumerate(model.tasks)]


def train_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def eval_seeds(count: int) -> list[int]:
    return [EVAL_SEED_OFFSET + i for i in range(count)]


@dataclass
class RunResult:
    model: MultiTaskModel
    metrics: list[float]
    loss_history: list[list[float]]
    epochs: list[dict] = field(default_factory=list)

    @property
    def total_history(self) -> list[float]:
        return [sum(row) for row in self.loss_history]


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = max(1, min(window, len(values)))
    return np.convolve(values, np.ones(window) / window, mode="valid")


def run_training(cfg: ExperimentConfig, variant: str | None = None, eval_set: list[Sample] | None = None) -> RunResult:
    """Train one regime end to end and evaluate it on the fixed eval set."""
    if variant is not None:
        cfg = cfg.replace(model=cfg.model.replace(variant=variant))
    cfg.validate()
    tc = cfg.training
    with ad.precision(tc.precision):
        model = MultiTaskModel(cfg.model, cfg.tasks, tc.seed)
        pool = make_dataset(train_seeds(tc.seed, tc.train_pool))
        rng = np.random.default_rng(tc.seed)
        optimizer = Adam(model.trainable(), tc.lr, (tc.beta1, tc.beta2), tc.adam_eps, tc.weight_decay)
        history: list[list[float]] = []
        epochs: list[dict] = []
        for it in range(tc.iterations):
            batch = [pool[i] for i in rng.choice(len(pool), size=tc.batch_size, replace=False)]
            images, targets = collate(batch, cfg.tasks)
            try:
                step = multitask_step(model, images, targets, optimizer, linear_lr(tc.lr, it, tc.iterations), cfg.weights)
            except NumericError as exc:
                raise TrainingAborted(it, str(exc)) from exc
            if not np.isfinite(step.total):
                raise TrainingAborted(it, f"loss {step.total}")
            history.append(step.per_task)
            if (it + 1) % tc.log_every == 0 or it + 1 == tc.iterations:
                chunk = np.asarray(history[len(history) - ((it % tc.log_every) + 1) :])
                epochs.append({"iteration": it + 1, "losses": [float(v) for v in chunk.mean(axis=0)]})
                log.info("iter %d losses %s", it + 1, epochs[-1]["losses"])
        if eval_set is None:
            eval_set = make_dataset(eval_seeds(tc.eval_size))
        metrics = evaluate(model, eval_set)
    return RunResult(model, metrics, history, epochs)


def directions(tasks: Sequence[str]) -> list[bool]:
    return [TASKS[t].higher_is_better for t in tasks]


def run_delta_up(tasks: Sequence[str], metrics: Sequence[float], baseline: Sequence[float]) -> float:
    return delta_up(metrics, baseline, directions(tasks))
