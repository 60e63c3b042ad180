"""training.py
Desk-scale training on the recall task: RMSProp with momentum, global-norm
clipping, periodic evaluation and checkpoints, and length-generalization
reports."""

from __future__ import annotations
from dataclasses import dataclass, fields, replace
from enum import StrEnum
import logging
import os
from typing import Any, Dict, List, Sequence, Tuple
import numpy as np
import pandas as pd

from tensor import NonFiniteError, Tape, Tensor, backward
from model import IGNORE_INDEX, Model, cross_entropy_loss, model_forward
from recall_task import RecallBatch, RecallTask, gen_recall_batch
from save_load import CheckpointLoader, TableLoader

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1_000_003  # Evaluation batches come from a disjoint seed stream.
METRICS_FILENAME = "metrics.csv"


class DivergenceError(RuntimeError):
    """The training loss became NaN or Inf."""

    pass


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-4
    decay: float = 0.99
    momentum: float = 0.9
    eps: float = 1e-8
    clip: float = 1.0
    eval_interval: int = 100
    eval_batches: int = 4
    checkpoint_interval: int = 0  # 0 checkpoints at every evaluation.

    class Fields(StrEnum):
        STEPS = "steps"
        BATCH_SIZE = "batch_size"
        LR = "lr"
        DECAY = "decay"
        MOMENTUM = "momentum"
        EPS = "eps"
        CLIP = "clip"
        EVAL_INTERVAL = "eval_interval"
        EVAL_BATCHES = "eval_batches"
        CHECKPOINT_INTERVAL = "checkpoint_interval"

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1 or self.eval_batches < 1:
            raise ValueError("steps must be non-negative; batch_size, eval_interval and eval_batches positive.")
        if self.lr <= 0 or self.eps <= 0 or self.clip <= 0:
            raise ValueError("lr, eps and clip must be positive.")
        if not (0 <= self.decay < 1 and 0 <= self.momentum < 1):
            raise ValueError("decay and momentum must lie in [0, 1).")

    def to_dict(self) -> Dict[TrainConfig.Fields, Any]:
        return {self.Fields(f.name): getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, dt: Dict[str, Any]) -> TrainConfig:
        return TrainConfig(**{cls.Fields(key).value: value for key, value in dt.items()})


@dataclass
class OptimState:
    square_avg: List[np.ndarray]
    momentum_buffer: List[np.ndarray]
    step: int = 0


class RMSPropMomentum:
    """RMSProp with a momentum buffer on the normalised step:
        v = decay v + (1 - decay) g^2
        m = momentum m + g / (sqrt(v) + eps)
        p = p - lr m
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 3e-4,
        decay: float = 0.99,
        momentum: float = 0.9,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.momentum = momentum
        self.eps = eps
        self.state = OptimState(
            square_avg=[np.zeros_like(p.data) for p in self.params],
            momentum_buffer=[np.zeros_like(p.data) for p in self.params],
        )

    @classmethod
    def from_config(cls, params: Sequence[Tensor], cfg: TrainConfig) -> RMSPropMomentum:
        return RMSPropMomentum(params, cfg.lr, cfg.decay, cfg.momentum, cfg.eps)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        """Updates every parameter in place, in parameter order."""
        assert len(grads) == len(self.params), "One gradient per parameter is needed."
        for p, g, square, buffer in zip(
            self.params, grads, self.state.square_avg, self.state.momentum_buffer
        ):
            square *= self.decay
            square += (1.0 - self.decay) * g * g
            buffer *= self.momentum
            buffer += g / (np.sqrt(square) + self.eps)
            p.data -= (self.lr * buffer).astype(p.dtype)
        self.state.step += 1


def clip_grad_norm(
    grads: Sequence[np.ndarray], max_norm: float
) -> Tuple[List[np.ndarray], float]:
    """Scales grads so their global L2 norm is at most max_norm. Returns the clipped list and the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if not np.isfinite(total):
        raise NonFiniteError("The gradient norm is not finite.")
    if total <= max_norm:
        return list(grads), total
    scale = max_norm / (total + 1e-12)
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads], total


def answer_accuracy(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> float:
    """Fraction of non-ignored positions whose argmax logit is the target."""
    keep = targets != ignore_index
    predictions = logits.data.argmax(axis=-1)
    return float(np.mean(predictions[keep] == targets[keep]))


def _eval_task(task: RecallTask) -> RecallTask:
    return replace(task, seed=task.seed + EVAL_SEED_OFFSET)


def evaluate(
    model: Model, task: RecallTask, batches: int = 4, batch_size: int = 16
) -> Tuple[float, float]:
    """Mean loss and answer accuracy over fresh evaluation batches."""
    eval_task = _eval_task(task)
    losses, accuracies = [], []
    for index in range(batches):
        batch = gen_recall_batch(eval_task, batch_size, index)
        logits = model_forward(batch.tokens, model)
        losses.append(cross_entropy_loss(logits, batch.targets).item())
        accuracies.append(answer_accuracy(logits, batch.targets))
    return float(np.mean(losses)), float(np.mean(accuracies))


def train_step(
    model: Model, optimizer: RMSPropMomentum, batch: RecallBatch, clip: float
) -> float:
    """One forward / backward / update. Returns the batch loss."""
    params = model.parameters()
    with Tape() as tape:
        logits = model_forward(batch.tokens, model)
        loss = cross_entropy_loss(logits, batch.targets)
        grads = backward(tape, loss)
    clipped, _ = clip_grad_norm([grads.get(p, np.zeros_like(p.data)) for p in params], clip)
    optimizer.step(clipped)
    tape.reset()
    return loss.item()


@dataclass
class MetricRow:
    step: int
    loss: float
    accuracy: float


def train(
    model: Model,
    task: RecallTask,
    cfg: TrainConfig,
    out_dir: str | None = None,
) -> pd.DataFrame:
    """Trains model on task and returns the metric trace (step, loss, accuracy).

    Evaluation runs at step 0, every eval_interval steps and after the last
    step. With out_dir the trace is written to metrics.csv and checkpoints to
    checkpoint_<step>.rattn.

    Raises:
        DivergenceError: If the loss or gradients become non-finite.
    """
    optimizer = RMSPropMomentum.from_config(model.parameters(), cfg)
    checkpoint_every = cfg.checkpoint_interval or cfg.eval_interval
    rows: List[MetricRow] = []

    def record(step: int) -> None:
        loss, accuracy = evaluate(model, task, cfg.eval_batches, cfg.batch_size)
        rows.append(MetricRow(step, loss, accuracy))
        logger.info(f"step {step:>6d}  loss {loss:.4f}  accuracy {accuracy:.3f}")

    record(0)
    for step in range(1, cfg.steps + 1):
        batch = gen_recall_batch(task, cfg.batch_size, batch_index=step)
        try:
            loss = train_step(model, optimizer, batch, cfg.clip)
        except NonFiniteError as error:
            raise DivergenceError(f"Training diverged at step {step}: {error}") from error
        if not np.isfinite(loss):
            raise DivergenceError(f"Training diverged at step {step}: the loss is {loss}.")
        logger.debug(f"step {step:>6d}  train loss {loss:.4f}")
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            record(step)
        if out_dir is not None and (step % checkpoint_every == 0 or step == cfg.steps):
            CheckpointLoader(
                os.path.join(out_dir, f"checkpoint_{step:06d}.rattn"), model, step
            ).save()

    trace = pd.DataFrame([vars(row) for row in rows], columns=["step", "loss", "accuracy"])
    if out_dir is not None:
        TableLoader(os.path.join(out_dir, METRICS_FILENAME), trace).save()
    return trace


def evaluate_length_generalization(
    model: Model,
    task: RecallTask,
    eval_lengths: Sequence[int],
    batches: int = 4,
    batch_size: int = 16,
) -> pd.DataFrame:
    """Answer accuracy at each evaluation length, as rows (length, variant, accuracy).

    Raises:
        ValueError: If an evaluation length is shorter than the training length.
    """
    rows: List[Dict[str, Any]] = []
    for length in eval_lengths:
        if length < task.seq_len:
            raise ValueError(
                f"Evaluation length {length} is shorter than the training length {task.seq_len}."
            )
        _, accuracy = evaluate(model, replace(task, seq_len=length), batches, batch_size)
        rows.append(
            {"length": length, "variant": model.cfg.local_variant.value, "accuracy": accuracy}
        )
        logger.info(f"length {length}: accuracy {accuracy:.3f} ({model.cfg.local_variant.value})")
    return pd.DataFrame(rows, columns=["length", "variant", "accuracy"])
