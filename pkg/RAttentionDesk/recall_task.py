"""recall_task.py
Synthetic key-value recall where every answer sits further back than the
sliding window can see.

A sequence is laid out as
    k1 v1 k2 v2 ... kP vP  f f f ... f  ? kA ? kB ...
pairs first, filler tokens in the middle and queries (a marker then a key) at
the end. The target at each query key is the value paired with that key;
every other position is ignored by the loss."""

from __future__ import annotations
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from enum import StrEnum
import os
from typing import Any, Dict, List, Tuple
import numpy as np

from model import IGNORE_INDEX

QUERY_MARKER = 0


class InfeasibleTaskError(ValueError):
    """The sequence is too short or the vocabulary too small for the requested task."""

    pass


class TaskMode(StrEnum):
    STANDARD = "standard"  # Sources beyond one window of every query.
    BEYOND_RECEPTIVE_FIELD = "beyond_receptive_field"  # Beyond every stacked window.


@dataclass
class RecallTask:
    seed: int = 0
    seq_len: int = 256
    vocab: int = 64
    window: int = 16
    n_pairs: int = 1
    query_gap: int = 0  # Extra lower bound on answer - source distance; the mode's bound applies anyway.
    mode: TaskMode = TaskMode.STANDARD
    n_local_layers: int = 1
    n_fillers: int = 4

    class Fields(StrEnum):
        SEED = "seed"
        SEQ_LEN = "seq_len"
        VOCAB = "vocab"
        WINDOW = "window"
        N_PAIRS = "n_pairs"
        QUERY_GAP = "query_gap"
        MODE = "mode"
        N_LOCAL_LAYERS = "n_local_layers"
        N_FILLERS = "n_fillers"

    def __post_init__(self) -> None:
        self.mode = TaskMode(self.mode)

    @property
    def n_keys(self) -> int:
        return (self.vocab - 1 - self.n_fillers) // 2

    @property
    def n_values(self) -> int:
        return self.vocab - 1 - self.n_fillers - self.n_keys

    @property
    def filler_ids(self) -> np.ndarray:
        return np.arange(1, 1 + self.n_fillers)

    @property
    def key_ids(self) -> np.ndarray:
        start = 1 + self.n_fillers
        return np.arange(start, start + self.n_keys)

    @property
    def value_ids(self) -> np.ndarray:
        start = 1 + self.n_fillers + self.n_keys
        return np.arange(start, start + self.n_values)

    @property
    def min_gap(self) -> int:
        """Smallest allowed distance between a value token and the query key that asks for it."""
        reach = self.window
        if self.mode == TaskMode.BEYOND_RECEPTIVE_FIELD:
            reach = self.window * self.n_local_layers
        return max(self.query_gap, reach + 2)

    @property
    def chance(self) -> float:
        """Accuracy of guessing among the value tokens."""
        return 1.0 / self.n_values

    def validate(self) -> None:
        """Raises InfeasibleTaskError unless every generated sequence can honour min_gap."""
        if self.n_pairs < 1 or self.n_fillers < 1 or self.window < 0 or self.n_local_layers < 1:
            raise InfeasibleTaskError(
                "n_pairs, n_fillers and n_local_layers must be positive and the window non-negative."
            )
        if self.n_keys < self.n_pairs or self.n_values < 1:
            raise InfeasibleTaskError(
                f"A vocabulary of {self.vocab} has {self.n_keys} keys, fewer than the {self.n_pairs} pairs needed."
            )
        # Worst case: the last value against the first query key.
        closest = (self.seq_len - 2 * self.n_pairs + 1) - (2 * self.n_pairs - 1)
        if closest < self.min_gap:
            raise InfeasibleTaskError(
                f"seq_len {self.seq_len} leaves a gap of {closest} for {self.n_pairs} pairs, {self.min_gap} is needed."
            )

    def to_dict(self) -> Dict[RecallTask.Fields, Any]:
        return {
            self.Fields(f.name): (
                getattr(self, f.name).value
                if isinstance(getattr(self, f.name), StrEnum)
                else getattr(self, f.name)
            )
            for f in fields(self)
        }

    @classmethod
    def from_dict(cls, dt: Dict[str, Any]) -> RecallTask:
        return RecallTask(**{cls.Fields(key).value: value for key, value in dt.items()})


@dataclass
class RecallBatch:
    tokens: np.ndarray  # [b, L] int64
    targets: np.ndarray  # [b, L], IGNORE_INDEX except at query keys
    source_positions: np.ndarray  # [b, P] position of each answered value token
    answer_positions: np.ndarray  # [b, P] query key position predicting it

    @property
    def gaps(self) -> np.ndarray:
        return self.answer_positions - self.source_positions


def worker_count() -> int:
    """Threads for batch generation, capped by RATTN_THREADS."""
    limit = os.environ.get("RATTN_THREADS")
    return max(1, int(limit)) if limit else os.cpu_count() or 1


def _sequence(
    task: RecallTask, batch_index: int, element: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([task.seed, batch_index, element]))
    length, pairs = task.seq_len, task.n_pairs
    tokens = rng.choice(task.filler_ids, size=length)
    targets = np.full(length, IGNORE_INDEX, dtype=np.int64)

    keys = rng.choice(task.key_ids, size=pairs, replace=False)
    values = rng.choice(task.value_ids, size=pairs)
    tokens[0 : 2 * pairs : 2] = keys
    tokens[1 : 2 * pairs : 2] = values

    order = rng.permutation(pairs)
    query_start = length - 2 * pairs
    answer_positions = query_start + 1 + 2 * np.arange(pairs)
    tokens[query_start::2] = QUERY_MARKER
    tokens[answer_positions] = keys[order]
    targets[answer_positions] = values[order]
    source_positions = 1 + 2 * order
    return tokens.astype(np.int64), targets, source_positions, answer_positions


def gen_recall_batch(task: RecallTask, batch: int, batch_index: int = 0) -> RecallBatch:
    """Generates `batch` sequences. The same (task.seed, batch_index) always gives the same batch.

    Raises:
        InfeasibleTaskError: If the task geometry cannot place the pairs at the required gap.
    """
    task.validate()
    if batch < 1:
        raise InfeasibleTaskError(f"The batch size must be positive, got {batch}.")
    with ThreadPoolExecutor(max_workers=min(batch, worker_count())) as pool:
        rows: List[Tuple[np.ndarray, ...]] = list(
            pool.map(lambda element: _sequence(task, batch_index, element), range(batch))
        )
    tokens, targets, sources, answers = (np.stack(column) for column in zip(*rows))
    assert np.all(answers - sources >= task.min_gap), "A generated answer is too close to its source."
    return RecallBatch(tokens, targets, sources, answers)


def permute_source_values(batch: RecallBatch, task: RecallTask, seed: int = 0) -> RecallBatch:
    """A copy of batch whose pair values are redrawn (targets updated to match).

    Used to check that a model's answer logits do not depend on tokens outside its receptive field.
    """
    rng = np.random.default_rng(seed)
    tokens = batch.tokens.copy()
    targets = batch.targets.copy()
    for row in range(tokens.shape[0]):
        fresh = rng.choice(task.value_ids, size=batch.source_positions.shape[1])
        tokens[row, batch.source_positions[row]] = fresh
        targets[row, batch.answer_positions[row]] = fresh
    return RecallBatch(tokens, targets, batch.source_positions.copy(), batch.answer_positions.copy())
