"""linear_attention.py
Un-normalised linear attention: the token recurrence S_t = S_{t-1} + phi(k_t)^T v_t
with readout o_t = phi(q_t) S_t, and its chunkwise-parallel form.

The chunkwise kernel keeps the recurrent state only every `save_stride` chunks
and rebuilds the others from the nearest saved state during backward. The same
kernel also serves residual linear attention by reading the state `lag` chunks
behind the query chunk."""

from __future__ import annotations
from dataclasses import dataclass, field
from enum import StrEnum
import itertools
from typing import Dict, Iterator, List, Tuple
import numpy as np

from tensor import ShapeError, Tensor, as_tensor, record_op


class FeatureMap(StrEnum):
    """Feature map phi applied to queries and keys. All three keep the head dimension."""

    SOFTMAX = "softmax"
    RELU = "relu"
    IDENTITY = "identity"


def phi_forward(x: np.ndarray, kind: FeatureMap | None) -> np.ndarray:
    """Applies the feature map over the last axis. None means the input is already mapped."""
    match kind:
        case FeatureMap.SOFTMAX:
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        case FeatureMap.RELU:
            return np.maximum(x, 0)
        case FeatureMap.IDENTITY | None:
            return x
        case _:
            raise ValueError(f"Unknown feature map '{kind}'.")


def phi_vjp(
    x: np.ndarray, y: np.ndarray, g: np.ndarray, kind: FeatureMap | None
) -> np.ndarray:
    """Pulls the gradient g on y = phi(x) back to x."""
    match kind:
        case FeatureMap.SOFTMAX:
            return y * (g - (g * y).sum(axis=-1, keepdims=True))
        case FeatureMap.RELU:
            return g * (x > 0)
        case FeatureMap.IDENTITY | None:
            return g
        case _:
            raise ValueError(f"Unknown feature map '{kind}'.")


def feature_map_apply(x: Tensor, fm: FeatureMap) -> Tensor:
    y = phi_forward(x.data, fm)

    def grad_fn(g: np.ndarray):
        return (phi_vjp(x.data, y, g, fm),)

    return record_op(f"feature_map[{fm.value}]", y, (x,), grad_fn)


@dataclass
class LinearState:
    """The matrix state S entering chunk `chunk_index`, shape [b, h_kv, d', d]."""

    s: np.ndarray
    chunk_index: int

    @property
    def nbytes(self) -> int:
        return self.s.nbytes


@dataclass
class CheckpointSchedule:
    """Which chunk states a chunkwise forward pass kept.

    Key j holds the state after j chunks have been absorbed (the state entering
    chunk j). Keys are the multiples of save_stride below the chunk count,
    i.e. the states produced by chunks whose index is -1 mod save_stride, with
    the zero state standing in for chunk -1."""

    save_stride: int = 1
    num_chunks: int = 0
    saved: Dict[int, LinearState] = field(default_factory=dict)
    run_id: int = 0

    class ScheduleError(RuntimeError):
        """A saved state is missing or the schedule no longer matches the recorded forward pass."""

        pass

    def __post_init__(self) -> None:
        if self.save_stride < 1:
            raise ValueError(f"save_stride must be at least 1, got {self.save_stride}.")

    def should_save(self, chunk_index: int) -> bool:
        return chunk_index % self.save_stride == 0

    def base_index(self, target_chunk: int) -> int:
        """The saved state a target state is rebuilt from."""
        return target_chunk - target_chunk % self.save_stride

    def expected_count(self) -> int:
        return -(-self.num_chunks // self.save_stride)

    def state_bytes(self) -> int:
        """Bytes held by the saved states."""
        return sum(state.nbytes for state in self.saved.values())

    def begin_run(self, num_chunks: int) -> int:
        """Clears the schedule for a new forward pass and returns the new run id."""
        self.saved.clear()
        self.num_chunks = num_chunks
        self.run_id = next(_run_ids)
        return self.run_id


_run_ids = itertools.count(1)


def _absorb(s: np.ndarray, kf_chunk: np.ndarray, v_chunk: np.ndarray) -> np.ndarray:
    # Single definition so recompute repeats the forward summation exactly.
    return s + np.swapaxes(kf_chunk, -1, -2) @ v_chunk


def _chunked(x: np.ndarray, chunk_size: int) -> np.ndarray:
    """Right-pads the sequence axis with zeros and splits it into [b, h, n, C, d]."""
    b, h, length, d = x.shape
    n = -(-length // chunk_size)
    pad = n * chunk_size - length
    if pad:
        x = np.concatenate([x, np.zeros((b, h, pad, d), dtype=x.dtype)], axis=2)
    return x.reshape(b, h, n, chunk_size, d)


def _grouped(x: np.ndarray, h_kv: int) -> np.ndarray:
    """[b, h, ...] -> [b, h_kv, h / h_kv, ...]; query head j belongs to kv head j // group."""
    return x.reshape(x.shape[0], h_kv, x.shape[1] // h_kv, *x.shape[2:])


def query_states(s: np.ndarray, qf: Tensor | np.ndarray) -> np.ndarray:
    """Repeats kv-head states [b, h_kv, d', d] for each query head of qf."""
    group = qf.shape[1] // s.shape[1]
    return np.repeat(s, group, axis=1) if group > 1 else s


@dataclass
class ChunkwiseContext:
    """What the chunkwise backward needs from its forward pass. q_chunks is [b, h_kv, group, n, C, d']."""

    q_chunks: np.ndarray
    k_chunks: np.ndarray
    v_chunks: np.ndarray
    mask: np.ndarray
    lag: int
    feature_map: FeatureMap | None
    schedule: CheckpointSchedule
    run_id: int
    length: int

    @property
    def num_chunks(self) -> int:
        return self.k_chunks.shape[2]


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    """Queries may have a multiple of the kv head count (grouped queries)."""
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError(
            f"Linear attention expects [b, h, L, d] inputs, got {q.shape}, {k.shape}, {v.shape}."
        )
    if (q.shape[0], q.shape[2], q.shape[3]) != (k.shape[0], k.shape[2], k.shape[3]):
        raise ShapeError(f"Query and key shapes differ: {q.shape} vs {k.shape}.")
    if q.shape[1] % k.shape[1]:
        raise ShapeError(f"{q.shape[1]} query heads cannot share {k.shape[1]} kv heads evenly.")
    if k.shape[:3] != v.shape[:3]:
        raise ShapeError(
            f"Values must share batch, head and length extents with the keys: {v.shape} vs {k.shape}."
        )


def chunkwise_linear_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    chunk_size: int,
    schedule: CheckpointSchedule | None = None,
    lag: int = 0,
    include_diagonal: bool = True,
    feature_map: FeatureMap | None = None,
    allow_padding: bool = True,
) -> Tuple[Tensor, CheckpointSchedule]:
    """Chunkwise linear attention with a lagged readout.

    For query chunk i and j = i - lag:
        O_[i] = Q_[i] S_[j] + ((Q_[i] K_[j]^T) * M) V_[j]
    where S_[j] is the state entering chunk j and M is lower-triangular
    (diagonal kept when include_diagonal). lag = 0 with the diagonal is plain
    linear attention; lag = w / C without the diagonal is the residual readout
    S_{t-w-1}. Query chunks with j < 0 are zero.

    Args:
        q (Tensor): Queries [b, h, L, d'] (raw when feature_map is given). h is a multiple of h_kv.
        k (Tensor): Keys [b, h_kv, L, d'] (raw when feature_map is given).
        v (Tensor): Values [b, h_kv, L, d].
        chunk_size (int): C.
        schedule (CheckpointSchedule | None, optional): Where to keep states; a fresh stride-1 schedule when None.
        lag (int, optional): Readout lag in chunks. Defaults to 0.
        include_diagonal (bool, optional): Whether the intra-chunk mask keeps the diagonal. Defaults to True.
        feature_map (FeatureMap | None, optional): Applied per chunk inside the kernel. Defaults to None (inputs already mapped).
        allow_padding (bool, optional): Right-pad L up to a multiple of C with zero tokens. Defaults to True.

    Raises:
        ShapeError: On inconsistent shapes, or L % C != 0 with padding disabled.
        ValueError: On a non-positive chunk size or negative lag.

    Returns:
        Tuple[Tensor, CheckpointSchedule]: Outputs [b, h, L, d] and the filled schedule.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_qkv(q, k, v)
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be at least 1, got {chunk_size}.")
    if lag < 0:
        raise ValueError(f"The readout lag must not be negative, got {lag}.")
    length = q.shape[2]
    if length % chunk_size and not allow_padding:
        raise ShapeError(
            f"Sequence length {length} is not a multiple of the chunk size {chunk_size}."
        )
    schedule = schedule if schedule is not None else CheckpointSchedule()

    kc = _chunked(k.data, chunk_size)
    vc = _chunked(v.data, chunk_size)
    b, h, n, _, dk = kc.shape
    qc = _grouped(_chunked(q.data, chunk_size), h)
    group = qc.shape[2]
    dv = vc.shape[-1]
    run_id = schedule.begin_run(n)
    mask = np.tril(np.ones((chunk_size, chunk_size), dtype=q.dtype), 0 if include_diagonal else -1)

    # One state per kv head; the query heads of a group read it together.
    s = np.zeros((b, h, dk, dv), dtype=np.result_type(kc, vc))
    out = np.zeros((b, h, group, n, chunk_size, dv), dtype=s.dtype)
    for j in range(n):
        if schedule.should_save(j):
            schedule.saved[j] = LinearState(s.copy(), j)
        kf = phi_forward(kc[:, :, j], feature_map)
        i = j + lag
        if i < n:
            qf = phi_forward(qc[:, :, :, i], feature_map)
            scores = (qf @ np.swapaxes(kf, -1, -2)[:, :, None]) * mask
            out[:, :, :, i] = qf @ s[:, :, None] + scores @ vc[:, :, None, j]
        s = _absorb(s, kf, vc[:, :, j])

    ctx = ChunkwiseContext(qc, kc, vc, mask, lag, feature_map, schedule, run_id, length)

    def grad_fn(g: np.ndarray):
        return la_backward_checkpointed(ctx, g)

    def recompute(target_chunk: int) -> LinearState:
        return _recompute(ctx.schedule, kc, vc, target_chunk, feature_map)

    result = record_op(
        "chunkwise_linear_attention",
        out.reshape(b, h * group, n * chunk_size, dv)[:, :, :length],
        (q, k, v),
        grad_fn,
        recompute=recompute,
    )
    return result, schedule


def _recompute(
    schedule: CheckpointSchedule,
    kc: np.ndarray,
    vc: np.ndarray,
    target_chunk: int,
    feature_map: FeatureMap | None,
) -> LinearState:
    if not 0 <= target_chunk < schedule.num_chunks:
        raise IndexError(
            f"Chunk {target_chunk} is outside the {schedule.num_chunks} chunks of the last forward pass."
        )
    base = schedule.base_index(target_chunk)
    if base not in schedule.saved:
        raise CheckpointSchedule.ScheduleError(
            f"No saved state at chunk {base} to rebuild chunk {target_chunk} from."
        )
    if base == target_chunk:
        return schedule.saved[base]
    s = schedule.saved[base].s.copy()
    for j in range(base, target_chunk):
        s = _absorb(s, phi_forward(kc[:, :, j], feature_map), vc[:, :, j])
    return LinearState(s, target_chunk)


def recompute_state(
    schedule: CheckpointSchedule,
    kf: Tensor,
    v: Tensor,
    target_chunk: int,
    chunk_size: int,
    feature_map: FeatureMap | None = None,
) -> LinearState:
    """Rebuilds the state entering target_chunk from the nearest earlier saved state.

    The summation order matches the forward pass, so the result is bit-identical
    to a run that kept every state.

    Raises:
        IndexError: If target_chunk is outside the last forward pass.
        CheckpointSchedule.ScheduleError: If the base state is missing.
    """
    kf, v = as_tensor(kf), as_tensor(v)
    return _recompute(
        schedule, _chunked(kf.data, chunk_size), _chunked(v.data, chunk_size), target_chunk, feature_map
    )


def la_backward_checkpointed(
    ctx: ChunkwiseContext, d_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the chunkwise kernel with respect to q, k and v.

    Walks the saved-state blocks from last to first. Inside a block the states
    are rebuilt forward from the block's saved state, then the chunks are
    visited in reverse while G accumulates the gradient flowing into later
    states.

    Raises:
        CheckpointSchedule.ScheduleError: If the schedule was reused by another forward pass or lost a state.
    """
    schedule = ctx.schedule
    if schedule.run_id != ctx.run_id or schedule.num_chunks != ctx.num_chunks:
        raise CheckpointSchedule.ScheduleError(
            "The checkpoint schedule no longer matches this forward pass."
        )
    qc, kc, vc, mask, fm = ctx.q_chunks, ctx.k_chunks, ctx.v_chunks, ctx.mask, ctx.feature_map
    b, h, n, chunk_size, dk = kc.shape
    group = qc.shape[2]
    dv = vc.shape[-1]
    g_chunks = _grouped(_chunked(d_out, chunk_size), h)
    dq = np.zeros_like(qc)
    dk_all = np.zeros_like(kc)
    dv_all = np.zeros_like(vc)
    flow = np.zeros((b, h, dk, dv), dtype=np.result_type(kc, vc, d_out))

    stride = schedule.save_stride
    for base in reversed(range(0, n, stride)):
        end = min(base + stride, n)
        states: List[np.ndarray] = [_recompute(schedule, kc, vc, base, fm).s]
        for j in range(base, end - 1):
            states.append(_absorb(states[-1], phi_forward(kc[:, :, j], fm), vc[:, :, j]))

        for j in reversed(range(base, end)):
            kf = phi_forward(kc[:, :, j], fm)
            v_j = vc[:, :, j]
            d_kf = v_j @ np.swapaxes(flow, -1, -2)
            d_v = kf @ flow
            i = j + ctx.lag
            if i < n:
                # Query-side arrays carry the group axis; kv-side gradients sum over it.
                qf = phi_forward(qc[:, :, :, i], fm)
                g = g_chunks[:, :, :, i]
                kf_t = np.swapaxes(kf, -1, -2)[:, :, None]
                scores = (qf @ kf_t) * mask
                d_scores = (g @ np.swapaxes(v_j, -1, -2)[:, :, None]) * mask
                d_qf = g @ np.swapaxes(states[j - base], -1, -2)[:, :, None] + d_scores @ kf[:, :, None]
                d_kf = d_kf + (np.swapaxes(d_scores, -1, -2) @ qf).sum(axis=2)
                d_v = d_v + (np.swapaxes(scores, -1, -2) @ g).sum(axis=2)
                dq[:, :, :, i] = phi_vjp(qc[:, :, :, i], qf, d_qf, fm)
                flow = flow + (np.swapaxes(qf, -1, -2) @ g).sum(axis=2)
            dk_all[:, :, j] = phi_vjp(kc[:, :, j], kf, d_kf, fm)
            dv_all[:, :, j] = d_v

    def unchunk(x: np.ndarray, heads: int) -> np.ndarray:
        return x.reshape(b, heads, n * chunk_size, x.shape[-1])[:, :, : ctx.length]

    return unchunk(dq, h * group), unchunk(dk_all, h), unchunk(dv_all, h)


def la_chunkwise(
    qf: Tensor,
    kf: Tensor,
    v: Tensor,
    chunk_size: int,
    schedule: CheckpointSchedule | None = None,
    feature_map: FeatureMap | None = None,
    allow_padding: bool = True,
) -> Tuple[Tensor, CheckpointSchedule]:
    """Chunkwise linear attention: O_[i] = Q_[i] S_[i-1] + ((Q_[i] K_[i]^T) * M) V_[i]."""
    return chunkwise_linear_attention(
        qf,
        kf,
        v,
        chunk_size,
        schedule=schedule,
        lag=0,
        include_diagonal=True,
        feature_map=feature_map,
        allow_padding=allow_padding,
    )


def la_states(kf: Tensor, v: Tensor) -> Iterator[np.ndarray]:
    """Yields S_1, S_2, ... S_L of the token recurrence."""
    kf, v = as_tensor(kf), as_tensor(v)
    s = np.zeros(kf.shape[:2] + (kf.shape[-1], v.shape[-1]), dtype=np.result_type(kf.data, v.data))
    for t in range(kf.shape[2]):
        s = s + kf.data[:, :, t, :, None] * v.data[:, :, t, None, :]
        yield s


def la_recurrent(
    qf: Tensor, kf: Tensor, v: Tensor, keep_states: bool = False
) -> Tuple[Tensor, List[LinearState] | None]:
    """Token-by-token linear attention, o_t = phi(q_t) S_t. Inputs are already feature-mapped.

    Returns:
        Tuple[Tensor, List[LinearState] | None]: Outputs and, when keep_states, every S_t (chunk_index holds t).
    """
    qf, kf, v = as_tensor(qf), as_tensor(kf), as_tensor(v)
    _check_qkv(qf, kf, v)
    out = np.zeros(qf.shape[:3] + v.shape[3:], dtype=np.result_type(qf.data, v.data))
    states: List[LinearState] | None = [] if keep_states else None
    for t, s in enumerate(la_states(kf, v)):
        out[:, :, t] = (qf.data[:, :, t, None, :] @ query_states(s, qf))[:, :, 0]
        if states is not None:
            states.append(LinearState(s, t + 1))
    return Tensor(out), states
