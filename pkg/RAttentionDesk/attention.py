"""attention.py
Softmax attention primitives: causal and sliding-window attention, rotary
embeddings and grouped-query key/value sharing, plus the dense-mask oracle used
to test them."""

from __future__ import annotations
from dataclasses import dataclass, fields
from enum import StrEnum
from typing import Any, Dict, List, Sequence, Set
import numpy as np

from tensor import ShapeError, Tensor, matmul, record_op, softmax, swapaxes
from linear_attention import FeatureMap


class GeometryError(ValueError):
    """An attention geometry is internally inconsistent or does not match its parameters."""

    pass


@dataclass
class AttnConfig:
    """Geometry of one attention layer."""

    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    window: int = 16
    rope_theta: float = 5e5
    use_rope: bool = True
    feature_map: FeatureMap = FeatureMap.SOFTMAX
    chunk_size: int = 8
    save_stride: int = 1
    use_group_norm: bool = True
    use_qk_norm: bool = True
    rla_uses_rope: bool = False
    chunkwise: bool = True
    inclusive_readout: bool = False
    norm_eps: float = 1e-6

    class Fields(StrEnum):
        D_MODEL = "d_model"
        N_HEADS = "n_heads"
        N_KV_HEADS = "n_kv_heads"
        HEAD_DIM = "head_dim"
        WINDOW = "window"
        ROPE_THETA = "rope_theta"
        USE_ROPE = "use_rope"
        FEATURE_MAP = "feature_map"
        CHUNK_SIZE = "chunk_size"
        SAVE_STRIDE = "save_stride"
        USE_GROUP_NORM = "use_group_norm"
        USE_QK_NORM = "use_qk_norm"
        RLA_USES_ROPE = "rla_uses_rope"
        CHUNKWISE = "chunkwise"
        INCLUSIVE_READOUT = "inclusive_readout"
        NORM_EPS = "norm_eps"

    def __post_init__(self) -> None:
        self.feature_map = FeatureMap(self.feature_map)
        self.validate()

    def validate(self) -> None:
        """Checks the geometry invariants.

        Raises:
            GeometryError: If any invariant fails.
        """
        if min(self.n_heads, self.n_kv_heads, self.head_dim) < 1:
            raise GeometryError("Head counts and head_dim must be positive.")
        if self.n_heads % self.n_kv_heads:
            raise GeometryError(
                f"n_heads ({self.n_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})."
            )
        if self.d_model != self.n_heads * self.head_dim:
            raise GeometryError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim ({self.n_heads} * {self.head_dim})."
            )
        if self.window < 0:
            raise GeometryError(f"The window must not be negative, got {self.window}.")
        if self.chunk_size < 1 or self.save_stride < 1:
            raise GeometryError("chunk_size and save_stride must be at least 1.")
        if self.use_rope and self.head_dim % 2:
            raise GeometryError(f"Rotary embeddings need an even head_dim, got {self.head_dim}.")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> Dict[AttnConfig.Fields, Any]:
        return {
            self.Fields(f.name): (
                getattr(self, f.name).value
                if isinstance(getattr(self, f.name), StrEnum)
                else getattr(self, f.name)
            )
            for f in fields(self)
        }

    @classmethod
    def from_dict(cls, dt: Dict[str, Any]) -> AttnConfig:
        return AttnConfig(**{cls.Fields(key).value: value for key, value in dt.items()})


def rope_frequencies(head_dim: int, theta: float) -> np.ndarray:
    """theta^(-2i/d) for each rotated pair i."""
    return theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def apply_rope(x: Tensor, positions: Sequence[int], theta: float) -> Tensor:
    """Rotates each adjacent pair (x[2i], x[2i+1]) by position * theta^(-2i/d).

    Args:
        x (Tensor): [b, h, L, d] queries or keys.
        positions (Sequence[int]): Absolute 0-based position of each of the L rows.
        theta (float): Rotary base.

    Raises:
        ShapeError: If d is odd or positions does not have L entries.

    Returns:
        Tensor: The rotated tensor.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"Rotary embeddings need an even head dimension, got {d}.")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2],):
        raise ShapeError(
            f"Expected {x.shape[-2]} positions, got an array of shape {positions.shape}."
        )
    angles = positions[:, None].astype(np.float64) * rope_frequencies(d, theta)[None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def grad_fn(g: np.ndarray):
        g_even, g_odd = g[..., 0::2], g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = g_even * cos + g_odd * sin
        grad[..., 1::2] = -g_even * sin + g_odd * cos
        return (grad,)

    return record_op("rope", out, (x,), grad_fn)


def sliding_window_mask(length: int, window: int | None) -> np.ndarray:
    """Boolean [L, L] mask, True where query t may read key i: i <= t and (no window or i >= t - w)."""
    t = np.arange(length)[:, None]
    i = np.arange(length)[None, :]
    keep = i <= t
    if window is not None:
        keep &= i >= t - window
    return keep


def _check_attention_inputs(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 4 or q.shape[:3] != k.shape[:3] or k.shape[:3] != v.shape[:3]:
        raise ShapeError(
            f"Attention expects [b, h, L, d] inputs with shared b, h, L; got {q.shape}, {k.shape}, {v.shape}."
        )
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"Query and key head dims differ: {q.shape[-1]} vs {k.shape[-1]}.")


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d) masked) v."""
    _check_attention_inputs(q, k, v)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return masked_attention(q, k, v, sliding_window_mask(q.shape[2], None))


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, w: int) -> Tensor:
    """Causal attention restricted to keys i in [t - w, t] (at most w + 1 keys)."""
    if w < 0:
        raise ValueError(f"The window must not be negative, got {w}.")
    return masked_attention(q, k, v, sliding_window_mask(q.shape[2], w))


def gqa_expand(kv: Tensor, n_heads: int) -> Tensor:
    """Repeats each kv head n_heads / h_kv times so query head j reads kv head j // group.

    Raises:
        GeometryError: If n_heads is not a multiple of the kv head count.
    """
    h_kv = kv.shape[1]
    if n_heads % h_kv:
        raise GeometryError(f"{n_heads} query heads cannot share {h_kv} kv heads evenly.")
    group = n_heads // h_kv
    if group == 1:
        return kv

    def grad_fn(g: np.ndarray):
        b, _, length, d = g.shape
        return (g.reshape(b, h_kv, group, length, d).sum(axis=2),)

    return record_op("gqa_expand", np.repeat(kv.data, group, axis=1), (kv,), grad_fn)


def dense_attention_oracle(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, window: int | None = None
) -> np.ndarray:
    """Reference attention built from an explicit [L, L] additive mask, one query row at a time."""
    length, d = q.shape[2], q.shape[3]
    additive = np.full((length, length), -1e9)
    for t in range(length):
        start = 0 if window is None else max(0, t - window)
        additive[t, start : t + 1] = 0.0
    out = np.zeros(q.shape[:3] + (v.shape[-1],), dtype=np.result_type(q, v))
    for t in range(length):
        scores = np.einsum("bhd,bhld->bhl", q[:, :, t], k) / np.sqrt(d) + additive[t]
        weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
        weights /= weights.sum(axis=-1, keepdims=True)
        out[:, :, t] = np.einsum("bhl,bhld->bhd", weights, v)
    return out


def audit_window_tokens(length: int, window: int) -> List[Set[int]]:
    """The 1-based token indices each position's sliding window reads, from the kernel's own mask."""
    mask = sliding_window_mask(length, window)
    return [{int(i) + 1 for i in np.flatnonzero(mask[t])} for t in range(length)]
