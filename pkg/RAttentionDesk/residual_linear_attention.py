"""residual_linear_attention.py
Residual linear attention (RLA): linear attention that reads the state
S_{t-w-1}, i.e. exactly the tokens a sliding window of size w no longer sees."""

from __future__ import annotations
from dataclasses import dataclass
from typing import List, Set
import numpy as np

from tensor import Tensor, as_tensor
from linear_attention import (
    CheckpointSchedule,
    FeatureMap,
    chunkwise_linear_attention,
    la_states,
    query_states,
)


@dataclass
class RlaParams:
    """Window and chunking of the residual readout."""

    window: int
    chunk_size: int
    inclusive_readout: bool = False  # Read S_{t-w} instead of S_{t-w-1}.

    def __post_init__(self) -> None:
        if self.window < 0:
            raise ValueError(f"The window must not be negative, got {self.window}.")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be at least 1, got {self.chunk_size}.")

    @property
    def k_offset(self) -> int:
        """Readout lag in whole chunks."""
        return self.window // self.chunk_size

    def check_chunkwise(self) -> None:
        """Raises ValueError unless the window is a whole number of chunks."""
        if self.window % self.chunk_size:
            raise ValueError(
                f"The window ({self.window}) must be a multiple of the chunk size ({self.chunk_size}) for the chunkwise path."
            )


def rla_recurrent(
    qf: Tensor, kf: Tensor, v: Tensor, window: int, inclusive_readout: bool = False
) -> Tensor:
    """o_t = phi(q_t) S_{t-w-1} (1-based t, S_j = 0 for j <= 0). Inputs are already feature-mapped."""
    qf, kf, v = as_tensor(qf), as_tensor(kf), as_tensor(v)
    if window < 0:
        raise ValueError(f"The window must not be negative, got {window}.")
    length = qf.shape[2]
    lag = window if inclusive_readout else window + 1
    out = np.zeros(qf.shape[:3] + v.shape[3:], dtype=np.result_type(qf.data, v.data))
    # states[j] is S_{j+1} in 1-based terms.
    states = list(la_states(kf, v))
    for t in range(lag, length):
        out[:, :, t] = (qf.data[:, :, t, None, :] @ query_states(states[t - lag], qf))[:, :, 0]
    return Tensor(out)


def rla_chunkwise(
    qf: Tensor,
    kf: Tensor,
    v: Tensor,
    params: RlaParams,
    schedule: CheckpointSchedule | None = None,
    feature_map: FeatureMap | None = None,
) -> Tensor:
    """RLA in chunks: O_[i] = Q_[i] S_[i-k-1] + ((Q_[i] K_[i-k]^T) * M_strict) V_[i-k], k = w / C.

    Raises:
        ValueError: If the window is not a multiple of the chunk size.
    """
    params.check_chunkwise()
    out, _ = chunkwise_linear_attention(
        qf,
        kf,
        v,
        params.chunk_size,
        schedule=schedule,
        lag=params.k_offset,
        include_diagonal=params.inclusive_readout,
        feature_map=feature_map,
    )
    return out


def audit_readout_tokens(
    length: int, window: int, chunk_size: int | None = None
) -> List[Set[int]]:
    """The 1-based token indices whose outer products make up each position's readout state.

    Runs the real kernel on one-hot keys and values (d' = d = L, all-ones
    queries), so output t is the indicator vector of the tokens it read.
    chunk_size None uses the recurrent form.
    """
    eye = np.eye(length)[None, None]
    ones = np.ones((1, 1, length, length))
    if chunk_size is None:
        readout = rla_recurrent(ones, eye, eye, window).data
    else:
        readout = rla_chunkwise(ones, eye, eye, RlaParams(window, chunk_size)).data
    return [
        {int(i) + 1 for i in np.flatnonzero(readout[0, 0, t] != 0)} for t in range(length)
    ]
