"""rattention_layer.py
The RAttention token mixer: one set of q/k/v/o projections feeding a sliding
window branch and a residual linear attention branch, each passed through its
own RMS norm before they are summed. The plain sliding-window, linear-only and
global layers of the model stack are built from the same pieces."""

from __future__ import annotations
from dataclasses import dataclass
from enum import StrEnum
from typing import Dict, List, Sequence, Set, Tuple
import numpy as np

from tensor import Tape, Tensor, backward, rms_norm
from attention import (
    AttnConfig,
    GeometryError,
    apply_rope,
    causal_attention,
    gqa_expand,
    sliding_window_attention,
)
from linear_attention import CheckpointSchedule, chunkwise_linear_attention
from residual_linear_attention import RlaParams, rla_chunkwise


class LocalVariant(StrEnum):
    """What a local layer runs."""

    SWA_ONLY = "swa_only"
    RATTENTION = "rattention"
    LINEAR_ONLY = "linear_only"


class Branch(StrEnum):
    SWA = "swa"
    RLA = "rla"


@dataclass
class RattentionParams:
    """Weights of one attention layer. Branch norm scales are None where the layer has no such branch."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    rms_swa_scale: Tensor | None = None
    rms_rla_scale: Tensor | None = None
    q_norm_scale: Tensor | None = None
    k_norm_scale: Tensor | None = None

    class Fields(StrEnum):
        W_Q = "w_q"
        W_K = "w_k"
        W_V = "w_v"
        W_O = "w_o"
        RMS_SWA_SCALE = "rms_swa_scale"
        RMS_RLA_SCALE = "rms_rla_scale"
        Q_NORM_SCALE = "q_norm_scale"
        K_NORM_SCALE = "k_norm_scale"

    PROJECTIONS = (Fields.W_Q, Fields.W_K, Fields.W_V, Fields.W_O)

    @classmethod
    def init(
        cls,
        cfg: AttnConfig,
        variant: LocalVariant | None,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> RattentionParams:
        """Draws projections from N(0, 1/fan_in) and sets every norm scale to one.

        Args:
            cfg (AttnConfig): Layer geometry.
            variant (LocalVariant | None): Local layer variant, or None for a global layer.
            rng (np.random.Generator): Source of the random weights.
            dtype (optional): Parameter precision. Defaults to np.float32.
        """
        inner = cfg.n_heads * cfg.head_dim
        kv_inner = cfg.n_kv_heads * cfg.head_dim

        def weight(fan_in: int, fan_out: int) -> Tensor:
            return Tensor(
                rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out)),
                requires_grad=True,
                dtype=dtype,
            )

        def ones(*shape: int) -> Tensor:
            return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)

        branch_shape = (cfg.n_heads, cfg.head_dim) if cfg.use_group_norm else (cfg.head_dim,)
        uses_swa_norm = variant == LocalVariant.RATTENTION
        uses_rla_norm = variant in (LocalVariant.RATTENTION, LocalVariant.LINEAR_ONLY)
        return RattentionParams(
            w_q=weight(cfg.d_model, inner),
            w_k=weight(cfg.d_model, kv_inner),
            w_v=weight(cfg.d_model, kv_inner),
            w_o=weight(inner, cfg.d_model),
            rms_swa_scale=ones(*branch_shape) if uses_swa_norm else None,
            rms_rla_scale=ones(*branch_shape) if uses_rla_norm else None,
            q_norm_scale=ones(cfg.head_dim) if cfg.use_qk_norm else None,
            k_norm_scale=ones(cfg.head_dim) if cfg.use_qk_norm else None,
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Present parameters in a fixed order."""
        named = [(name.value, getattr(self, name.value)) for name in self.Fields]
        return [(name, tensor) for name, tensor in named if tensor is not None]


@dataclass
class ParamCount:
    projection_params: int
    norm_params: int
    qk_norm_params: int = 0


def param_count(cfg: AttnConfig, variant: LocalVariant = LocalVariant.RATTENTION) -> ParamCount:
    """Parameter count of one local layer, projections and norms reported separately.

    The projections are the same for every variant; only the branch norms differ.
    """
    inner = cfg.n_heads * cfg.head_dim
    kv_inner = cfg.n_kv_heads * cfg.head_dim
    projections = cfg.d_model * inner + 2 * cfg.d_model * kv_inner + inner * cfg.d_model
    per_norm = inner if cfg.use_group_norm else cfg.head_dim
    branch_norms = {
        LocalVariant.SWA_ONLY: 0,
        LocalVariant.RATTENTION: 2,
        LocalVariant.LINEAR_ONLY: 1,
    }[variant]
    return ParamCount(
        projection_params=projections,
        norm_params=branch_norms * per_norm,
        qk_norm_params=2 * cfg.head_dim if cfg.use_qk_norm else 0,
    )


def _check_geometry(x: Tensor, params: RattentionParams, cfg: AttnConfig) -> None:
    inner = cfg.n_heads * cfg.head_dim
    kv_inner = cfg.n_kv_heads * cfg.head_dim
    expected = {
        "w_q": (cfg.d_model, inner),
        "w_k": (cfg.d_model, kv_inner),
        "w_v": (cfg.d_model, kv_inner),
        "w_o": (inner, cfg.d_model),
    }
    for name, shape in expected.items():
        actual = getattr(params, name).shape
        if actual != shape:
            raise GeometryError(f"{name} has shape {actual}, the config needs {shape}.")
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise GeometryError(f"Expected input [b, L, {cfg.d_model}], got {x.shape}.")


def _project(
    x: Tensor, params: RattentionParams, cfg: AttnConfig
) -> Tuple[Tensor, Tensor, Tensor]:
    b, length, _ = x.shape

    def heads(projected: Tensor, n: int) -> Tensor:
        return projected.reshape(b, length, n, cfg.head_dim).transpose(0, 2, 1, 3)

    q = heads(x @ params.w_q, cfg.n_heads)
    k = heads(x @ params.w_k, cfg.n_kv_heads)
    v = heads(x @ params.w_v, cfg.n_kv_heads)
    if params.q_norm_scale is not None:
        q = rms_norm(q, params.q_norm_scale, cfg.norm_eps)
    if params.k_norm_scale is not None:
        k = rms_norm(k, params.k_norm_scale, cfg.norm_eps)
    return q, k, v


def _merge_heads(o: Tensor, params: RattentionParams) -> Tensor:
    b, h, length, d = o.shape
    return o.transpose(0, 2, 1, 3).reshape(b, length, h * d) @ params.w_o


def _branch_norm(o: Tensor, scale: Tensor, cfg: AttnConfig) -> Tensor:
    if scale.ndim == 2:
        scale = scale.reshape(cfg.n_heads, 1, cfg.head_dim)
    return rms_norm(o, scale, cfg.norm_eps)


def _rope(q: Tensor, k: Tensor, cfg: AttnConfig, positions: Sequence[int]) -> Tuple[Tensor, Tensor]:
    return apply_rope(q, positions, cfg.rope_theta), apply_rope(k, positions, cfg.rope_theta)


def swa_branch(
    q: Tensor, k: Tensor, v: Tensor, cfg: AttnConfig, positions: Sequence[int]
) -> Tensor:
    if cfg.use_rope:
        q, k = _rope(q, k, cfg, positions)
    return sliding_window_attention(
        q, gqa_expand(k, cfg.n_heads), gqa_expand(v, cfg.n_heads), cfg.window
    )


def rla_branch(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: AttnConfig,
    positions: Sequence[int],
    schedule: CheckpointSchedule | None = None,
) -> Tensor:
    """Residual readout over the tokens outside the window. Reads pre-RoPE q/k unless rla_uses_rope."""
    if cfg.use_rope and cfg.rla_uses_rope:
        q, k = _rope(q, k, cfg, positions)
    params = RlaParams(cfg.window, _effective_chunk(cfg), cfg.inclusive_readout)
    return rla_chunkwise(
        q,
        k,
        v,
        params,
        schedule=schedule if schedule is not None else CheckpointSchedule(cfg.save_stride),
        feature_map=cfg.feature_map,
    )


def _effective_chunk(cfg: AttnConfig) -> int:
    # The recurrent mode is the chunkwise kernel at one token per chunk.
    return cfg.chunk_size if cfg.chunkwise else 1


def _positions(x: Tensor, positions: Sequence[int] | None) -> np.ndarray:
    return np.arange(x.shape[1]) if positions is None else np.asarray(positions)


def rattention_branches(
    x: Tensor,
    params: RattentionParams,
    cfg: AttnConfig,
    positions: Sequence[int] | None = None,
    schedule: CheckpointSchedule | None = None,
) -> Dict[Branch, Tensor]:
    """The two normalised branch outputs [b, h, L, d], before they are summed and projected."""
    _check_geometry(x, params, cfg)
    if cfg.chunkwise and cfg.window % cfg.chunk_size:
        raise GeometryError(
            f"The window ({cfg.window}) must be a multiple of the chunk size ({cfg.chunk_size}) in chunkwise mode."
        )
    if params.rms_swa_scale is None or params.rms_rla_scale is None:
        raise GeometryError("A RAttention layer needs both branch norm scales.")
    positions = _positions(x, positions)
    q, k, v = _project(x, params, cfg)
    return {
        Branch.SWA: _branch_norm(swa_branch(q, k, v, cfg, positions), params.rms_swa_scale, cfg),
        Branch.RLA: _branch_norm(
            rla_branch(q, k, v, cfg, positions, schedule), params.rms_rla_scale, cfg
        ),
    }


def rattention_forward(
    x: Tensor,
    params: RattentionParams,
    cfg: AttnConfig,
    positions: Sequence[int] | None = None,
    schedule: CheckpointSchedule | None = None,
) -> Tensor:
    """o = W_o concat_heads(rms(o_swa) + rms(o_rla)).

    Raises:
        GeometryError: If the weights do not match cfg, or w % C != 0 in chunkwise mode.
    """
    branches = rattention_branches(x, params, cfg, positions, schedule)
    return _merge_heads(branches[Branch.SWA] + branches[Branch.RLA], params)


def swa_forward(
    x: Tensor, params: RattentionParams, cfg: AttnConfig, positions: Sequence[int] | None = None
) -> Tensor:
    """Plain sliding-window attention layer (no branch norm)."""
    _check_geometry(x, params, cfg)
    q, k, v = _project(x, params, cfg)
    return _merge_heads(swa_branch(q, k, v, cfg, _positions(x, positions)), params)


def linear_only_forward(
    x: Tensor,
    params: RattentionParams,
    cfg: AttnConfig,
    positions: Sequence[int] | None = None,
    schedule: CheckpointSchedule | None = None,
) -> Tensor:
    """Linear attention over the whole prefix, rms(phi(q) S_t), with no window branch."""
    _check_geometry(x, params, cfg)
    if params.rms_rla_scale is None:
        raise GeometryError("A linear-only layer needs the linear branch norm scale.")
    q, k, v = _project(x, params, cfg)
    if cfg.use_rope and cfg.rla_uses_rope:
        q, k = _rope(q, k, cfg, _positions(x, positions))
    o, _ = chunkwise_linear_attention(
        q,
        k,
        v,
        _effective_chunk(cfg),
        schedule=schedule if schedule is not None else CheckpointSchedule(cfg.save_stride),
        feature_map=cfg.feature_map,
    )
    return _merge_heads(_branch_norm(o, params.rms_rla_scale, cfg), params)


def global_forward(x: Tensor, params: RattentionParams, cfg: AttnConfig) -> Tensor:
    """Full causal attention without rotary embeddings."""
    _check_geometry(x, params, cfg)
    q, k, v = _project(x, params, cfg)
    return _merge_heads(
        causal_attention(q, gqa_expand(k, cfg.n_heads), gqa_expand(v, cfg.n_heads)), params
    )


def local_forward(
    x: Tensor,
    params: RattentionParams,
    cfg: AttnConfig,
    variant: LocalVariant,
    positions: Sequence[int] | None = None,
) -> Tensor:
    match variant:
        case LocalVariant.RATTENTION:
            return rattention_forward(x, params, cfg, positions)
        case LocalVariant.SWA_ONLY:
            return swa_forward(x, params, cfg, positions)
        case LocalVariant.LINEAR_ONLY:
            return linear_only_forward(x, params, cfg, positions)
        case _:
            raise ValueError(f"Unknown local variant '{variant}'.")


def branch_parameter_usage(
    x: Tensor, params: RattentionParams, cfg: AttnConfig
) -> Dict[str, Set[Branch]]:
    """Which branches each parameter influences, read off the gradients of each branch's projected output."""
    usage: Dict[str, Set[Branch]] = {name: set() for name, _ in params.named_parameters()}
    for branch in Branch:
        with Tape() as tape:
            branches = rattention_branches(x, params, cfg)
            loss = _merge_heads(branches[branch], params).sum()
            grads = backward(tape, loss)
        for name, tensor in params.named_parameters():
            grad = grads.get(tensor)
            if grad is not None and np.any(grad != 0):
                usage[name].add(branch)
        tape.reset()
    return usage
