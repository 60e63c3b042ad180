"""model.py
The local-global decoder stack: token embedding, pre-norm blocks whose
attention is local (RAttention, sliding window or linear-only) except on every
`local_global_period`-th layer, gated feed-forward layers and the LM head."""

from __future__ import annotations
import copy
from dataclasses import dataclass, field, fields
from enum import StrEnum
import logging
from typing import Any, Dict, List, Sequence, Tuple
import numpy as np

from tensor import ShapeError, Tensor, embedding, gelu, record_op, rms_norm, silu
from attention import AttnConfig, GeometryError
from rattention_layer import LocalVariant, RattentionParams, global_forward, local_forward

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


class LayerKind(StrEnum):
    LOCAL = "local"
    GLOBAL = "global"


class FfnKind(StrEnum):
    SWIGLU = "swiglu"
    GEGLU = "geglu"


def layer_kind(l: int, period: int) -> LayerKind:
    """Layer l (1-based) is global when l is a multiple of period. A period of 0 makes every layer local."""
    if l < 1:
        raise ValueError(f"Layers are numbered from 1, got {l}.")
    if period < 0:
        raise ValueError(f"The local/global period must not be negative, got {period}.")
    if period and l % period == 0:
        return LayerKind.GLOBAL
    return LayerKind.LOCAL


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 8
    ffn_dim: int = 128
    attn: AttnConfig = field(default_factory=AttnConfig)
    local_global_period: int = 4
    local_variant: LocalVariant = LocalVariant.RATTENTION
    ffn_kind: FfnKind = FfnKind.SWIGLU
    literal_residual: bool = False  # out = FFN(rms(Y)) + X instead of + Y.

    class Fields(StrEnum):
        VOCAB_SIZE = "vocab_size"
        D_MODEL = "d_model"
        N_LAYERS = "n_layers"
        FFN_DIM = "ffn_dim"
        ATTN = "attn"
        LOCAL_GLOBAL_PERIOD = "local_global_period"
        LOCAL_VARIANT = "local_variant"
        FFN_KIND = "ffn_kind"
        LITERAL_RESIDUAL = "literal_residual"

    def __post_init__(self) -> None:
        self.local_variant = LocalVariant(self.local_variant)
        self.ffn_kind = FfnKind(self.ffn_kind)
        if self.attn.d_model != self.d_model:
            raise GeometryError(
                f"The attention d_model ({self.attn.d_model}) differs from the model's ({self.d_model})."
            )
        if min(self.vocab_size, self.n_layers, self.ffn_dim) < 1:
            raise GeometryError("vocab_size, n_layers and ffn_dim must be positive.")
        if self.local_global_period < 0:
            raise GeometryError("local_global_period must not be negative.")

    def layer_kinds(self) -> List[LayerKind]:
        return [layer_kind(l, self.local_global_period) for l in range(1, self.n_layers + 1)]

    @property
    def n_global(self) -> int:
        return self.layer_kinds().count(LayerKind.GLOBAL)

    @property
    def n_local(self) -> int:
        return self.n_layers - self.n_global

    def to_dict(self) -> Dict[ModelConfig.Fields, Any]:
        result: Dict[ModelConfig.Fields, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, AttnConfig):
                value = value.to_dict()
            elif isinstance(value, StrEnum):
                value = value.value
            result[self.Fields(f.name)] = value
        return result

    @classmethod
    def from_dict(cls, dt: Dict[str, Any]) -> ModelConfig:
        values = {cls.Fields(key).value: value for key, value in dt.items()}
        attn = values.get(cls.Fields.ATTN)
        if isinstance(attn, dict):
            values[cls.Fields.ATTN.value] = AttnConfig.from_dict(attn)
        return ModelConfig(**values)


# Reference geometries. The vocabulary size is a placeholder.
REGISTERED_MODELS: Dict[str, ModelConfig] = {
    "3B": ModelConfig(
        vocab_size=32768,
        d_model=2048,
        n_layers=56,
        ffn_dim=6656,
        attn=AttnConfig(
            d_model=2048, n_heads=16, n_kv_heads=4, head_dim=128, window=512, chunk_size=256
        ),
    ),
    "12B": ModelConfig(
        vocab_size=32768,
        d_model=5120,
        n_layers=40,
        ffn_dim=16384,
        attn=AttnConfig(
            d_model=5120, n_heads=40, n_kv_heads=8, head_dim=128, window=512, chunk_size=256
        ),
    ),
}


def registered_model(name: str) -> ModelConfig:
    """A fresh copy of a reference geometry.

    Raises:
        KeyError: If the name is not registered.
    """
    if name not in REGISTERED_MODELS:
        raise KeyError(f"Unknown model '{name}'. Known models: {', '.join(REGISTERED_MODELS)}.")
    return copy.deepcopy(REGISTERED_MODELS[name])


@dataclass
class BlockParams:
    kind: LayerKind
    attn: RattentionParams
    attn_norm: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor

    @classmethod
    def init(
        cls, cfg: ModelConfig, kind: LayerKind, rng: np.random.Generator, dtype=np.float32
    ) -> BlockParams:
        variant = cfg.local_variant if kind == LayerKind.LOCAL else None

        def weight(fan_in: int, fan_out: int) -> Tensor:
            return Tensor(
                rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out)),
                requires_grad=True,
                dtype=dtype,
            )

        return BlockParams(
            kind=kind,
            attn=RattentionParams.init(cfg.attn, variant, rng, dtype),
            attn_norm=Tensor(np.ones(cfg.d_model), requires_grad=True, dtype=dtype),
            ffn_norm=Tensor(np.ones(cfg.d_model), requires_grad=True, dtype=dtype),
            w_gate=weight(cfg.d_model, cfg.ffn_dim),
            w_up=weight(cfg.d_model, cfg.ffn_dim),
            w_down=weight(cfg.ffn_dim, cfg.d_model),
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [(f"attn.{name}", tensor) for name, tensor in self.attn.named_parameters()]
        named += [
            ("attn_norm", self.attn_norm),
            ("ffn_norm", self.ffn_norm),
            ("w_gate", self.w_gate),
            ("w_up", self.w_up),
            ("w_down", self.w_down),
        ]
        return named


def ffn_forward(x: Tensor, params: BlockParams, kind: FfnKind) -> Tensor:
    """Gated feed-forward: (act(x W_gate) * x W_up) W_down with act SiLU or GELU."""
    gate = x @ params.w_gate
    activated = silu(gate) if kind == FfnKind.SWIGLU else gelu(gate)
    return (activated * (x @ params.w_up)) @ params.w_down


def block_forward(
    x: Tensor, params: BlockParams, cfg: ModelConfig, positions: Sequence[int] | None = None
) -> Tensor:
    """Y = Attention(rms(X)) + X, then FFN(rms(Y)) + Y (or + X when literal_residual)."""
    normed = rms_norm(x, params.attn_norm, cfg.attn.norm_eps)
    if params.kind == LayerKind.GLOBAL:
        attended = global_forward(normed, params.attn, cfg.attn)
    else:
        attended = local_forward(normed, params.attn, cfg.attn, cfg.local_variant, positions)
    y = attended + x
    residual = x if cfg.literal_residual else y
    return ffn_forward(rms_norm(y, params.ffn_norm, cfg.attn.norm_eps), params, cfg.ffn_kind) + residual


class Model:
    """Parameters of a full decoder stack."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> None:
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.embedding = Tensor(
            rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d_model)), requires_grad=True, dtype=dtype
        )
        self.blocks = [BlockParams.init(cfg, kind, rng, dtype) for kind in cfg.layer_kinds()]
        self.final_norm = Tensor(np.ones(cfg.d_model), requires_grad=True, dtype=dtype)
        self.lm_head = Tensor(
            rng.normal(0.0, cfg.d_model**-0.5, size=(cfg.d_model, cfg.vocab_size)),
            requires_grad=True,
            dtype=dtype,
        )
        logger.debug(
            f"Built a {cfg.n_layers}-layer model ({cfg.n_global} global) with {self.num_parameters()} parameters."
        )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Every parameter under a stable dotted name, in a fixed order."""
        named = [("embedding", self.embedding)]
        for index, block in enumerate(self.blocks):
            named += [(f"blocks.{index}.{name}", tensor) for name, tensor in block.named_parameters()]
        named += [("final_norm", self.final_norm), ("lm_head", self.lm_head)]
        return named

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copies arrays into the parameters in place.

        Raises:
            KeyError: If a parameter is missing from state or state has extra entries.
            ShapeError: If an array does not match its parameter's shape.
        """
        named = dict(self.named_parameters())
        missing = named.keys() - state.keys()
        extra = state.keys() - named.keys()
        if missing or extra:
            raise KeyError(
                f"State does not match the model: missing {sorted(missing)}, unexpected {sorted(extra)}."
            )
        for name, tensor in named.items():
            array = np.asarray(state[name])
            if array.shape != tensor.shape:
                raise ShapeError(f"'{name}' has shape {array.shape}, the model needs {tensor.shape}.")
            tensor.data[...] = array


def model_forward(
    tokens: np.ndarray, model: Model, positions: Sequence[int] | None = None
) -> Tensor:
    """Logits [b, L, vocab] for integer tokens [b, L].

    Raises:
        ValueError: If tokens is not 2-D or holds an id outside the vocabulary.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"Expected tokens of shape [b, L], got {tokens.shape}.")
    vocab = model.cfg.vocab_size
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(
            f"Token ids must lie in [0, {vocab}), got range [{tokens.min()}, {tokens.max()}]."
        )
    x = embedding(model.embedding, tokens)
    for block in model.blocks:
        x = block_forward(x, block, model.cfg, positions)
    return rms_norm(x, model.final_norm, model.cfg.attn.norm_eps) @ model.lm_head


def cross_entropy_loss(
    logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX
) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignore_index.

    Raises:
        ShapeError: If targets does not match the leading logits axes.
        ValueError: If every position is ignored.
        IndexError: If a kept target lies outside the vocabulary.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"Targets of shape {targets.shape} do not match logits {logits.shape}.")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("Every position is ignored, so the loss is undefined.")
    vocab = logits.shape[-1]
    kept = targets[keep]
    if kept.min() < 0 or kept.max() >= vocab:
        raise IndexError(f"Targets must lie in [0, {vocab}).")

    rows = logits.data[keep]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(count), kept]
    loss = np.asarray((log_z - picked).mean(), dtype=logits.dtype)

    def grad_fn(g: np.ndarray):
        probs = np.exp(shifted - log_z[:, None])
        probs[np.arange(count), kept] -= 1.0
        grad = np.zeros_like(logits.data)
        grad[keep] = probs * (g / count)
        return (grad,)

    return record_op("cross_entropy", loss, (logits,), grad_fn)
