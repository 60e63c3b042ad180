"""efficiency.py
Analytical decode cost of local-global models: per-layer KV cache accounting
and the step-time approximation

    T = B * S_KV / BW + max(2 * B * P_count / F, P_size / BW)

where S_KV is the per-sequence cache in bytes, P_count the parameter count
and P_size = P_count * bytes_per_param."""

from __future__ import annotations
import copy
from dataclasses import dataclass, fields
from enum import StrEnum
from typing import Any, Dict, List, Sequence, Tuple
import pandas as pd

from attention import AttnConfig, GeometryError
from rattention_layer import LocalVariant, param_count
from model import LayerKind, ModelConfig, registered_model

SPEEDUP_COLUMNS = ["model", "batch", "context", "t_base_s", "t_ratt_s", "speedup_pct"]


@dataclass
class HardwareProfile:
    name: str = "h100-bf16"
    mem_bandwidth: float = 3.35e12  # bytes/s
    flops: float = 9.89e14  # FLOP/s
    bytes_per_param: int = 2

    class Fields(StrEnum):
        NAME = "name"
        MEM_BANDWIDTH = "mem_bandwidth"
        FLOPS = "flops"
        BYTES_PER_PARAM = "bytes_per_param"

    def __post_init__(self) -> None:
        if self.mem_bandwidth <= 0 or self.flops <= 0 or self.bytes_per_param <= 0:
            raise ValueError("Bandwidth, FLOP rate and bytes per parameter must all be positive.")

    def to_dict(self) -> Dict[HardwareProfile.Fields, Any]:
        return {self.Fields(f.name): getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, dt: Dict[str, Any]) -> HardwareProfile:
        return HardwareProfile(**{cls.Fields(key).value: value for key, value in dt.items()})


HARDWARE_PROFILES: Dict[str, HardwareProfile] = {
    "h100-bf16": HardwareProfile(),
}


def hardware_profile(name: str) -> HardwareProfile:
    """Raises KeyError for an unregistered profile."""
    if name not in HARDWARE_PROFILES:
        raise KeyError(
            f"Unknown hardware profile '{name}'. Known profiles: {', '.join(HARDWARE_PROFILES)}."
        )
    return copy.deepcopy(HARDWARE_PROFILES[name])


class CacheVariant(StrEnum):
    """How local layers cache. FULL treats every layer as global."""

    FULL = "full"
    SWA_ONLY = LocalVariant.SWA_ONLY.value
    RATTENTION = LocalVariant.RATTENTION.value
    LINEAR_ONLY = LocalVariant.LINEAR_ONLY.value


@dataclass
class CacheEntry:
    layer: int
    kind: str
    cached_tokens: int
    kv_bytes: int
    linear_state_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return self.kv_bytes + self.linear_state_bytes


@dataclass
class CachePlan:
    """Per-sequence cache of every layer."""

    entries: List[CacheEntry]
    bytes_per_token: int  # One layer's K and V for one token.

    @property
    def total_kv_bytes(self) -> int:
        return sum(entry.kv_bytes for entry in self.entries)

    @property
    def total_linear_state_bytes(self) -> int:
        return sum(entry.linear_state_bytes for entry in self.entries)

    @property
    def total_bytes(self) -> int:
        return self.total_kv_bytes + self.total_linear_state_bytes

    @property
    def token_equivalents(self) -> float:
        """Total bytes expressed as single-layer cached tokens."""
        return self.total_bytes / self.bytes_per_token

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "layer": entry.layer,
                    "kind": entry.kind,
                    "cached_tokens": entry.cached_tokens,
                    "kv_bytes": entry.kv_bytes,
                    "linear_state_bytes": entry.linear_state_bytes,
                }
                for entry in self.entries
            ]
        )


def kv_bytes_per_token(attn: AttnConfig, bytes_per_param: int = 2) -> int:
    return 2 * attn.n_kv_heads * attn.head_dim * bytes_per_param


def linear_state_bytes(attn: AttnConfig, bytes_per_param: int = 2) -> int:
    """One d' x d state per kv head (d' = d)."""
    return attn.n_kv_heads * attn.head_dim * attn.head_dim * bytes_per_param


def token_equivalent_window(attn: AttnConfig) -> float:
    """The window whose KV cache matches the linear state: d' * d / (2 * d)."""
    return attn.head_dim * attn.head_dim / (2 * attn.head_dim)


def kv_cache_bytes(
    model: ModelConfig,
    context: int,
    variant: CacheVariant | LocalVariant | None = None,
    bytes_per_param: int = 2,
    count_current_token: bool = True,
) -> CachePlan:
    """Per-layer decode cache for one sequence at the given context length.

    Global layers keep every token, sliding-window layers at most w + 1
    (w when count_current_token is False), RAttention layers add one linear
    state per kv head and linear-only layers keep only the state.

    Raises:
        ValueError: If context is below 1.
    """
    if context < 1:
        raise ValueError(f"The context must be at least 1, got {context}.")
    variant = CacheVariant(variant if variant is not None else model.local_variant)
    attn = model.attn
    per_token = kv_bytes_per_token(attn, bytes_per_param)
    state = linear_state_bytes(attn, bytes_per_param)
    window_tokens = min(context, attn.window + 1 if count_current_token else attn.window)

    entries: List[CacheEntry] = []
    for l, kind in enumerate(model.layer_kinds(), start=1):
        if kind == LayerKind.GLOBAL or variant == CacheVariant.FULL:
            entries.append(CacheEntry(l, LayerKind.GLOBAL.value, context, context * per_token))
            continue
        match variant:
            case CacheVariant.SWA_ONLY:
                entries.append(CacheEntry(l, variant.value, window_tokens, window_tokens * per_token))
            case CacheVariant.RATTENTION:
                entries.append(
                    CacheEntry(l, variant.value, window_tokens, window_tokens * per_token, state)
                )
            case CacheVariant.LINEAR_ONLY:
                entries.append(CacheEntry(l, variant.value, 0, 0, state))
    return CachePlan(entries, per_token)


def kv_savings_pct(plan: CachePlan, plan_full: CachePlan) -> float:
    """Bytes saved by plan relative to plan_full, in percent."""
    return 100.0 * (1.0 - plan.total_bytes / plan_full.total_bytes)


def parameter_count(model: ModelConfig) -> int:
    """Embedding + blocks + final norm + untied LM head.

    Each block holds its attention projections and norms, two pre-norm
    scales and three d_model x ffn_dim feed-forward matrices."""
    total = 2 * model.vocab_size * model.d_model + model.d_model
    for kind in model.layer_kinds():
        variant = model.local_variant if kind == LayerKind.LOCAL else LocalVariant.SWA_ONLY
        counts = param_count(model.attn, variant)
        total += counts.projection_params + counts.norm_params + counts.qk_norm_params
        total += 2 * model.d_model + 3 * model.d_model * model.ffn_dim
    return total


def step_time(
    hw: HardwareProfile,
    model: ModelConfig,
    batch: int,
    context: int,
    count_current_token: bool = True,
) -> float:
    """Decode step time in seconds for `batch` sequences at `context` tokens."""
    if batch < 1:
        raise ValueError(f"The batch must be at least 1, got {batch}.")
    cache = kv_cache_bytes(model, context, None, hw.bytes_per_param, count_current_token)
    p_count = parameter_count(model)
    compute = 2.0 * batch * p_count / hw.flops
    weights = p_count * hw.bytes_per_param / hw.mem_bandwidth
    return batch * cache.total_bytes / hw.mem_bandwidth + max(compute, weights)


def crossover_batch(hw: HardwareProfile, model: ModelConfig) -> float:
    """B* = P_size * F / (2 * P_count * BW): above it the parameter term is compute bound."""
    p_count = parameter_count(model)
    return p_count * hw.bytes_per_param * hw.flops / (2.0 * p_count * hw.mem_bandwidth)


def speedup_pct(t_base: float, t_ratt: float) -> float:
    """Fraction of the baseline step time saved, in percent."""
    return 100.0 * (t_base - t_ratt) / t_base


def speedup_ratio_pct(t_base: float, t_ratt: float) -> float:
    return 100.0 * (t_base / t_ratt - 1.0)


def asymptotic_speedup(
    hw: HardwareProfile, base: ModelConfig, ratt: ModelConfig, context: int
) -> float:
    """The B -> infinity limit of speedup_pct, where T / B -> S_KV / BW + 2 P_count / F."""

    def per_sequence(model: ModelConfig) -> float:
        cache = kv_cache_bytes(model, context, None, hw.bytes_per_param)
        return cache.total_bytes / hw.mem_bandwidth + 2.0 * parameter_count(model) / hw.flops

    return speedup_pct(per_sequence(base), per_sequence(ratt))


def _check_shared_geometry(base: ModelConfig, ratt: ModelConfig) -> None:
    shared = [
        ("vocab_size", base.vocab_size, ratt.vocab_size),
        ("d_model", base.d_model, ratt.d_model),
        ("n_layers", base.n_layers, ratt.n_layers),
        ("ffn_dim", base.ffn_dim, ratt.ffn_dim),
        ("local_global_period", base.local_global_period, ratt.local_global_period),
        ("n_heads", base.attn.n_heads, ratt.attn.n_heads),
        ("n_kv_heads", base.attn.n_kv_heads, ratt.attn.n_kv_heads),
        ("head_dim", base.attn.head_dim, ratt.attn.head_dim),
    ]
    for name, left, right in shared:
        if left != right:
            raise GeometryError(f"The compared models differ in {name}: {left} vs {right}.")


def variant_pair(
    name: str, base_window: int = 4096, ratt_window: int = 512
) -> Tuple[ModelConfig, ModelConfig]:
    """A registered geometry as (sliding-window baseline, RAttention) configs."""
    base = registered_model(name)
    base.attn.window = base_window
    base.local_variant = LocalVariant.SWA_ONLY
    ratt = registered_model(name)
    ratt.attn.window = ratt_window
    ratt.local_variant = LocalVariant.RATTENTION
    base.attn.validate()
    ratt.attn.validate()
    return base, ratt


def speedup_table(
    hw: HardwareProfile,
    pairs: Dict[str, Tuple[ModelConfig, ModelConfig]],
    batches: Sequence[int],
    contexts: Sequence[int],
) -> pd.DataFrame:
    """One row per (model, batch, context) with both step times and both speedup conventions.

    Raises:
        GeometryError: If a pair's models do not share their geometry.
    """
    rows: List[Dict[str, Any]] = []
    for name, (base, ratt) in pairs.items():
        _check_shared_geometry(base, ratt)
        for context in contexts:
            for batch in batches:
                t_base = step_time(hw, base, batch, context)
                t_ratt = step_time(hw, ratt, batch, context)
                rows.append(
                    {
                        "model": name,
                        "batch": batch,
                        "context": context,
                        "t_base_s": t_base,
                        "t_ratt_s": t_ratt,
                        "speedup_pct": speedup_pct(t_base, t_ratt),
                        "speedup_ratio_pct": speedup_ratio_pct(t_base, t_ratt),
                    }
                )
    return pd.DataFrame(rows, columns=SPEEDUP_COLUMNS + ["speedup_ratio_pct"])


def parse_int_list(text: str) -> List[int]:
    """'1, 4,16' -> [1, 4, 16]."""
    return [int(part) for part in text.replace(" ", "").split(",") if part]


@dataclass
class AnalyzeConfig:
    models: str = "3B,12B"
    batches: str = "1,4,16,64,256,1024"
    contexts: str = "4096,8192,16384,32768"
    base_window: int = 4096
    ratt_window: int = 512
    profile: str = "h100-bf16"

    class Fields(StrEnum):
        MODELS = "models"
        BATCHES = "batches"
        CONTEXTS = "contexts"
        BASE_WINDOW = "base_window"
        RATT_WINDOW = "ratt_window"
        PROFILE = "profile"

    def to_dict(self) -> Dict[AnalyzeConfig.Fields, Any]:
        return {self.Fields(f.name): getattr(self, f.name) for f in fields(self)}
