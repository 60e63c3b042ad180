"""verify.py
Named numerical checks: chunkwise against recurrent forms, checkpoint
invariance, gradient checks, window/state coverage, parameter parity and the
cache arithmetic. Each check returns its worst error, which must stay below the
check's tolerance."""

from __future__ import annotations
from dataclasses import dataclass
import fnmatch
import logging
import time
from typing import Callable, Dict, List, Sequence
import numpy as np

from tensor import Tape, Tensor, backward
from grad_check import grad_check
from attention import (
    AttnConfig,
    audit_window_tokens,
    dense_attention_oracle,
    masked_attention,
    sliding_window_attention,
    sliding_window_mask,
)
from linear_attention import (
    CheckpointSchedule,
    FeatureMap,
    la_chunkwise,
    la_recurrent,
    phi_forward,
)
from residual_linear_attention import RlaParams, audit_readout_tokens, rla_chunkwise, rla_recurrent
from rattention_layer import LocalVariant, RattentionParams, param_count, rattention_forward
from model import Model, ModelConfig, cross_entropy_loss, model_forward, registered_model
from efficiency import (
    CacheVariant,
    asymptotic_speedup,
    hardware_profile,
    kv_cache_bytes,
    kv_savings_pct,
    token_equivalent_window,
    variant_pair,
)

logger = logging.getLogger(__name__)

GRAD_FLOOR = 1e-8  # Relative-error floor; only gradients below it are compared absolutely.


class UnknownFilterError(ValueError):
    """A filter selected no checks."""

    pass


@dataclass
class Check:
    name: str
    run: Callable[[], float]
    tolerance: float
    canary: bool = False


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    seconds: float


_REGISTRY: Dict[str, Check] = {}


def check(name: str, tolerance: float, canary: bool = False):
    """Registers the decorated zero-argument function under name."""

    def register(fn: Callable[[], float]) -> Callable[[], float]:
        assert name not in _REGISTRY, f"Check '{name}' is registered twice."
        _REGISTRY[name] = Check(name, fn, tolerance, canary)
        return fn

    return register


def _random_qkv(rng: np.random.Generator, length: int, b: int = 1, h: int = 2, d: int = 8):
    return tuple(rng.normal(size=(b, h, length, d)) for _ in range(3))


def _chunkwise_vs_recurrent(feature_map: FeatureMap) -> float:
    rng = np.random.default_rng(0)
    worst = 0.0
    for length in (32, 64, 128):
        q, k, v = _random_qkv(rng, length)
        qf, kf = phi_forward(q, feature_map), phi_forward(k, feature_map)
        reference, _ = la_recurrent(qf, kf, v)
        for chunk in (1, 4, 8, 16):
            out, _ = la_chunkwise(q, k, v, chunk, feature_map=feature_map)
            worst = max(worst, float(np.max(np.abs(out.data - reference.data))))
    return worst


for _fm in FeatureMap:
    check(f"chunkwise.la.{_fm.value}", 1e-10)(lambda fm=_fm: _chunkwise_vs_recurrent(fm))


@check("chunkwise.rla", 1e-10)
def rla_chunkwise_vs_recurrent() -> float:
    rng = np.random.default_rng(1)
    worst = 0.0
    for length in (32, 64, 128):
        q, k, v = _random_qkv(rng, length)
        qf, kf = phi_forward(q, FeatureMap.SOFTMAX), phi_forward(k, FeatureMap.SOFTMAX)
        for chunk in (1, 4, 8, 16):
            for window in (chunk, 2 * chunk, 4 * chunk):
                reference = rla_recurrent(qf, kf, v, window).data
                out = rla_chunkwise(q, k, v, RlaParams(window, chunk), feature_map=FeatureMap.SOFTMAX).data
                worst = max(worst, float(np.max(np.abs(out - reference))))
                # Positions 1..w+1 have nothing outside their window yet.
                worst = max(worst, float(np.max(np.abs(out[:, :, : window + 1]))))
    return worst


def _weighted_grads(q, k, v, weights, stride: int) -> List[np.ndarray]:
    tq, tk, tv = (Tensor(a, requires_grad=True) for a in (q, k, v))
    schedule = CheckpointSchedule(stride)
    with Tape() as tape:
        out = rla_chunkwise(tq, tk, tv, RlaParams(8, 4), schedule, FeatureMap.SOFTMAX)
        grads = backward(tape, (out * weights).sum())
    return [grads[tq], grads[tk], grads[tv]]


@check("checkpoint.forward", 0.0)
def checkpoint_forward_bitwise() -> float:
    rng = np.random.default_rng(2)
    q, k, v = _random_qkv(rng, 64)
    outputs = [
        la_chunkwise(q, k, v, 4, CheckpointSchedule(stride), FeatureMap.SOFTMAX)[0].data
        for stride in (1, 2, 4, 8)
    ]
    return max(float(np.max(np.abs(out - outputs[0]))) for out in outputs)


@check("checkpoint.backward", 1e-6)
def checkpoint_backward_invariance() -> float:
    rng = np.random.default_rng(3)
    q, k, v = _random_qkv(rng, 64)
    weights = rng.normal(size=v.shape)
    reference = _weighted_grads(q, k, v, weights, 1)
    worst = 0.0
    for stride in (2, 4, 8):
        for got, want in zip(_weighted_grads(q, k, v, weights, stride), reference):
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-8))))
    return worst


@check("checkpoint.count", 0.0)
def checkpoint_state_count() -> float:
    rng = np.random.default_rng(4)
    q, k, v = _random_qkv(rng, 60)
    mismatches = 0
    for stride in (1, 2, 4, 8):
        _, schedule = la_chunkwise(q, k, v, 4, CheckpointSchedule(stride))
        mismatches += len(schedule.saved) != -(-schedule.num_chunks // stride)
    return float(mismatches)


@check("attention.swa_oracle", 1e-10)
def swa_against_dense_oracle() -> float:
    rng = np.random.default_rng(5)
    q, k, v = _random_qkv(rng, 48)
    worst = 0.0
    for window in (0, 3, 8, 47):
        out = sliding_window_attention(Tensor(q), Tensor(k), Tensor(v), window).data
        worst = max(worst, float(np.max(np.abs(out - dense_attention_oracle(q, k, v, window)))))
    return worst


@check("coverage.partition", 0.0)
def coverage_partition() -> float:
    """Counts positions where the window and the residual state overlap or leave a gap."""
    failures = 0
    for length, window, chunk in ((64, 8, 4), (64, 16, 8), (40, 4, 2), (33, 6, None)):
        swa = audit_window_tokens(length, window)
        rla = audit_readout_tokens(length, window, chunk)
        for t in range(length):
            failures += bool(swa[t] & rla[t]) or (swa[t] | rla[t]) != set(range(1, t + 2))
    return float(failures)


def _layer_setup(dtype=np.float64):
    cfg = AttnConfig(d_model=16, n_heads=2, n_kv_heads=1, head_dim=8, window=4, chunk_size=2, save_stride=2)
    rng = np.random.default_rng(6)
    params = RattentionParams.init(cfg, LocalVariant.RATTENTION, rng, dtype)
    x = Tensor(rng.normal(size=(1, 12, 16)), dtype=dtype)
    weights = rng.normal(size=(1, 12, 16))
    return cfg, params, x, weights


@check("grad.layer", 1e-4)
def layer_gradients() -> float:
    cfg, params, x, weights = _layer_setup()
    worst = grad_check(lambda t: (rattention_forward(t, params, cfg) * weights).sum(), x, floor=GRAD_FLOOR)
    for _, tensor in params.named_parameters():
        worst = max(
            worst,
            grad_check(
                lambda _: (rattention_forward(x, params, cfg) * weights).sum(),
                tensor,
                floor=GRAD_FLOOR,
                max_elements=24,
            ),
        )
    return worst


def toy_model_config() -> ModelConfig:
    return ModelConfig(
        vocab_size=64,
        d_model=64,
        n_layers=8,
        ffn_dim=128,
        attn=AttnConfig(window=4, chunk_size=2, save_stride=2),
    )


@check("grad.model", 1e-4)
def model_gradients() -> float:
    model = Model(toy_model_config(), seed=7, dtype=np.float64)
    rng = np.random.default_rng(7)
    tokens = rng.integers(0, 64, size=(1, 12))
    targets = rng.integers(0, 64, size=(1, 12))

    def loss(_: Tensor) -> Tensor:
        return cross_entropy_loss(model_forward(tokens, model), targets)

    worst = 0.0
    named = dict(model.named_parameters())
    for name in ("embedding", "blocks.0.attn.w_q", "blocks.1.attn.rms_rla_scale", "blocks.3.attn.w_k", "blocks.7.w_down", "lm_head"):
        worst = max(worst, grad_check(loss, named[name], floor=GRAD_FLOOR, max_elements=8))
    return worst


@check("params.parity", 0.0)
def projection_parity() -> float:
    difference = 0
    for name in ("3B", "12B"):
        attn = registered_model(name).attn
        difference += abs(
            param_count(attn, LocalVariant.RATTENTION).projection_params
            - param_count(attn, LocalVariant.SWA_ONLY).projection_params
        )
    return float(difference)


@check("efficiency.motivation", 1.0)
def motivation_arithmetic() -> float:
    """Worst deviation in percentage points (token-equivalent counted exactly)."""
    base_4k, _ = variant_pair("12B", base_window=4096)
    base_1k, _ = variant_pair("12B", base_window=1024)
    full = kv_cache_bytes(base_4k, 4096, CacheVariant.FULL)
    deviation = abs(kv_savings_pct(kv_cache_bytes(base_4k, 4096), full))
    deviation = max(deviation, abs(kv_savings_pct(kv_cache_bytes(base_1k, 4096), full) - 56.0))
    if token_equivalent_window(base_4k.attn) != 64:
        deviation = float("inf")
    return deviation


@check("efficiency.speedup", 2.0)
def speedup_band() -> float:
    """The widest 3B vs 12B gap (pp) at long contexts. Infinite when a 4096-context speedup leaves 55-65%."""
    hw = hardware_profile("h100-bf16")
    worst = 0.0
    curves: Dict[int, List[float]] = {16384: [], 32768: []}
    for name in ("3B", "12B"):
        base, ratt = variant_pair(name)
        peak = asymptotic_speedup(hw, base, ratt, 4096)
        if not 55.0 <= peak <= 65.0:
            return float("inf")
        for context in curves:
            curves[context].append(asymptotic_speedup(hw, base, ratt, context))
    for values in curves.values():
        worst = max(worst, abs(values[0] - values[1]))
    return worst


@check("canary.broken_mask", 1e-10, canary=True)
def broken_mask_canary() -> float:
    """Sliding-window attention with a mask one token too wide. Must fail."""
    rng = np.random.default_rng(8)
    q, k, v = _random_qkv(rng, 32)
    window = 4
    out = masked_attention(Tensor(q), Tensor(k), Tensor(v), sliding_window_mask(32, window + 1)).data
    return float(np.max(np.abs(out - dense_attention_oracle(q, k, v, window))))


def check_names(include_canary: bool = False) -> List[str]:
    return [name for name, c in _REGISTRY.items() if include_canary or not c.canary]


def select_checks(filters: Sequence[str] | None, include_canary: bool = False) -> List[str]:
    """Names matching any filter. Filters are globs; one without glob characters also matches as a substring.

    Raises:
        UnknownFilterError: If a filter matches nothing.
    """
    names = check_names(include_canary)
    if not filters:
        return names
    selected: List[str] = []
    for pattern in filters:
        matches = [name for name in names if fnmatch.fnmatch(name, pattern)]
        if not matches and not any(ch in pattern for ch in "*?["):
            matches = [name for name in names if pattern in name]
        if not matches:
            raise UnknownFilterError(f"The filter '{pattern}' matches no check.")
        selected += [name for name in matches if name not in selected]
    return selected


def run_checks(filters: Sequence[str] | None = None, include_canary: bool = False) -> List[CheckResult]:
    results: List[CheckResult] = []
    for name in select_checks(filters, include_canary):
        registered = _REGISTRY[name]
        start = time.perf_counter()
        error = registered.run()
        elapsed = time.perf_counter() - start
        passed = bool(error <= registered.tolerance)
        results.append(CheckResult(name, error, registered.tolerance, passed, elapsed))
        logger.info(f"{'PASS' if passed else 'FAIL'}  {name}  max error {error:.3e} ({elapsed:.2f} s)")
    return results
