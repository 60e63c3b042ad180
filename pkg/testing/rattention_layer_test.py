import os
import sys

import numpy as np
import unittest
from dataclasses import replace

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../RAttentionDesk"))
)
from tensor import *
from grad_check import *
from attention import *
from rattention_layer import *
from rattention_layer import _branch_norm, _merge_heads, _project
from linear_attention import CheckpointSchedule
from efficiency import linear_state_bytes


def small_config(**overrides) -> AttnConfig:
    values = dict(d_model=16, n_heads=2, n_kv_heads=1, head_dim=8, window=4, chunk_size=2, rope_theta=100.0)
    values.update(overrides)
    return AttnConfig(**values)


def make_layer(cfg: AttnConfig, variant=LocalVariant.RATTENTION, seed: int = 0, length: int = 12):
    rng = np.random.default_rng(seed)
    params = RattentionParams.init(cfg, variant, rng, np.float64)
    x = Tensor(rng.normal(size=(2, length, cfg.d_model)))
    return params, x


class TestRattentionLayer(unittest.TestCase):
    def test_shapes(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        self.assertEqual(rattention_forward(x, params, cfg).shape, x.shape, "Output keeps [b, L, d_model].")
        self.assertEqual(params.rms_swa_scale.shape, (2, 8), "Per-head branch scale.")
        shared = RattentionParams.init(small_config(use_group_norm=False), LocalVariant.RATTENTION, np.random.default_rng(0))
        self.assertEqual(shared.rms_rla_scale.shape, (8,), "Shared branch scale.")
        self.assertEqual(shared.w_q.dtype, np.float32, "Default precision.")

    def test_init_by_variant(self):
        cfg = small_config()
        rng = np.random.default_rng(0)
        swa = RattentionParams.init(cfg, LocalVariant.SWA_ONLY, rng)
        self.assertIsNone(swa.rms_swa_scale, "Sliding-window layers have no branch norm.")
        linear = RattentionParams.init(cfg, LocalVariant.LINEAR_ONLY, rng)
        self.assertIsNone(linear.rms_swa_scale, "Linear-only layers have no window norm.")
        self.assertIsNotNone(linear.rms_rla_scale, "Linear-only layers keep the linear norm.")
        glob = RattentionParams.init(cfg, None, rng)
        self.assertEqual(
            [name for name, _ in glob.named_parameters()],
            ["w_q", "w_k", "w_v", "w_o", "q_norm_scale", "k_norm_scale"],
            "Global layers carry projections and q/k norms.",
        )

    def test_gradients(self):
        cfg = small_config()
        params, x = make_layer(cfg, length=10)
        weights = np.random.default_rng(1).normal(size=x.shape)
        for name, tensor in params.named_parameters():
            error = grad_check(
                lambda _: (rattention_forward(x, params, cfg) * weights).sum(),
                tensor,
                floor=1e-4,
                max_elements=12,
            )
            self.assertLess(error, 1e-4, f"Gradient of {name}.")
        error = grad_check(lambda t: (rattention_forward(t, params, cfg) * weights).sum(), x, floor=1e-4, max_elements=12)
        self.assertLess(error, 1e-4, "Gradient of the input.")

    def test_recurrent_mode(self):
        cfg = small_config()
        params, x = make_layer(cfg, length=11)
        recurrent = replace(cfg, chunkwise=False)
        np.testing.assert_allclose(
            rattention_forward(x, params, recurrent).data,
            rattention_forward(x, params, cfg).data,
            rtol=1e-9,
            atol=1e-10,
            err_msg="Recurrent and chunkwise modes agree.",
        )
        odd_window = small_config(window=3, chunkwise=False)
        rattention_forward(x, params, odd_window)

    def test_checkpoint_stride(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        sparse = replace(cfg, save_stride=3)
        np.testing.assert_array_equal(
            rattention_forward(x, params, sparse).data,
            rattention_forward(x, params, cfg).data,
            "The save stride does not change outputs.",
        )

    def test_causal(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        base = rattention_forward(x, params, cfg).data
        changed = x.data.copy()
        changed[:, 7] += 1.0
        out = rattention_forward(Tensor(changed), params, cfg).data
        np.testing.assert_allclose(out[:, :7], base[:, :7], rtol=1e-12, atol=1e-12, err_msg="Earlier positions ignore later tokens.")
        self.assertFalse(np.allclose(out[:, 7:], base[:, 7:]), "Later positions see the change.")

    def test_far_tokens_reach_output(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        changed = x.data.copy()
        changed[:, 0] += 1.0
        swa_base = swa_forward(x, params, cfg).data
        swa_changed = swa_forward(Tensor(changed), params, cfg).data
        np.testing.assert_allclose(swa_changed[:, 6:], swa_base[:, 6:], rtol=1e-12, atol=1e-12, err_msg="Token 1 is outside the window from position 6.")
        ratt_base = rattention_forward(x, params, cfg).data
        ratt_changed = rattention_forward(Tensor(changed), params, cfg).data
        self.assertFalse(np.allclose(ratt_changed[:, 6:], ratt_base[:, 6:]), "The residual branch still reads token 1.")

    def test_window_covers_sequence(self):
        cfg = small_config(window=12)
        params, x = make_layer(cfg, length=12)
        branches = rattention_branches(x, params, cfg)
        np.testing.assert_array_equal(branches[Branch.RLA].data, 0.0, "Nothing is left for the residual branch.")

    def test_rope_and_readout_options(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        base = rattention_forward(x, params, cfg).data
        for option in ("rla_uses_rope", "inclusive_readout"):
            out = rattention_forward(x, params, replace(cfg, **{option: True})).data
            self.assertFalse(np.allclose(out, base), f"{option} changes the output.")
        no_rope = replace(cfg, use_rope=False)
        self.assertFalse(np.allclose(rattention_forward(x, params, no_rope).data, base), "use_rope changes the output.")

    def test_geometry_errors(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        with self.assertRaises(GeometryError):
            rattention_forward(x, params, small_config(window=3))
        swa_params, _ = make_layer(cfg, LocalVariant.SWA_ONLY)
        with self.assertRaises(GeometryError):
            rattention_forward(x, swa_params, cfg)
        with self.assertRaises(GeometryError):
            linear_only_forward(x, swa_params, cfg)
        with self.assertRaises(GeometryError):
            rattention_forward(Tensor(x.data[..., :8]), params, cfg)
        with self.assertRaises(GeometryError):
            rattention_forward(x, params, small_config(n_kv_heads=2))

    def test_local_forward(self):
        cfg = small_config()
        for variant, direct in (
            (LocalVariant.RATTENTION, rattention_forward),
            (LocalVariant.SWA_ONLY, swa_forward),
            (LocalVariant.LINEAR_ONLY, linear_only_forward),
        ):
            params, x = make_layer(cfg, variant)
            np.testing.assert_array_equal(
                local_forward(x, params, cfg, variant).data,
                direct(x, params, cfg).data,
                f"Dispatch to {variant.value}.",
            )
        with self.assertRaises(ValueError):
            local_forward(x, params, cfg, "sparse")

    def test_global_forward(self):
        cfg = small_config()
        params, x = make_layer(cfg, None)
        base = global_forward(x, params, cfg).data
        changed = x.data.copy()
        changed[:, 0] += 1.0
        out = global_forward(Tensor(changed), params, cfg).data
        self.assertFalse(np.allclose(out[:, -1], base[:, -1]), "The last position attends to token 1.")

    def test_state_per_kv_head(self):
        cfg = small_config(d_model=32, n_heads=4, n_kv_heads=1, head_dim=8)
        for variant, forward in ((LocalVariant.RATTENTION, rattention_forward), (LocalVariant.LINEAR_ONLY, linear_only_forward)):
            params, x = make_layer(cfg, variant)
            schedule = CheckpointSchedule(1)
            forward(x, params, cfg, schedule=schedule)
            state = schedule.saved[0]
            self.assertEqual(state.s.shape, (2, 1, 8, 8), f"{variant.value} keeps one d' x d state per kv head.")
            self.assertEqual(state.nbytes, 2 * linear_state_bytes(cfg, state.s.itemsize), "Matches the decode-cost accounting.")

    def test_silent_residual_branch(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        params.rms_rla_scale.data[...] = 0.0
        q, k, v = _project(x, params, cfg)
        swa_only = _merge_heads(
            _branch_norm(swa_branch(q, k, v, cfg, np.arange(x.shape[1])), params.rms_swa_scale, cfg), params
        )
        np.testing.assert_array_equal(
            rattention_forward(x, params, cfg).data, swa_only.data, "A zeroed residual branch leaves the normed window layer."
        )


class TestParameters(unittest.TestCase):
    def test_parity(self):
        cfg = AttnConfig(d_model=2048, n_heads=16, n_kv_heads=4, head_dim=128, window=512, chunk_size=256)
        ratt = param_count(cfg, LocalVariant.RATTENTION)
        swa = param_count(cfg, LocalVariant.SWA_ONLY)
        self.assertEqual(ratt.projection_params, swa.projection_params, "No extra projections.")
        self.assertEqual(ratt.projection_params, 2048 * 2048 * 2 + 2 * 2048 * 512, "q, k, v, o.")
        self.assertEqual(ratt.norm_params, 2 * 2048, "Two per-head branch norms.")
        self.assertEqual(swa.norm_params, 0, "Sliding-window layers have no branch norms.")
        self.assertEqual(param_count(cfg, LocalVariant.LINEAR_ONLY).norm_params, 2048, "One branch norm.")
        shared = param_count(replace(cfg, use_group_norm=False))
        self.assertEqual(shared.norm_params, 2 * 128, "Shared branch norms.")
        self.assertLess(ratt.norm_params / ratt.projection_params, 0.001, "Branch norms are negligible.")

    def test_counts_match_tensors(self):
        cfg = small_config()
        for variant in LocalVariant:
            params, _ = make_layer(cfg, variant)
            count = param_count(cfg, variant)
            total = sum(t.size for _, t in params.named_parameters())
            self.assertEqual(
                total,
                count.projection_params + count.norm_params + count.qk_norm_params,
                f"Initialised tensors match the count for {variant.value}.",
            )

    def test_branch_usage(self):
        cfg = small_config()
        params, x = make_layer(cfg)
        usage = branch_parameter_usage(x, params, cfg)
        both = {Branch.SWA, Branch.RLA}
        for name in ("w_q", "w_k", "w_v", "w_o", "q_norm_scale", "k_norm_scale"):
            self.assertEqual(usage[name], both, f"{name} is shared by both branches.")
        self.assertEqual(usage["rms_swa_scale"], {Branch.SWA}, "Window norm.")
        self.assertEqual(usage["rms_rla_scale"], {Branch.RLA}, "Residual norm.")
        rla_only = [name for name, used in usage.items() if used == {Branch.RLA}]
        self.assertEqual(rla_only, ["rms_rla_scale"], "Only the norm scale is specific to the residual branch.")


if __name__ == "__main__":
    unittest.main()
