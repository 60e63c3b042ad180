import os
import sys

import numpy as np
import unittest

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../RAttentionDesk"))
)
from tensor import *
from grad_check import *
from attention import *


def random_qkv(seed: int, shape=(2, 3, 12, 8)):
    rng = np.random.default_rng(seed)
    return tuple(rng.normal(size=shape) for _ in range(3))


class TestSlidingWindow(unittest.TestCase):
    def test_matches_oracle(self):
        q, k, v = random_qkv(0)
        for window in (0, 1, 3, 11, 40):
            out = sliding_window_attention(Tensor(q), Tensor(k), Tensor(v), window)
            np.testing.assert_allclose(
                out.data,
                dense_attention_oracle(q, k, v, window),
                rtol=1e-9,
                atol=1e-12,
                err_msg=f"Window {window} against the dense oracle.",
            )

    def test_causal(self):
        q, k, v = random_qkv(1)
        np.testing.assert_allclose(
            causal_attention(Tensor(q), Tensor(k), Tensor(v)).data,
            dense_attention_oracle(q, k, v),
            rtol=1e-9,
            atol=1e-12,
            err_msg="Causal attention against the oracle.",
        )
        np.testing.assert_array_equal(
            causal_attention(Tensor(q), Tensor(k), Tensor(v)).data,
            sliding_window_attention(Tensor(q), Tensor(k), Tensor(v), 11).data,
            "A window covering the whole sequence is causal attention.",
        )

    def test_window_zero_reads_self(self):
        q, k, v = random_qkv(2)
        out = sliding_window_attention(Tensor(q), Tensor(k), Tensor(v), 0)
        np.testing.assert_allclose(out.data, v, rtol=1e-12, err_msg="w = 0 returns the own value.")

    def test_mask(self):
        mask = sliding_window_mask(5, 2)
        self.assertEqual(list(np.flatnonzero(mask[4])), [2, 3, 4], "Keys t - w .. t.")
        self.assertEqual(list(np.flatnonzero(mask[0])), [0], "First query reads itself.")
        self.assertTrue(np.array_equal(sliding_window_mask(5, None), np.tril(np.ones((5, 5), dtype=bool))))

    def test_audit(self):
        tokens = audit_window_tokens(8, 3)
        self.assertEqual(tokens[0], {1}, "Position 1.")
        self.assertEqual(tokens[7], {5, 6, 7, 8}, "At most w + 1 tokens.")
        for t, read in enumerate(tokens):
            self.assertLessEqual(len(read), 4, f"Position {t + 1} reads too many tokens.")

    def test_errors(self):
        q, k, v = random_qkv(3)
        with self.assertRaises(ValueError):
            sliding_window_attention(Tensor(q), Tensor(k), Tensor(v), -1)
        with self.assertRaises(ShapeError):
            sliding_window_attention(Tensor(q), Tensor(k[:, :, :5]), Tensor(v), 2)
        with self.assertRaises(ShapeError):
            causal_attention(Tensor(q), Tensor(k[..., :4]), Tensor(v))

    def test_gradient(self):
        q, k, v = (Tensor(x) for x in random_qkv(4, (1, 2, 6, 4)))
        weights = np.random.default_rng(5).normal(size=(1, 2, 6, 4))
        for target, name in ((q, "q"), (k, "k"), (v, "v")):
            error = grad_check(
                lambda _: (sliding_window_attention(q, k, v, 2) * weights).sum(), target, floor=1e-4
            )
            self.assertLess(error, 1e-5, f"Sliding-window gradient with respect to {name}.")


class TestRope(unittest.TestCase):
    def test_position_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 1, 8)))
        np.testing.assert_allclose(apply_rope(x, [0], 1e4).data, x.data, err_msg="No rotation at position 0.")

    def test_norm_preserved(self):
        x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 5, 8)))
        y = apply_rope(x, np.arange(5), 1e4)
        np.testing.assert_allclose(
            np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1), rtol=1e-10, err_msg="Rotations keep norms."
        )

    def test_relative(self):
        rng = np.random.default_rng(2)
        q = Tensor(rng.normal(size=(1, 1, 1, 8)))
        k = Tensor(rng.normal(size=(1, 1, 1, 8)))

        def score(m: int, n: int) -> float:
            return float((apply_rope(q, [m], 1e4).data * apply_rope(k, [n], 1e4).data).sum())

        self.assertAlmostEqual(score(3, 1), score(10, 8), 9, "Scores depend on m - n only.")
        self.assertNotAlmostEqual(score(3, 1), score(3, 2), 6, "Different offsets differ.")

    def test_interleaved_pairs(self):
        x = Tensor(np.array([[[[1.0, 0.0, 0.0, 0.0]]]]))
        y = apply_rope(x, [1], 1e4)
        np.testing.assert_allclose(y.data[0, 0, 0], [np.cos(1.0), np.sin(1.0), 0.0, 0.0], atol=1e-12, err_msg="Pair (0, 1) rotates by one radian.")

    def test_errors(self):
        with self.assertRaises(ShapeError):
            apply_rope(Tensor(np.ones((1, 1, 2, 3))), [0, 1], 1e4)
        with self.assertRaises(ShapeError):
            apply_rope(Tensor(np.ones((1, 1, 2, 4))), [0], 1e4)

    def test_gradient(self):
        x = Tensor(np.random.default_rng(3).normal(size=(1, 1, 3, 4)))
        weights = np.random.default_rng(4).normal(size=(1, 1, 3, 4))
        error = grad_check(lambda t: (apply_rope(t, [2, 5, 9], 100.0) * weights).sum(), x, floor=1e-4)
        self.assertLess(error, 1e-5, "Rotary gradient.")


class TestGroupedQuery(unittest.TestCase):
    def test_expand(self):
        kv = Tensor(np.arange(2 * 3 * 4, dtype=np.float64).reshape(1, 2, 3, 4))
        out = gqa_expand(kv, 6)
        self.assertEqual(out.shape, (1, 6, 3, 4), "Six query heads.")
        for head in range(6):
            np.testing.assert_array_equal(out.data[0, head], kv.data[0, head // 3], f"Head {head} reads kv head {head // 3}.")
        self.assertIs(gqa_expand(kv, 2), kv, "Group size 1 is the identity.")

    def test_gradient_sums_group(self):
        kv = Tensor(np.ones((1, 2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            grads = backward(tape, gqa_expand(kv, 4).sum())
        np.testing.assert_array_equal(grads[kv], np.full((1, 2, 3, 4), 2.0), "Each kv head serves two query heads.")

    def test_uneven(self):
        with self.assertRaises(GeometryError):
            gqa_expand(Tensor(np.ones((1, 3, 2, 2))), 4)


class TestAttnConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = AttnConfig()
        self.assertEqual(cfg.group_size, 2, "4 query heads over 2 kv heads.")

    def test_invalid(self):
        with self.assertRaises(GeometryError):
            AttnConfig(n_heads=4, n_kv_heads=3)
        with self.assertRaises(GeometryError):
            AttnConfig(d_model=60)
        with self.assertRaises(GeometryError):
            AttnConfig(d_model=60, n_heads=4, head_dim=15)
        with self.assertRaises(GeometryError):
            AttnConfig(window=-1)
        with self.assertRaises(GeometryError):
            AttnConfig(chunk_size=0)
        AttnConfig(d_model=60, n_heads=4, head_dim=15, use_rope=False)

    def test_dict(self):
        cfg = AttnConfig(window=32, feature_map="relu")
        self.assertEqual(cfg.feature_map, FeatureMap.RELU, "Strings become feature maps.")
        restored = AttnConfig.from_dict({key.value: value for key, value in cfg.to_dict().items()})
        self.assertEqual(restored, cfg, "Dictionary round trip.")


if __name__ == "__main__":
    unittest.main()
