import os
import sys

import numpy as np
import unittest

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../RAttentionDesk"))
)
from tensor import *
from grad_check import *


def random_tensor(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), dtype=np.float64)


class TestTensor(unittest.TestCase):
    def test_dtype(self):
        self.assertEqual(Tensor([1, 2, 3]).dtype, np.float32, "Integers become float32.")
        self.assertEqual(
            Tensor(np.zeros(3, dtype=np.float64)).dtype,
            np.float64,
            "Float64 input keeps its precision.",
        )
        self.assertEqual(
            (Tensor(np.ones(2, dtype=np.float64)) * 2.0).dtype,
            np.float64,
            "Python scalars follow the tensor's precision.",
        )

    def test_broadcast_add_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            grads = backward(tape, (a + b).sum())
        np.testing.assert_array_equal(grads[a], np.ones((2, 3)), "Gradient of a.")
        np.testing.assert_array_equal(grads[b], np.full(3, 2.0), "Broadcast axis is summed out.")
        np.testing.assert_array_equal(b.grad, grads[b], "The leaf grad attribute is set.")

    def test_shared_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            grads = backward(tape, (x * x).sum())
        self.assertAlmostEqual(float(grads[x][0]), 6.0, 6, "d(x^2)/dx = 2x.")

    def test_backward_repeatable(self):
        rng = np.random.default_rng(1)
        w = random_tensor(rng, 4, 5)
        w.requires_grad = True
        x = random_tensor(rng, 3, 4)
        first = []
        for _ in range(2):
            with Tape() as tape:
                loss = softmax(x @ w).sum() + (x @ w).mean()
                first.append(backward(tape, loss)[w].copy())
            tape.reset()
            self.assertIsNone(w.grad, "reset clears the leaf gradient.")
        np.testing.assert_array_equal(first[0], first[1], "Repeated passes agree bit for bit.")

    def test_matmul_shape_error(self):
        with self.assertRaises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        with self.assertRaises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
        with self.assertRaises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))

    def test_reshape_error(self):
        with self.assertRaises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_tape_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with self.assertRaises(TapeError):
                backward(tape, x * 2.0)
        untaped = (x * 2.0).sum()
        with Tape() as tape:
            with self.assertRaises(TapeError):
                backward(tape, untaped)

    def test_non_finite(self):
        with self.assertRaises(NonFiniteError):
            with np.errstate(divide="ignore"):
                Tensor([1.0]) / Tensor([0.0])

    def test_embedding(self):
        weight = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([[1, 1, 3]])
        with Tape() as tape:
            out = embedding(weight, ids)
            grads = backward(tape, out.sum())
        np.testing.assert_array_equal(out.data[0, 2], [9.0, 10.0, 11.0], "Row lookup.")
        np.testing.assert_array_equal(grads[weight][:, 0], [0.0, 2.0, 0.0, 1.0], "Repeated ids accumulate.")
        with self.assertRaises(IndexError):
            embedding(weight, np.array([4]))

    def test_softmax_mask(self):
        x = Tensor(np.zeros((1, 3)))
        y = softmax(x, mask=np.array([[True, True, False]]))
        np.testing.assert_allclose(y.data, [[0.5, 0.5, 0.0]], atol=1e-7, err_msg="Masked entries vanish.")

    def test_rms_norm(self):
        x = Tensor(np.array([[3.0, 4.0]]), dtype=np.float64)
        y = rms_norm(x, Tensor(np.ones(2), dtype=np.float64), eps=1e-12)
        np.testing.assert_allclose(np.mean(y.data**2), 1.0, rtol=1e-9, err_msg="Unit mean square.")
        with self.assertRaises(ShapeError):
            rms_norm(x, Tensor(np.ones(3)))
        with self.assertRaises(ValueError):
            rms_norm(x, Tensor(np.ones(2)), eps=0.0)


class TestGradients(unittest.TestCase):
    TOLERANCE = 1e-5

    def setUp(self) -> None:
        self.rng = np.random.default_rng(7)

    def check(self, f, x: Tensor, message: str) -> None:
        error = grad_check(f, x, floor=1e-4)
        self.assertLess(error, self.TOLERANCE, message)

    def test_elementwise(self):
        x = random_tensor(self.rng, 3, 4)
        other = random_tensor(self.rng, 4)
        divisor = Tensor(self.rng.uniform(1.0, 2.0, size=(3, 4)), dtype=np.float64)
        self.check(lambda t: ((t - other) * t / divisor).sum(), x, "add / sub / mul / div.")
        self.check(lambda t: silu(t).sum(), x, "silu.")
        self.check(lambda t: gelu(t).sum(), x, "gelu.")

    def test_reductions_and_indexing(self):
        x = random_tensor(self.rng, 2, 3, 4)
        weights = self.rng.normal(size=(2, 4))
        mixing = self.rng.normal(size=(4, 2, 6))
        self.check(lambda t: (t.mean(axis=1) * weights).sum(), x, "mean over an axis.")
        self.check(lambda t: (t[:, 1:] * 2.0).sum() + t.swapaxes(0, 2).sum(axis=0).mean(), x, "getitem / swapaxes.")
        self.check(
            lambda t: (concatenate([t, t * 3.0], axis=1).transpose(2, 0, 1) * mixing).sum(),
            x,
            "concatenate / transpose.",
        )

    def test_matmul(self):
        a = random_tensor(self.rng, 2, 3, 4)
        b = random_tensor(self.rng, 4, 5)
        self.check(lambda t: (t @ b).sum(), a, "matmul left operand.")
        self.check(lambda t: ((a @ t) * (a @ t)).mean(), b, "Broadcast matmul right operand.")

    def test_softmax_and_norm(self):
        x = random_tensor(self.rng, 3, 5)
        weights = self.rng.normal(size=(3, 5))
        mask = np.tril(np.ones((3, 5), dtype=bool), 2)
        self.check(lambda t: (softmax(t, mask=mask) * weights).sum(), x, "Masked softmax.")
        scale = Tensor(self.rng.uniform(0.5, 1.5, size=5), dtype=np.float64)
        self.check(lambda t: (rms_norm(t, scale) * weights).sum(), x, "rms_norm input.")
        self.check(lambda s: (rms_norm(x, s) * weights).sum(), scale, "rms_norm scale.")

    def test_grad_check_rejects(self):
        x = random_tensor(self.rng, 3)
        with self.assertRaises(ValueError):
            grad_check(lambda t: t.sum(), x, step=0.0)
        with self.assertRaises(TapeError):
            grad_check(lambda t: t * 2.0, x)

    def test_numeric_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
        estimate = numeric_gradient(lambda t: (t * t).sum(), x)
        np.testing.assert_allclose(estimate, [2.0, 4.0], rtol=1e-6, err_msg="Central differences.")
        np.testing.assert_array_equal(x.data, [1.0, 2.0], "Input restored.")


if __name__ == "__main__":
    unittest.main()
