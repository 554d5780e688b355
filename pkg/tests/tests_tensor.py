# -*- coding: utf8 -*-
import threading
import unittest

import numpy as np

from hapcac import tensor as T
from hapcac.utilities import FormatError, IntegrityError, content_hash

from .utils import analytic_grads, numeric_grads, relative_error


class GradientCase(unittest.TestCase):
    def assertGradients(self, fn, *arrays):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        for analytic, numeric in zip(analytic_grads(fn, arrays), numeric_grads(fn, arrays)):
            self.assertEqual(analytic.shape, numeric.shape)
            self.assertTrue(relative_error(analytic, numeric) < 1e-4, (analytic, numeric))


class TestPrimitiveGradients(GradientCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def weighted(self, shape):
        w = self.rng.normal(size=shape)
        return lambda t: T.sum(t * w)

    def test_add_sub_broadcast(self):
        a, b = self.rng.normal(size=(3, 4)), self.rng.normal(size=(1, 4))
        out = self.weighted((3, 4))
        self.assertGradients(lambda x, y: out(x + y), a, b)
        self.assertGradients(lambda x, y: out(x - y), a, b)
        self.assertGradients(lambda x, y: out(y - x), a, b)

    def test_mul_div(self):
        a = self.rng.normal(size=(2, 3, 4))
        b = self.rng.uniform(0.5, 2.0, size=(3, 1))
        out = self.weighted((2, 3, 4))
        self.assertGradients(lambda x, y: out(x * y), a, b)
        self.assertGradients(lambda x, y: out(x / y), a, b)
        self.assertGradients(lambda x, y: out(y / (x * x + 1.0)), a, b)

    def test_matmul(self):
        a, b = self.rng.normal(size=(2, 5, 3)), self.rng.normal(size=(3, 4))
        self.assertGradients(lambda x, y: T.sum(T.matmul(x, y) * T.matmul(x, y)), a, b)
        c = self.rng.normal(size=(2, 4, 2))
        self.assertGradients(lambda x, y: T.sum(T.matmul(x, y)), b[None].repeat(2, 0), c)

    def test_elementwise(self):
        a = self.rng.normal(size=(4, 3))
        a[np.abs(a) < 0.05] = 0.3
        out = self.weighted((4, 3))
        self.assertGradients(lambda x: out(T.relu(x)), a)
        self.assertGradients(lambda x: out(T.exp(x)), a)
        self.assertGradients(lambda x: out(T.softplus(x * 3.0)), a)
        positive = np.abs(a) + 0.1
        self.assertGradients(lambda x: out(T.log(x)), positive)

    def test_log1mexp(self):
        values = np.array([0.01, 0.2, 0.69, 0.7, 3.0, 25.0])
        out = T.log1mexp(T.Tensor(values)).data
        np.testing.assert_allclose(out, np.log(-np.expm1(-values)), rtol=1e-9, atol=1e-15)
        self.assertGradients(lambda x: T.sum(T.log1mexp(x)), values[:5])

    def test_softmax(self):
        a = self.rng.normal(size=(3, 5, 2))
        out = self.weighted((3, 5, 2))
        self.assertGradients(lambda x: out(T.softmax(x, axis=-2)), a)
        self.assertGradients(lambda x: out(T.softmax(x)), a)

    def test_reductions(self):
        a = self.rng.normal(size=(3, 4, 2))
        self.assertGradients(lambda x: T.sum(T.sum(x, axis=1) * T.sum(x, axis=1)), a)
        self.assertGradients(lambda x: T.sum(T.sum(x, axis=-1, keepdims=True) * x), a)
        self.assertGradients(lambda x: T.mean(x * x), a)
        self.assertGradients(lambda x: T.sum(T.mean(x, axis=0) * T.mean(x, axis=0)), a)

    def test_gather(self):
        a = self.rng.normal(size=(4, 3))
        out = self.weighted((4, 4))
        self.assertGradients(lambda x: out(T.gather(x, [0, 2, 2, 1], axis=1)), a)
        self.assertGradients(lambda x: T.sum(T.gather(x, [3, 3, 0]) * 2.0), a)

    def test_shape_ops(self):
        a, b = self.rng.normal(size=(2, 3)), self.rng.normal(size=(2, 1))
        joined = self.weighted((2, 4))
        spread = self.weighted((5, 2, 3))
        folded = self.weighted((3, 2))
        self.assertGradients(lambda x, y: joined(T.concat([x, y], axis=-1)), a, b)
        self.assertGradients(lambda y: spread(T.broadcast_to(y, (5, 2, 3))), b)
        self.assertGradients(lambda x: folded(T.reshape(x, (3, 2))), a)

    def test_reused_input(self):
        a = self.rng.normal(size=(3,))
        self.assertGradients(lambda x: T.sum(x * x * x + x), a)

    def test_random_seeds(self):
        for seed in range(100):
            self.rng = np.random.default_rng(seed)
            a = self.rng.normal(size=(2, 3))
            a[np.abs(a) < 0.05] = 0.3
            b = self.rng.uniform(0.5, 2.0, size=(3, 2))
            out = self.weighted((2, 3))
            pooled = self.weighted((2, 2))

            self.assertGradients(lambda x, y: pooled(T.matmul(x, y)), a, b)
            self.assertGradients(lambda x: out(T.relu(x) + T.exp(x) * T.softplus(x)), a)
            self.assertGradients(lambda y: T.sum(T.log(y) + T.log1mexp(y)), b)
            self.assertGradients(lambda x: out(T.softmax(x, axis=-1) / (x * x + 1.0)), a)
            self.assertGradients(
                lambda x, y: T.mean(T.concat([x, T.reshape(y, (2, 3))], axis=0) * 1.5), a, b
            )
            self.assertGradients(lambda x: out(T.gather(x, [2, 0, 0], axis=1) - x), a)


class TestTape(unittest.TestCase):
    def test_examples(self):
        x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(x)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

        x.zero_grad()
        with T.Tape() as tape:
            loss = T.sum(x * x)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2, -4, 6])

    def test_accumulates(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with T.Tape() as tape:
                loss = T.sum(x * 3.0)
            T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [6, 6])

    def test_no_tape_records_nothing(self):
        x = T.Tensor([1.0], requires_grad=True)
        self.assertIsNone(T.active_tape())
        y = T.exp(x)
        self.assertTrue(y.requires_grad)
        with T.Tape() as tape:
            T.exp(T.Tensor([1.0]))
        self.assertEqual(len(tape), 0)

    def test_tapes_are_per_thread(self):
        seen = []
        with T.Tape() as tape:
            worker = threading.Thread(target=lambda: seen.append(T.active_tape()))
            worker.start()
            worker.join()
            self.assertIs(T.active_tape(), tape)
        self.assertEqual(seen, [None])

    def test_nested(self):
        with T.Tape() as outer:
            with T.Tape() as inner:
                self.assertIs(T.active_tape(), inner)
            self.assertIs(T.active_tape(), outer)

    def test_non_scalar_loss(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = x * 2.0
        with self.assertRaises(ValueError):
            T.backward(tape, y)

    def test_ndarray_operands(self):
        x = T.Tensor([1.0, 2.0])
        self.assertIsInstance(np.array([1.0, 1.0]) + x, T.Tensor)
        self.assertIsInstance(np.float64(2.0) * x, T.Tensor)
        np.testing.assert_array_equal((1.0 - x).data, [0.0, -1.0])

    def test_softmax_constant(self):
        out = T.softmax(T.Tensor(np.full(7, 3.5)))
        np.testing.assert_allclose(out.data, np.full(7, 1 / 7))

    def test_errors(self):
        with self.assertRaises(ValueError):
            T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))
        with self.assertRaises(ValueError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
        with self.assertRaises(ValueError):
            T.gather(T.Tensor(np.ones(3)), [3])
        with self.assertRaises(ValueError):
            T.softmax(T.Tensor(np.ones(3)), axis=1)
        with self.assertRaises(ValueError):
            T.reshape(T.Tensor(np.ones(3)), (2, 2))


class TestAdam(unittest.TestCase):
    def test_zero_gradient(self):
        p = T.Tensor([1.0, 2.0], requires_grad=True)
        state = T.OptimizerState.for_params([p])
        T.adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        self.assertEqual(state.step, 1)

        T.adam_step([p], [None], state)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        self.assertEqual(state.step, 2)

    def test_first_step(self):
        p = T.Tensor([0.5], requires_grad=True)
        state = T.OptimizerState.for_params([p], learning_rate=0.1)
        T.adam_step([p], [np.ones(1)], state)
        self.assertAlmostEqual(float(p.data[0]), 0.4, places=7)

    def test_deterministic(self):
        grads = [np.array([0.3, -1.2]), np.array([[2.0]])]
        results = []
        for _ in range(2):
            params = [T.Tensor([1.0, 1.0]), T.Tensor([[3.0]])]
            state = T.OptimizerState.for_params(params, learning_rate=0.01)
            for _ in range(3):
                T.adam_step(params, grads, state)
            results.append([p.data.copy() for p in params])
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)

    def test_mismatch(self):
        p = T.Tensor([1.0])
        state = T.OptimizerState.for_params([p])
        with self.assertRaises(ValueError):
            T.adam_step([p], [np.ones(2)], state)
        with self.assertRaises(ValueError):
            T.adam_step([p, p], [None, None], state)


class TestArchive(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(1)
        self.tensors = {
            "a.weight": rng.normal(size=(3, 4)),
            "a.bias": np.zeros(4),
            "s": np.array(2.5),
        }
        self.config = {"channels": 1, "input_mode": "residual"}

    def test_round_trip(self):
        data = T.save_archive(self.tensors, self.config)
        tensors, config = T.load_archive(data)
        self.assertEqual(config, self.config)
        self.assertEqual(list(tensors), list(self.tensors))
        for name, value in self.tensors.items():
            np.testing.assert_array_equal(tensors[name], value)
        self.assertEqual(T.save_archive(tensors, config), data)

    def test_hash(self):
        data = T.save_archive(self.tensors, self.config)
        self.assertEqual(T.archive_hash(data), content_hash(data[12:-32]))
        self.assertNotEqual(T.archive_hash(data), T.archive_hash(T.save_archive(self.tensors, {})))

    def test_corruption(self):
        data = bytearray(T.save_archive(self.tensors, self.config))
        data[len(data) // 2] ^= 0x01
        with self.assertRaises(IntegrityError):
            T.load_archive(bytes(data))

    def test_malformed(self):
        data = T.save_archive(self.tensors, self.config)
        with self.assertRaises(FormatError):
            T.load_archive(b"NOTACKPT" + data[8:])
        with self.assertRaises(FormatError):
            T.load_archive(data[:8] + b"\x02\x00\x00\x00" + data[12:])
        with self.assertRaises(FormatError):
            T.load_archive(data[:20])
        with self.assertRaises(FormatError):
            T.archive_hash(b"short")


if __name__ == "__main__":
    unittest.main()
