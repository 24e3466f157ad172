"""Testes para o motor de tensores, Adam, verificação de gradiente e arquivo NTAR."""
import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from neural import (
    BACKWARD_RULES,
    AdamState,
    ArchiveError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    glorot_uniform,
    grad_check,
    load_archive,
    save_archive,
)
from prng import XorShift64Star


def random_params(seed=0):
    rng = XorShift64Star(seed)
    return {
        "w1": rng.uniform_array((4, 6), -0.5, 0.5),
        "b1": rng.uniform_array((6,), -0.1, 0.1),
        "w2": rng.uniform_array((6, 1), -0.5, 0.5),
        "gain": rng.uniform_array((6,), 0.5, 1.5),
    }


class TestTape(unittest.TestCase):
    """Testes para as operações e o gradiente do Tape."""

    def test_every_op_has_backward_rule(self):
        """Testa que todas as operações do Tape têm regra de derivada."""
        ops = {"matmul", "add", "sub", "mul", "concat", "relu", "tanh", "layer_norm",
               "softmax", "sum", "mean", "reshape", "transpose", "mse"}
        self.assertEqual(set(BACKWARD_RULES), ops)

    def test_linear_gradient(self):
        """Testa d/dw de sum(x @ w) = x^T 1."""
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        tape = Tape()
        p = tape.watch({"w": np.ones((2, 3))})
        loss = tape.sum(tape.matmul(x, p["w"]))
        grads = tape.gradient(loss, p)
        np.testing.assert_allclose(grads["w"], np.array([[4.0] * 3, [6.0] * 3]))

    def test_backward_alias(self):
        """Testa que backward() é o mesmo que tape.gradient()."""
        tape = Tape()
        p = tape.watch({"a": np.array([2.0, 3.0])})
        loss = tape.sum(tape.mul(p["a"], p["a"]))
        np.testing.assert_allclose(backward(tape, loss, p)["a"], [4.0, 6.0])

    def test_frozen_leaf_gets_no_gradient(self):
        """Testa que folhas fora de trainable não aparecem nos gradientes."""
        tape = Tape()
        p = tape.watch({"a": np.ones(3), "b": np.ones(3)}, trainable=["a"])
        loss = tape.sum(tape.mul(p["a"], p["b"]))
        grads = tape.gradient(loss, p)
        self.assertEqual(set(grads), {"a"})

    def test_unused_leaf_gets_zero(self):
        """Testa gradiente zero para folha sem caminho até a perda."""
        tape = Tape()
        p = tape.watch({"a": np.ones(2), "unused": np.ones(2)})
        grads = tape.gradient(tape.sum(p["a"]), p)
        np.testing.assert_array_equal(grads["unused"], np.zeros(2))

    def test_gradient_check_small_network(self):
        """Testa gradiente analítico contra diferenças centrais numa rede com todas as operações."""
        x = XorShift64Star(3).uniform_array((2, 3, 4), -1.0, 1.0)
        target = np.array([0.3, -0.2])

        def f(tape, p):
            h = tape.tanh(tape.add(tape.matmul(x, p["w1"]), p["b1"]))
            h = tape.mul(tape.layer_norm(h), p["gain"])
            attn = tape.softmax(tape.matmul(h, tape.transpose(h, (0, 2, 1))), axis=-1)
            h = tape.concat([tape.matmul(attn, h), tape.relu(h)], axis=-1)
            h = tape.mean(h, axis=1)
            h = tape.sub(tape.sum(tape.reshape(h, (2, 2, 6)), axis=1), 0.1)
            out = tape.matmul(h, p["w2"])
            return tape.mse(tape.reshape(out, (2,)), target)

        error = grad_check(f, random_params(), n_probes=30)
        self.assertLess(error, 1e-4)

    def test_gradient_check_detects_wrong_rule(self):
        """Testa que uma regra de derivada corrompida é acusada pelo grad_check."""
        x = XorShift64Star(5).uniform_array((3, 4), -1.0, 1.0)
        target = np.array([0.2, -0.1, 0.4])
        original = BACKWARD_RULES["mse"]

        def doubled(grad, rec):
            return tuple(2.0 * g for g in original(grad, rec))

        def f(tape, p):
            out = tape.matmul(tape.tanh(tape.add(tape.matmul(x, p["w1"]), p["b1"])), p["w2"])
            return tape.mse(tape.reshape(out, (3,)), target)

        params = random_params(1)
        del params["gain"]
        self.assertLess(grad_check(f, params, n_probes=20), 1e-4)
        with patch.dict(BACKWARD_RULES, {"mse": doubled}):
            self.assertGreater(grad_check(f, params, n_probes=20), 1e-2)

    def test_softmax_rows_sum_to_one(self):
        """Testa linhas do softmax somando 1 ± 1e-12, inclusive com valores grandes."""
        x = XorShift64Star(8).uniform_array((5, 7), -50.0, 50.0)
        y = Tape().softmax(x, axis=-1).value
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(5), rtol=0, atol=1e-12)
        self.assertTrue((y >= 0.0).all())

    def test_layer_norm_statistics(self):
        """Testa média 0 e variância 1 por linha."""
        x = XorShift64Star(9).uniform_array((4, 16), -3.0, 5.0)
        y = Tape().layer_norm(x).value
        np.testing.assert_allclose(y.mean(axis=-1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), np.ones(4), atol=1e-8)

    def test_shape_errors(self):
        """Testa erros de forma."""
        tape = Tape()
        with self.assertRaises(ShapeError):
            tape.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with self.assertRaises(ShapeError):
            tape.add(np.ones(3), np.ones(4))
        with self.assertRaises(ShapeError):
            tape.mse(np.ones(2), np.ones(3))
        with self.assertRaises(ShapeError):
            tape.gradient(Tensor(np.ones(2)), {})

    def test_non_finite_detected(self):
        """Testa que NaN/inf geram NonFiniteError."""
        with self.assertRaises(NonFiniteError):
            Tensor(np.array([np.nan]))
        tape = Tape()
        with self.assertRaises(NonFiniteError):
            tape.mul(np.array([1e200]), np.array([1e200]))

    def test_item_requires_scalar(self):
        """Testa item() só para escalares."""
        self.assertEqual(Tensor(2.5).item(), 2.5)
        with self.assertRaises(ShapeError):
            Tensor(np.ones(2)).item()


class TestAdam(unittest.TestCase):
    """Testes para adam_step."""

    def test_first_step_moves_by_learning_rate(self):
        """Testa que o primeiro passo tem tamanho ~lr no sentido oposto ao gradiente."""
        params = {"w": np.array([1.0, -1.0])}
        state = AdamState.for_params(params, learning_rate=0.1)
        updated, state = adam_step(params, {"w": np.array([2.0, -3.0])}, state)
        np.testing.assert_allclose(updated["w"], [0.9, -0.9], atol=1e-6)
        self.assertEqual(state.step, 1)
        np.testing.assert_array_equal(params["w"], [1.0, -1.0])

    def test_params_without_gradient_untouched(self):
        """Testa que parâmetros congelados ficam bit a bit iguais."""
        params = {"w": np.array([1.0]), "frozen": np.array([5.0])}
        state = AdamState.for_params(params, learning_rate=0.1)
        updated, _ = adam_step(params, {"w": np.array([1.0])}, state)
        self.assertIs(updated["frozen"], params["frozen"])

    def test_zero_gradient_leaves_params(self):
        """Testa gradiente zero no primeiro passo: parâmetros inalterados."""
        params = {"w": np.array([1.5, -2.0])}
        state = AdamState.for_params(params, learning_rate=0.1)
        updated, _ = adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(updated["w"], params["w"])

    def test_minimizes_quadratic(self):
        """Testa convergência em (w - 3)^2."""
        params = {"w": np.array([0.0])}
        state = AdamState.for_params(params, learning_rate=0.1)
        for _ in range(500):
            params, state = adam_step(params, {"w": 2.0 * (params["w"] - 3.0)}, state)
        self.assertAlmostEqual(float(params["w"][0]), 3.0, places=2)


class TestInitAndArchive(unittest.TestCase):
    """Testes para glorot_uniform e o arquivo NTAR."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "tensors.ntar")

    def tearDown(self):
        self.tmp.cleanup()

    def test_glorot_limits_and_determinism(self):
        """Testa limites ±sqrt(6/(fan_in+fan_out)) e reprodutibilidade."""
        a = glorot_uniform(10, 20, XorShift64Star(1))
        b = glorot_uniform(10, 20, XorShift64Star(1))
        limit = np.sqrt(6.0 / 30.0)
        self.assertEqual(a.shape, (10, 20))
        self.assertTrue((np.abs(a) <= limit).all())
        np.testing.assert_array_equal(a, b)

    def test_archive_preserves_tensors_and_metadata(self):
        """Testa que os tensores voltam bit a bit e os metadados intactos."""
        tensors = {"b": np.arange(3.0), "a.w": np.linspace(-1, 1, 6).reshape(2, 3), "s": np.array(1.5)}
        save_archive(self.path, tensors, {"format": "x", "n": 1})
        loaded, meta = load_archive(self.path)
        self.assertEqual(list(loaded), ["a.w", "b", "s"])
        for name, value in tensors.items():
            np.testing.assert_array_equal(loaded[name], value)
            self.assertEqual(loaded[name].shape, value.shape)
        self.assertEqual(meta, {"format": "x", "n": 1})

    def test_archive_rejects_bad_magic(self):
        """Testa assinatura inválida."""
        with open(self.path, "wb") as fh:
            fh.write(b"XXXX" + b"\x00" * 16)
        with self.assertRaises(ArchiveError):
            load_archive(self.path)

    def test_archive_rejects_truncation(self):
        """Testa arquivo truncado."""
        save_archive(self.path, {"w": np.ones((4, 4))})
        with open(self.path, "rb") as fh:
            data = fh.read()
        with open(self.path, "wb") as fh:
            fh.write(data[:-8])
        with self.assertRaises(ArchiveError):
            load_archive(self.path)


if __name__ == "__main__":
    unittest.main()
