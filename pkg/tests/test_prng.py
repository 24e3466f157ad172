"""Testes para o gerador pseudoaleatório."""
import unittest

from prng import XorShift64Star, derive_seed, splitmix64


class TestSplitMix64(unittest.TestCase):
    """Testes para splitmix64."""

    def test_reference_sequence_from_zero(self):
        """Testa a sequência de referência a partir do estado 0."""
        state = 0
        outputs = []
        for _ in range(3):
            out, state = splitmix64(state)
            outputs.append(out)
        self.assertEqual(outputs, [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F])

    def test_derive_seed_depends_on_labels(self):
        """Testa que rótulos diferentes geram sementes diferentes e estáveis."""
        self.assertEqual(derive_seed(3, "init"), derive_seed(3, "init"))
        self.assertNotEqual(derive_seed(3, "init"), derive_seed(3, "batches"))
        self.assertNotEqual(derive_seed(3, "init"), derive_seed(4, "init"))
        self.assertNotEqual(derive_seed(3, "finetune", 1), derive_seed(3, "finetune", 11))


class TestXorShift64Star(unittest.TestCase):
    """Testes para XorShift64Star."""

    def test_reference_sequence_seed_zero(self):
        """Testa os três primeiros valores com semente 0."""
        rng = XorShift64Star(0)
        self.assertEqual(
            [rng.next_u64() for _ in range(3)],
            [0x7BBCB40D550682D0, 0xDE7FE413D00CC9FD, 0xB3C638353C668C91],
        )

    def test_same_seed_same_stream(self):
        """Testa determinismo para a mesma semente."""
        a, b = XorShift64Star(42), XorShift64Star(42)
        self.assertEqual([a.uniform() for _ in range(20)], [b.uniform() for _ in range(20)])

    def test_uniform_range(self):
        """Testa que uniform fica em [low, high)."""
        rng = XorShift64Star(7)
        values = [rng.uniform(0.01, 0.2) for _ in range(2000)]
        self.assertTrue(all(0.01 <= v < 0.2 for v in values))

    def test_uniform_array_shape(self):
        """Testa forma e limites de uniform_array."""
        values = XorShift64Star(1).uniform_array((3, 4), -1.0, 1.0)
        self.assertEqual(values.shape, (3, 4))
        self.assertTrue(((values >= -1.0) & (values < 1.0)).all())

    def test_integers_and_choice(self):
        """Testa integers em [0, upper) e choice sobre a sequência."""
        rng = XorShift64Star(5)
        draws = [rng.integers(4) for _ in range(500)]
        self.assertEqual(set(draws), {0, 1, 2, 3})
        self.assertIn(rng.choice(("FC-1", "LC-1")), ("FC-1", "LC-1"))
        with self.assertRaises(ValueError):
            rng.integers(0)
        with self.assertRaises(ValueError):
            rng.choice(())

    def test_permutation_is_permutation(self):
        """Testa que permutation devolve todos os índices uma única vez."""
        order = XorShift64Star(9).permutation(50)
        self.assertEqual(sorted(order), list(range(50)))
        self.assertNotEqual(order, list(range(50)))


if __name__ == "__main__":
    unittest.main()
