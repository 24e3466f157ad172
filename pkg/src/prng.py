"""
Gerador pseudoaleatório determinístico usado por todo o projeto.

Implementa o xorshift64* (registrador de deslocamento de 64 bits com
multiplicador 0x2545F4914F6CDD1D), semeado via SplitMix64. A mesma semente
produz a mesma sequência em qualquer implementação que siga as mesmas
operações, o que mantém datasets e treinos reproduzíveis.

Sequência de referência (SplitMix64, estado inicial 0):
    0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F
Sequência de referência (XorShift64Star(seed=0)):
    0x7BBCB40D550682D0, 0xDE7FE413D00CC9FD, 0xB3C638353C668C91
"""
from __future__ import annotations

from typing import List, Sequence, Tuple, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_XORSHIFT_MULTIPLIER = 0x2545F4914F6CDD1D

T = TypeVar("T")


def splitmix64(state: int) -> Tuple[int, int]:
    """Avança o SplitMix64 e retorna (saída, novo estado)."""
    state = (state + _GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), state


def derive_seed(seed: int, *labels: object) -> int:
    """
    Deriva uma semente independente para um propósito específico.

    Ex.: derive_seed(3, "init") e derive_seed(3, "shuffle") geram fluxos
    diferentes a partir da mesma semente de experimento.
    """
    out, state = splitmix64(seed & MASK64)
    for label in labels:
        for byte in str(label).encode("utf-8"):
            out, state = splitmix64(state ^ out ^ byte)
        out, state = splitmix64(state ^ out)
    return out


class XorShift64Star:
    """
    Gerador xorshift64* de 64 bits.

    Attributes:
        state: Estado interno (nunca zero).
    """

    def __init__(self, seed: int) -> None:
        state, _ = splitmix64(seed & MASK64)
        # xorshift não sai do estado zero
        self.state = state or _GOLDEN_GAMMA

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x = (x ^ (x << 25)) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * _XORSHIFT_MULTIPLIER) & MASK64

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Real uniforme em [low, high) com 53 bits de mantissa."""
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def uniform_array(self, shape: Sequence[int], low: float, high: float) -> np.ndarray:
        """Preenche um array (ordem row-major) com reais uniformes em [low, high)."""
        count = int(np.prod(shape)) if len(shape) else 1
        values = np.fromiter((self.uniform(low, high) for _ in range(count)), dtype=np.float64, count=count)
        return values.reshape(tuple(shape))

    def integers(self, upper: int) -> int:
        """Inteiro uniforme em [0, upper), sem viés (rejeição)."""
        if upper <= 0:
            raise ValueError("upper deve ser positivo.")
        limit = (1 << 64) - ((1 << 64) % upper)
        while True:
            value = self.next_u64()
            if value < limit:
                return value % upper

    def choice(self, items: Sequence[T]) -> T:
        if not items:
            raise ValueError("Sequência vazia.")
        return items[self.integers(len(items))]

    def permutation(self, n: int) -> List[int]:
        """Permutação de range(n) via Fisher-Yates."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            order[i], order[j] = order[j], order[i]
        return order
