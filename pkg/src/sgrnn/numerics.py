"""Dense float64 linear algebra and seedable random sampling.

Every tensor in this package is a numpy ``float64`` array; matrices are
2-D and row-major. Operations here validate shapes and keep summation
orders deterministic so that a whole training run is a pure function of
(seed, config, corpus bytes).

Randomness comes from :class:`SeededRng`, a counter-based splitmix64
generator. The algorithm is frozen: changing it would silently change
every experiment, so treat the constants below as part of the file
format.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "matmul",
    "sigmoid",
    "tanh",
    "hadamard",
    "softmax_rows",
    "SeededRng",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # splitmix64 stream increment
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_U53 = 2.0**-53


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with explicit shape validation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic sigmoid, stable for large |x|."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(x)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; operands must have identical shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return a * b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class SeededRng:
    """Counter-based splitmix64 generator with a serializable state.

    The state is a single 64-bit counter advanced by ``_GAMMA`` per draw;
    output i is the splitmix64 finalizer applied to ``state + i * _GAMMA``.
    Uniforms are ``((bits >> 11) + 1) * 2**-53`` in (0, 1]; normal draws
    use Box-Muller on uniform pairs (odd requests discard the spare so the
    counter remains the only state). Identical seeds therefore give
    identical sequences on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = self.seed

    # -- core stream ------------------------------------------------------

    def _next_bits(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs as a uint64 array."""
        if n < 0:
            raise ValueError("draw count must be >= 0")
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(_GAMMA)
        z ^= z >> np.uint64(30)
        z *= np.uint64(_MIX1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_MIX2)
        z ^= z >> np.uint64(31)
        self._state = (self._state + n * _GAMMA) & _MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """n i.i.d. uniforms in (0, 1]."""
        bits = self._next_bits(n)
        return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * _U53

    def normal(self, n: int) -> np.ndarray:
        """n i.i.d. standard normals via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    # -- tensor-shaped draws ----------------------------------------------

    def gaussian(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """rows x cols matrix of i.i.d. N(mean, std^2) draws; std=0 is constant."""
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        if std == 0.0:
            return np.full((rows, cols), float(mean))
        z = self.normal(rows * cols).reshape(rows, cols)
        return mean + std * z

    def bernoulli_mask(self, rows: int, cols: int, keep_prob: float) -> np.ndarray:
        """0/1 matrix with P(entry == 1) == keep_prob; keep_prob in (0, 1]."""
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
        u = self.uniform(rows * cols).reshape(rows, cols)
        return (u <= keep_prob).astype(np.float64)

    def uniform_range(self, rows: int, cols: int, low: float, high: float) -> np.ndarray:
        """rows x cols matrix uniform over (low, high]."""
        return low + (high - low) * self.uniform(rows * cols).reshape(rows, cols)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic random permutation of range(n) (argsort of uniforms)."""
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, probs: np.ndarray) -> int:
        """Index drawn from a probability vector by inverse CDF."""
        u = self.uniform(1)[0]
        return int(np.searchsorted(np.cumsum(probs), u, side="left").clip(0, len(probs) - 1))

    # -- stream management --------------------------------------------------

    def derive(self, tag: int) -> "SeededRng":
        """Independent child stream; deterministic in (seed, tag)."""
        mixed = SeededRng((self.seed ^ (tag * _GAMMA)) & _MASK64)
        mixed._state = int(mixed._next_bits(1)[0])
        mixed.seed = mixed._state
        return mixed

    def get_state(self) -> dict:
        return {"seed": self.seed, "counter": self._state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"])
        rng._state = int(state["counter"]) & _MASK64
        return rng
