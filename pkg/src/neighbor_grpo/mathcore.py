"""Numerical primitives shared by the rest of the package.

Everything is float64. Gaussian draws come from :class:`RngStream`, which
wraps numpy's PCG64 bit generator for uniforms and turns them into normals
with the Box-Muller transform (both outputs of every pair are consumed, in
order), so a stream is fully determined by its seed.
"""

from __future__ import annotations

import math

import numpy as np


class RngStream:
    """Seeded, single-owner random stream.

    Uniforms: PCG64 ``random()`` (53-bit doubles in [0, 1)).
    Normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``::

        r = sqrt(-2 log(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)

    emitted as ``z0, z1, z0', z1', ...``. An odd leftover is kept for the next
    call, so ``gaussian(3)`` then ``gaussian(1)`` equals ``gaussian(4)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._spare: float | None = None

    def fork(self, stream_id: int) -> "RngStream":
        """Child stream derived from ``(seed, stream_id)``; parent state untouched."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(stream_id),))
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def gaussian(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be nonnegative")
        out = np.empty(n)
        i = 0
        if self._spare is not None and n > 0:
            out[0] = self._spare
            self._spare = None
            i = 1
        remaining = n - i
        if remaining > 0:
            pairs = (remaining + 1) // 2
            u = self._gen.random(2 * pairs)
            r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
            theta = 2.0 * math.pi * u[1::2]
            z = np.empty(2 * pairs)
            z[0::2] = r * np.cos(theta)
            z[1::2] = r * np.sin(theta)
            out[i:] = z[:remaining]
            if remaining % 2:
                self._spare = float(z[-1])
        return out

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        return self._gen.permutation(n)[:k]

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


def gaussian_sample(rng: RngStream, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return rng.gaussian(dim)


def log_softmax_neg(dists_sq) -> np.ndarray:
    """``log softmax(-d)`` with max-shift stabilization."""
    d = np.asarray(dists_sq, dtype=float)
    if d.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite squared distance")
    z = -(d - d.min())
    return z - math.log(np.exp(z).sum())


def softmax_neg_sqdist(dists_sq) -> np.ndarray:
    """Probabilities ``exp(-d_i) / sum_k exp(-d_k)``."""
    d = np.asarray(dists_sq, dtype=float)
    if d.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite squared distance")
    e = np.exp(-(d - d.min()))
    return e / e.sum()


def lp_norm(v, p: float) -> float:
    """``(sum |v_k|^p)^(1/p)``; a quasi-norm for ``p < 1``."""
    if not p > 0:
        raise ValueError(f"p must be positive, got {p}")
    a = np.abs(np.asarray(v, dtype=float))
    scale = a.max() if a.size else 0.0
    if scale == 0.0:
        return 0.0
    # factor out the max so |v|^p cannot under/overflow for tiny p
    return float(scale * np.sum((a / scale) ** p) ** (1.0 / p))


def mean_std(v, ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation; population (``ddof=0``) by default."""
    a = np.asarray(v, dtype=float)
    if a.size == 0:
        raise ValueError("empty input")
    m = float(a.mean())
    if a.size - ddof <= 0:
        return m, 0.0
    return m, float(math.sqrt(np.sum((a - m) ** 2) / (a.size - ddof)))


class Adam:
    """Adam on a flat parameter vector (no weight decay)."""

    def __init__(self, n_params: int, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """In-place descent step on ``params`` along ``grad``."""
        if self.lr == 0.0:
            return
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
