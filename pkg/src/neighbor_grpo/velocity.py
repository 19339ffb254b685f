"""Velocity field v(x, t, c): a tanh MLP with a hand-written backward pass.

The network input is ``[x, t, c]`` (raw scalar time, optional one-hot
condition) and the output has the data dimension. Parameters live in one
flat float64 vector; per-layer weights and biases are views into it, so the
optimizer and the finite-difference checks work on a single array.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mathcore import Adam, RngStream

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = (64, 64, 64)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def one_hot(index: int, n: int) -> np.ndarray:
    c = np.zeros(n)
    c[index] = 1.0
    return c


class VelocityModel:
    def __init__(self, data_dim: int, cond_dim: int = 0, hidden=DEFAULT_HIDDEN, params=None):
        if data_dim < 1 or cond_dim < 0 or any(h < 1 for h in hidden):
            raise ValueError("layer sizes must be positive")
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        self.layer_dims = [data_dim + 1 + cond_dim, *hidden, data_dim]
        self._shapes = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self._shapes.append((offset, fan_in, fan_out))
            offset += fan_in * fan_out + fan_out
        self.n_params = offset
        if params is None:
            self.params = np.zeros(offset)
        else:
            params = np.asarray(params, dtype=float)
            if params.shape != (offset,):
                raise ValueError(f"expected {offset} parameters, got {params.shape}")
            self.params = params.copy()

    activation = "tanh"

    @classmethod
    def initialized(cls, data_dim, rng: RngStream, cond_dim=0, hidden=DEFAULT_HIDDEN):
        """Gaussian init with std 1/sqrt(fan_in); zero biases."""
        model = cls(data_dim, cond_dim, hidden)
        for W, _ in model.layers():
            fan_in = W.shape[0]
            W[...] = rng.gaussian(W.size).reshape(W.shape) / math.sqrt(fan_in)
        return model

    def layers(self, flat=None):
        """(W, b) views into ``flat`` (default: the model parameters)."""
        flat = self.params if flat is None else flat
        out = []
        for offset, fan_in, fan_out in self._shapes:
            w_end = offset + fan_in * fan_out
            out.append((flat[offset:w_end].reshape(fan_in, fan_out), flat[w_end : w_end + fan_out]))
        return out

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.data_dim, self.cond_dim, tuple(self.layer_dims[1:-1]), self.params)

    def _inputs(self, x, t, c):
        xb, single = _as_batch(x)
        n = xb.shape[0]
        if xb.shape[1] != self.data_dim:
            raise ValueError(f"x has {xb.shape[1]} entries, model expects {self.data_dim}")
        tb = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (n, 1))
        parts = [xb, tb]
        if self.cond_dim:
            if c is None:
                raise ValueError("conditional model needs a condition vector")
            cb = np.asarray(c, dtype=float)
            cb = np.broadcast_to(cb.reshape(-1, self.cond_dim), (n, self.cond_dim))
            parts.append(cb)
        elif c is not None and np.size(c) != 0:
            raise ValueError("unconditional model got a condition vector")
        return np.concatenate(parts, axis=1), single

    def _run(self, z):
        acts = [z]
        h = z
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            h = h @ W + b
            if i < len(layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x, t, c=None) -> np.ndarray:
        z, single = self._inputs(x, t, c)
        out = self._run(z)[-1]
        return out[0] if single else out

    __call__ = forward

    def backward(self, x, t, c, upstream):
        """Gradients of ``sum_rows <upstream, v(x, t, c)>``.

        Returns ``(param_grad, input_grad)``; ``param_grad`` is flat and summed
        over the batch, ``input_grad`` has the shape of ``x``.
        """
        z, single = self._inputs(x, t, c)
        u = np.asarray(upstream, dtype=float).reshape(z.shape[0], -1)
        if u.shape[1] != self.data_dim:
            raise ValueError("upstream must have data_dim entries")
        acts = self._run(z)
        grad = np.zeros(self.n_params)
        layers = self.layers()
        glayers = self.layers(grad)
        delta = u
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            gW, gb = glayers[i]
            gW[...] = acts[i].T @ delta
            gb[...] = delta.sum(axis=0)
            delta = delta @ W.T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        gx = delta[:, : self.data_dim]
        return grad, (gx[0] if single else gx)

    # checkpoint I/O -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "activation": self.activation,
            "layer_dims": list(self.layer_dims),
            "cond_dim": self.cond_dim,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VelocityModel":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('format_version')}")
        if d.get("activation") != cls.activation:
            raise ValueError(f"unsupported activation {d.get('activation')}")
        dims = d["layer_dims"]
        cond_dim = d["cond_dim"]
        data_dim = dims[-1]
        if dims[0] != data_dim + 1 + cond_dim:
            raise ValueError("layer_dims inconsistent with cond_dim")
        return cls(data_dim, cond_dim, tuple(dims[1:-1]), d["params"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "VelocityModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# toy data


def circle_mixture(n: int, rng: RngStream, modes: int = 8, radius: float = 2.0, std: float = 0.15):
    """Points from ``modes`` isotropic Gaussians evenly placed on a circle.

    Returns ``(points, labels)``.
    """
    labels = rng.integers(0, modes, size=n)
    centers = mixture_centers(modes, radius)
    pts = centers[labels] + std * rng.gaussian(2 * n).reshape(n, 2)
    return pts, labels


def mixture_centers(modes: int = 8, radius: float = 2.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def two_moons(n: int, rng: RngStream, noise: float = 0.1):
    labels = rng.integers(0, 2, size=n)
    s = np.pi * rng.uniform(n)
    x = np.where(labels == 0, np.cos(s), 1.0 - np.cos(s))
    y = np.where(labels == 0, np.sin(s), 0.5 - np.sin(s))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 1.5
    return pts + noise * rng.gaussian(2 * n).reshape(n, 2), labels


# ---------------------------------------------------------------------------
# rectified-flow pretraining


def fm_pretrain(model: VelocityModel, dataset, rng: RngStream, steps: int, lr: float,
                batch_size: int = 256, labels=None, loss_log: list | None = None) -> VelocityModel:
    """Regress v(x_t, t) onto ``eps - x0`` with ``x_t = (1 - t) x0 + t eps``.

    Loss is the mean over batch and coordinates. Returns a trained copy;
    per-step losses are appended to ``loss_log`` when given.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("dataset must be a nonempty (n, d) array")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model.cond_dim and labels is None:
        raise ValueError("conditional pretraining needs labels")
    model = model.copy()
    opt = Adam(model.n_params, lr)
    d = model.data_dim
    eye = np.eye(model.cond_dim) if model.cond_dim else None
    for step in range(steps):
        idx = rng.integers(0, len(data), size=batch_size)
        x0 = data[idx]
        eps = rng.gaussian(batch_size * d).reshape(batch_size, d)
        t = rng.uniform(batch_size)
        xt = (1 - t)[:, None] * x0 + t[:, None] * eps
        c = eye[np.asarray(labels)[idx]] if eye is not None else None
        resid = model.forward(xt, t, c) - (eps - x0)
        loss = float(np.mean(resid**2))
        grad, _ = model.backward(xt, t, c, 2.0 * resid / resid.size)
        opt.step(model.params, grad)
        if loss_log is not None:
            loss_log.append(loss)
        if (step + 1) % 1000 == 0:
            log.info("pretrain step %d loss %.5f", step + 1, loss)
    return model


# ---------------------------------------------------------------------------
# analytic Gaussian flow


@dataclass(frozen=True)
class GaussianFlowOracle:
    """Exact velocity field for data ``N(mean, scale**2 I)``.

    With ``x_t = (1-t) x0 + t eps`` every coordinate of ``(x_t, eps - x0)`` is
    jointly Gaussian, so the regression target is linear in ``x``::

        var_t = (1-t)^2 s^2 + t^2
        v(x, t) = -mu + (t - (1-t) s^2) / var_t * (x - (1-t) mu)
    """

    data_mean: tuple
    data_cov_scale: float

    def __post_init__(self):
        if not self.data_cov_scale > 0:
            raise ValueError("data_cov_scale must be positive")
        object.__setattr__(self, "data_mean", tuple(float(m) for m in np.atleast_1d(self.data_mean)))

    @property
    def data_dim(self) -> int:
        return len(self.data_mean)

    def marginal_var(self, t):
        s2 = self.data_cov_scale**2
        return (1 - t) ** 2 * s2 + t**2

    def forward(self, x, t, c=None):
        return oracle_velocity(self, x, t)

    __call__ = forward

    def exact_flow(self, x1, t):
        """Deterministic flow map from noise ``x1`` at time 1 to time ``t``."""
        mu = np.asarray(self.data_mean)
        return (1 - t) * mu + math.sqrt(self.marginal_var(t)) * np.asarray(x1, dtype=float)


def oracle_velocity(o: GaussianFlowOracle, x, t) -> np.ndarray:
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0) or np.any(t_arr > 1):
        raise ValueError("oracle velocity needs 0 < t <= 1")
    mu = np.asarray(o.data_mean)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mu.size:
        raise ValueError("dimension mismatch")
    s2 = o.data_cov_scale**2
    if t_arr.ndim:
        t_arr = t_arr.reshape(-1, 1)
    coef = (t_arr - (1 - t_arr) * s2) / o.marginal_var(t_arr)
    return -mu + coef * (x - (1 - t_arr) * mu)
