"""Small numpy MLP with hand-written backprop and SGD with momentum."""

from __future__ import annotations

import numpy as np


def sinusoidal_embedding(u: np.ndarray, dim: int = 16, max_freq: float = 200.0) -> np.ndarray:
    """Embed fractional times ``u = t / T`` as [sin(f u), cos(f u)] over geometric frequencies."""
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.geomspace(1.0, max_freq, half)
    ang = u * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


class MLP:
    """Dense network with SiLU hidden layers and a linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator, zero_last: bool = False):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if last and zero_last:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(W)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def multiply_adds(self) -> int:
        """Multiply-adds for one forward pass of a single input."""
        return sum(a * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def forward(self, X: np.ndarray, keep: bool = False):
        h = X
        cache = [] if keep else None
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if i < n_layers - 1:
                a, sig = _silu(z)
                if keep:
                    cache.append((h, z, sig))
                h = a
            else:
                if keep:
                    cache.append((h, None, None))
                h = z
        return (h, cache) if keep else h

    def backward(self, cache, d_out: np.ndarray):
        """Return (grads aligned with ``params``, gradient w.r.t. the input)."""
        grads = [None] * (2 * len(self.weights))
        g = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            h_in, z, sig = cache[i]
            if z is not None:
                g = g * sig * (1.0 + z * (1.0 - sig))
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g


class MomentumSGD:
    """Plain SGD with heavy-ball momentum and global-norm clipping."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip: float = 5.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads) -> float:
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        scale = 1.0 if norm <= self.clip or norm == 0 else self.clip / norm
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * scale * g
            p += v
        return norm
