"""Small dense networks with hand-coded backprop.

The conditional regressors are tiny (two tanh hidden layers), so the forward
and backward passes are written out in numpy rather than pulling in an autodiff
framework. Parameters serialize to a flat float64 vector in layer order, each
layer as its row-major weight matrix followed by its bias.
"""

from __future__ import annotations

import numpy as np

from assim.rng import SeededRng


class Mlp:
    """Fully connected network, tanh hidden units, linear output head."""

    def __init__(self, widths: list[int], rng: SeededRng | None = None):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                scale = np.sqrt(2.0 / (fan_in + fan_out))
                w = scale * rng.standard_normal((fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray):
        """Returns (output (B, d_out), activation cache for backward)."""
        acts = [np.asarray(x, float)]
        out = acts[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = out @ w + b
            if i < last:
                out = np.tanh(out)
            acts.append(out)
        return out, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts, grad_out: np.ndarray):
        """Parameter gradients given d(loss)/d(output); mirrors forward()."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = np.asarray(grad_out, float)
        for i in reversed(range(len(self.weights))):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads_w, grads_b

    # flat serialization: layer-major, row-major weights then bias
    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = vec[pos:pos + b.size].copy()
            pos += b.size

    def copy(self) -> "Mlp":
        dup = Mlp(self.widths)
        dup.set_flat(self.get_flat())
        return dup


class Adam:
    """Adaptive-moment optimizer over a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Returns the parameter increment for a descent step on ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        rate = self.lr if lr is None else lr
        return -rate * m_hat / (np.sqrt(v_hat) + self.eps)
