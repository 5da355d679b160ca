"""Small dense networks with explicit parameters and hand-written
reverse-mode gradients.

One architecture serves every role in the toy pipeline: denoisers condition
on the noise level through an extra scalar input channel (log(sigma)/4), and
the one-step generator is the same network read with that channel pinned.
Gradients are assembled manually so the package needs no autodiff framework
and every update is inspectable; correctness is pinned to finite differences
in the tests.
"""

from __future__ import annotations

import numpy as np

from .errors import PreconditionError


def silu(z: np.ndarray) -> np.ndarray:
    """Sigmoid-weighted linear unit, z * sigmoid(z)."""
    return z / (1.0 + np.exp(-z))


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


class DenseNet:
    """Fully-connected net: Linear -> SiLU blocks, linear output layer.

    ``layer_sizes[0]`` counts the noise-level channel, so a 2-D denoiser with
    three hidden layers of 64 units is ``[3, 64, 64, 64, 2]``.  Parameters are
    float64 arrays; ``weights[i]`` has shape (fan_out, fan_in).
    """

    def __init__(self, layer_sizes: list[int], rng: np.random.Generator):
        if len(layer_sizes) < 2 or any(n < 1 for n in layer_sizes):
            raise PreconditionError(f"bad layer sizes {layer_sizes}")
        self.layer_sizes = list(layer_sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(scale * rng.standard_normal((fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def data_dim(self) -> int:
        """Dimension of the data part of the input (excludes the sigma channel)."""
        return self.layer_sizes[0] - 1

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "DenseNet":
        dup = object.__new__(DenseNet)
        dup.layer_sizes = list(self.layer_sizes)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    # -- forward / backward ------------------------------------------------

    def _stack_input(self, x: np.ndarray, sigma) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.data_dim:
            raise PreconditionError(
                f"input has {x.shape[1]} features, net expects {self.data_dim}"
            )
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (x.shape[0],))
        channel = np.log(sigma)[:, None] / 4.0
        return np.concatenate([x, channel], axis=1)

    def forward(self, x: np.ndarray, sigma) -> np.ndarray:
        """Evaluate the net on a batch (n, data_dim) at noise level(s) sigma."""
        out, _ = self.forward_cached(x, sigma)
        return out

    def forward_cached(self, x: np.ndarray, sigma):
        """Forward pass keeping activations for a later backward pass."""
        a = self._stack_input(x, sigma)
        pre = []
        acts = [a]
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            a = silu(z) if i < n_layers - 1 else z
            acts.append(a)
        return a, (pre, acts)

    def backward(self, cache, upstream: np.ndarray):
        """Reverse pass: gradients of sum(upstream * output) in params and input.

        Returns ``(grads, d_input)`` where ``grads`` matches the structure of
        ``parameters()`` and ``d_input`` is the (n, data_dim) gradient with
        respect to the data part of the input (the sigma channel is treated
        as a constant).
        """
        pre, acts = cache
        delta = np.atleast_2d(np.asarray(upstream, dtype=float))
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                delta = delta * silu_grad(pre[i])
            w_grads[i] = delta.T @ acts[i]
            b_grads[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i]
        return w_grads + b_grads, delta[:, : self.data_dim]

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        """Live references, ordered weights then biases (update in place)."""
        return self.weights + self.biases

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params():
            raise PreconditionError(f"expected {self.n_params()} values, got {flat.size}")
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def params_digest(self) -> str:
        """Stable hash of all parameters; used to assert immutability."""
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


class Adam:
    """Adam with the fixed constants beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: list[np.ndarray], lr: float):
        self.lr = lr
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
