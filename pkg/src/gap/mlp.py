"""Small feed-forward network with manual backprop and an Adam optimizer.

Used for both the one-step forecaster and the score network.  Kept in plain
numpy so training is deterministic for a fixed seed regardless of BLAS
threading (all arrays here are small).
"""
from __future__ import annotations

import numpy as np

__all__ = ["MLP", "Adam"]


class MLP:
    """tanh hidden layers, linear output: sizes = [in, h1, ..., out]."""

    def __init__(self, sizes: list[int], seed: int):
        rng = np.random.Generator(np.random.Philox(key=int(seed)))
        self.sizes = list(sizes)
        self.Ws = []
        self.bs = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            # Glorot scaling keeps tanh activations in range at init
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.Ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.bs.append(np.zeros(fan_out))

    def forward(self, X: np.ndarray) -> np.ndarray:
        H = X
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            H = H @ W + b
            if i != last:
                H = np.tanh(H)
        return H

    def forward_cache(self, X: np.ndarray):
        acts = [X]  # post-activation input of each layer
        H = X
        last = len(self.Ws) - 1
        for i, (W, b) in enumerate(zip(self.Ws, self.bs)):
            H = H @ W + b
            if i != last:
                H = np.tanh(H)
            acts.append(H)
        return H, acts

    def backward(self, acts, dout: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output); returns (dWs, dbs)."""
        dWs = [None] * len(self.Ws)
        dbs = [None] * len(self.bs)
        delta = dout
        for i in range(len(self.Ws) - 1, -1, -1):
            dWs[i] = acts[i].T @ delta
            dbs[i] = delta.sum(axis=0)
            if i > 0:
                # acts[i] is tanh output of layer i-1: d tanh = 1 - tanh^2
                delta = (delta @ self.Ws[i].T) * (1.0 - acts[i] ** 2)
        return dWs, dbs

    # flat-vector access, used by finite-difference gradient checks
    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.Ws + self.bs])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for arr in self.Ws + self.bs:
            n = arr.size
            arr[...] = flat[pos:pos + n].reshape(arr.shape)
            pos += n
        if pos != flat.size:
            raise ValueError("flat parameter size mismatch")

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.Ws + self.bs)


class Adam:
    def __init__(self, net: MLP, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in net.Ws + net.bs]
        self.v = [np.zeros_like(a) for a in net.Ws + net.bs]

    def step(self, net: MLP, dWs, dbs) -> None:
        self.t += 1
        grads = dWs + dbs
        params = net.Ws + net.bs
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
