"""Numpy layers with hand-written backward passes.

Every layer caches what its backward pass needs during `forward`;
`backward` takes the gradient of the loss with respect to the layer output,
accumulates parameter gradients and returns the gradient with respect to
the input. Everything runs in float64 so finite-difference checks are
meaningful.
"""

import math

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_prime(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def mish(x: np.ndarray) -> np.ndarray:
    return x * np.tanh(softplus(x))


def mish_prime(x: np.ndarray) -> np.ndarray:
    tsp = np.tanh(softplus(x))
    return tsp + x * (1.0 - tsp**2) * sigmoid(x)


def sinusoidal_embedding(values: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features of scalar inputs (timesteps or slot indices).

    Args:
        values: Array of shape (B,)
        dim: Even embedding width

    Returns:
        Array of shape (B, dim)
    """
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


class Layer:
    """Base class: named parameters with matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray, np.ndarray]]:
        return [(f"{prefix}{name}", self.params[name], self.grads[name]) for name in self.params]


class Linear(Layer):
    """Affine map over the last axis, initialized uniformly in ±1/sqrt(fan_in)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.params["W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.params["b"] = rng.uniform(-bound, bound, size=(n_out,))
        self.zero_grad()
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        n_in, n_out = self.params["W"].shape
        self.grads["W"] += x.reshape(-1, n_in).T @ dy.reshape(-1, n_out)
        self.grads["b"] += dy.reshape(-1, n_out).sum(axis=0)
        return dy @ self.params["W"].T


class SiLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return silu(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * silu_prime(self._x)


class Mish(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return mish(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * mish_prime(self._x)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}{i}."))
        return out


def mlp(sizes: list[int], rng: np.random.Generator, activation: type[Layer] = SiLU) -> Sequential:
    """Linear layers of the given widths with `activation` between them."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:], strict=False)):
        layers.append(Linear(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(activation())
    return Sequential(*layers)


class MultiHeadAttention(Layer):
    """Self-attention over slots with a key-padding mask.

    Input is (B, S, D); `mask` is (B, S) with True for valid slots. Padded
    slots are never attended to and their outputs are zero.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"Attention width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self._cache: tuple | None = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, S, _ = x.shape
        return x.reshape(B, S, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, _, S, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, S, self.dim)

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        B, S, _ = x.shape
        if mask is None:
            mask = np.ones((B, S), dtype=bool)
        q = self._split(self.q.forward(x))
        k = self._split(self.k.forward(x))
        v = self._split(self.v.forward(x))

        scale = 1.0 / math.sqrt(self.dim // self.heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask[:, None, None, :], scores, -1e9)
        scores = scores - scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=-1, keepdims=True)

        ctx = self._merge(attn @ v)
        out = self.o.forward(ctx) * mask[:, :, None]
        self._cache = (q, k, v, attn, mask, scale)
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        q, k, v, attn, mask, scale = self._cache
        dy = dy * mask[:, :, None]
        dctx = self._split(self.o.backward(dy))

        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q

        return (
            self.q.backward(self._merge(dq))
            + self.k.backward(self._merge(dk))
            + self.v.backward(self._merge(dv))
        )

    def zero_grad(self) -> None:
        for layer in (self.q, self.k, self.v, self.o):
            layer.zero_grad()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for name, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o)):
            out.extend(layer.named_parameters(f"{prefix}{name}."))
        return out


class AttentionBlock(Layer):
    """Residual attention followed by a residual feed-forward layer."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ff = mlp([dim, 2 * dim, dim], rng)
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        self._mask = mask
        h = x + self.attn.forward(x, mask)
        return h + self.ff.forward(h) * mask[:, :, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = dy + self.ff.backward(dy * self._mask[:, :, None])
        return dh + self.attn.backward(dh)

    def zero_grad(self) -> None:
        self.attn.zero_grad()
        self.ff.zero_grad()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, np.ndarray, np.ndarray]]:
        return self.attn.named_parameters(f"{prefix}attn.") + self.ff.named_parameters(
            f"{prefix}ff."
        )


class Adam:
    """Adam over a fixed list of (name, param, grad) triples, updating in place."""

    def __init__(
        self,
        parameters: list[tuple[str, np.ndarray, np.ndarray]],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.parameters = parameters
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for _, p, _ in parameters]
        self.v = [np.zeros_like(p) for _, p, _ in parameters]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (_, p, _), g, m, v in zip(self.parameters, grads, self.m, self.v, strict=True):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
