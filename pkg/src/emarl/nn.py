"""Minimal dense-network core on float64 numpy arrays.

Layers carry their own parameters and gradient accumulators. Forward passes
cache whatever the analytic backward pass needs; callers zero gradients,
run forward, seed an upstream gradient, and read the accumulated parameter
gradients. Everything is batched: inputs are (n, dim) arrays.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("identity", "relu")


def xavier_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(np.float64)


class Dense:
    """Affine layer with an optional ReLU: y = act(x @ W.T + b).

    weight has shape (out_dim, in_dim); bias has shape (out_dim,).
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = xavier_uniform(rng, out_dim, in_dim)
        self.bias = np.zeros(out_dim, dtype=np.float64)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self._x = None
        self._z = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected (n, {self.in_dim}) input, got {x.shape}")
        z = x @ self.weight.T + self.bias
        self._x = x
        self._z = z
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return z

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward before forward")
        if d_out.shape != self._z.shape:
            raise ValueError(f"upstream gradient shape {d_out.shape} != {self._z.shape}")
        if self.activation == "relu":
            d_z = d_out * (self._z > 0.0)
        else:
            d_z = d_out
        self.d_weight += d_z.T @ self._x
        self.d_bias += d_z.sum(axis=0)
        return d_z @ self.weight

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.d_weight, self.d_bias]


class LayerNorm:
    """Per-row normalization with learned gain and shift."""

    def __init__(self, dim: int, epsilon: float = 1e-5):
        self.dim = dim
        self.epsilon = epsilon
        self.gain = np.ones(dim, dtype=np.float64)
        self.shift = np.zeros(dim, dtype=np.float64)
        self.d_gain = np.zeros_like(self.gain)
        self.d_shift = np.zeros_like(self.shift)
        self._xhat = None
        self._inv_std = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected (n, {self.dim}) input, got {x.shape}")
        mean = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        self._xhat = xhat
        self._inv_std = inv_std
        return self.gain * xhat + self.shift

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._xhat is None:
            raise RuntimeError("backward before forward")
        xhat = self._xhat
        self.d_gain += (d_out * xhat).sum(axis=0)
        self.d_shift += d_out.sum(axis=0)
        d_xhat = d_out * self.gain
        # Jacobian of (x - mean) / sqrt(var + eps) applied row-wise.
        m1 = d_xhat.mean(axis=1, keepdims=True)
        m2 = (d_xhat * xhat).mean(axis=1, keepdims=True)
        return self._inv_std * (d_xhat - m1 - xhat * m2)

    def params(self) -> list[np.ndarray]:
        return [self.gain, self.shift]

    def grads(self) -> list[np.ndarray]:
        return [self.d_gain, self.d_shift]


class Sequential:
    """A stack of layers applied in order."""

    def __init__(self, layers: list):
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            d_out = layer.backward(d_out)
        return d_out

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def grads(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.grads())
        return out

    def zero_grads(self) -> None:
        for g in self.grads():
            g[...] = 0.0


def zero_grads(modules) -> None:
    for m in modules:
        for g in m.grads():
            g[...] = 0.0


def collect_params(modules) -> list[np.ndarray]:
    out = []
    for m in modules:
        out.extend(m.params())
    return out


def collect_grads(modules) -> list[np.ndarray]:
    out = []
    for m in modules:
        out.extend(m.grads())
    return out


def copy_params(src_modules, dst_modules) -> None:
    src = collect_params(src_modules)
    dst = collect_params(dst_modules)
    if len(src) != len(dst):
        raise ValueError("parameter lists differ in length")
    for s, d in zip(src, dst):
        if s.shape != d.shape:
            raise ValueError("parameter shapes differ")
        d[...] = s


class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if lr <= 0.0 or eps <= 0.0:
            raise ValueError("lr and eps must be positive")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def grad_check(loss_fn, params: list[np.ndarray], analytic: list[np.ndarray],
               h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn() must re-evaluate the scalar loss at the current parameter
    values; params are perturbed in place and restored. Relative error per
    component is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lo_hi = loss_fn()
            flat_p[i] = orig - h
            lo_lo = loss_fn()
            flat_p[i] = orig
            fd = (lo_hi - lo_lo) / (2.0 * h)
            denom = max(abs(flat_g[i]), abs(fd), 1e-8)
            worst = max(worst, abs(flat_g[i] - fd) / denom)
    return worst


def network_grad_check(modules, x: np.ndarray, h: float = 1e-5) -> float:
    """Gradient check of sum(stack(x)) for a list of layers applied in order."""
    stack = Sequential([lay for m in modules for lay in
                        (m.layers if isinstance(m, Sequential) else [m])])

    def loss_fn() -> float:
        return float(stack.forward(x).sum())

    stack.zero_grads()
    out = stack.forward(x)
    stack.backward(np.ones_like(out))
    return grad_check(loss_fn, stack.params(), stack.grads(), h=h)
