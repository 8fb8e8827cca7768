"""Small layer library and Adam on top of :mod:`icloco.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; parameters are found by walking attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ValueError(f"state is missing parameters: {missing}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.astype(T.get_dtype()).copy()


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = param(rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x):
        return T.matmul(x, self.weight) + self.bias

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.shift = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.eps) * self.gain + self.shift

    def apply(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + self.eps) * self.gain.data + self.shift.data


class MLP(Module):
    """Linear -> GELU -> ... -> Linear."""

    def __init__(self, sizes, rng: np.random.Generator, out_gain: float = 1.0):
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, gain=out_gain if i == n - 1 else 1.0) for i in range(n)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            x = layer.apply(x)
            if i < len(self.layers) - 1:
                x = gelu_np(x)
        return x


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + T.erf(x / np.sqrt(2.0)))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


class Adam:
    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            # moments and parameters stay in the parameter's own dtype so a checkpoint restores them exactly
            g = np.asarray(grads[k], dtype=p.data.dtype)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            step = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            dt = self.params[k].data.dtype
            self.m[k] = np.array(state[f"m/{k}"], dtype=dt)
            self.v[k] = np.array(state[f"v/{k}"], dtype=dt)
