"""Dense tensors with tape-free reverse-mode differentiation.

Each op returns a new :class:`Tensor` holding a closure that maps the output
gradient to input gradients. :func:`backward` walks the graph in reverse
topological order. Only the ops the policies need are provided.
"""
from __future__ import annotations

import contextlib
import json
import pickle
import zipfile
from pathlib import Path

import numpy as np
from scipy.special import erf

_DTYPE = np.float64
_GRAD_ENABLED = True
CHECK_FINITE = True

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

CHECKPOINT_VERSION = 1


def set_precision(bits: int) -> None:
    """Select the global floating dtype (32 or 64)."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int):
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # make ``ndarray op Tensor`` defer to the Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.minimum(a.data, b.data), (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.maximum(a.data, b.data), (a, b), bw)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _result(np.where(cond, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Batched matrix product; a 2-D right operand is shared across batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), bw)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _result(y, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    fancy = _is_fancy(index)

    def bw(g):
        grad = np.zeros_like(a.data)
        if fancy:
            np.add.at(grad, index, g)
        else:
            grad[index] = g
        return (grad,)

    return _result(np.array(out, copy=True), (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def stop_gradient(a) -> Tensor:
    """Same value, no parents: gradient flow ends here."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict:
    """Reverse pass from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated. The
    returned map holds the gradient of this pass only, for each parameter in
    ``params`` (or every reached leaf); unreached parameters map to zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves, fresh = [], {}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                fresh[id(node)] = g
                leaves.append(node)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return {id(p): fresh[id(p)] for p in leaves}
    return {name: fresh[id(p)] if id(p) in fresh else np.zeros_like(p.data) for name, p in _named(params)}


def _named(params):
    if isinstance(params, dict):
        return params.items()
    return [(i, p) for i, p in enumerate(params)]


# ---------------------------------------------------------------------------
# checkpoints


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays as little-endian ``.npz`` with a JSON manifest entry."""
    path = Path(path)
    manifest = {
        "format": "icloco-arrays",
        "version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "arrays": {},
        "meta": meta or {},
    }
    payload = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        payload[name] = le
        manifest["arrays"][name] = {"shape": list(arr.shape), "dtype": le.dtype.str}
    payload["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    tmp.replace(path)


def load_arrays(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            manifest = json.loads(bytes(z["__manifest__"]).decode())
            arrays = {name: z[name] for name in manifest["arrays"]}
    except (OSError, KeyError, ValueError, EOFError, zipfile.BadZipFile, pickle.UnpicklingError) as exc:
        raise ValueError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {manifest.get('version')}")
    for name, info in manifest["arrays"].items():
        if list(arrays[name].shape) != info["shape"]:
            raise ValueError(f"checkpoint {path}: array {name} shape {arrays[name].shape} != manifest {info['shape']}")
    return arrays, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(fn, arrays: list, eps: float = 1e-6) -> list:
    """Central differences of the scalar ``fn(*arrays)`` with respect to every array."""
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            hi = fn(*arrays)
            flat[j] = old - eps
            lo = fn(*arrays)
            flat[j] = old
            gflat[j] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def gradcheck(op, arrays: list, rng: np.random.Generator, eps: float = 1e-6) -> float:
    """Relative error between analytic and numerical gradients of ``sum(w * op(*xs))``.

    Runs at 64-bit. Returns ``max_i |g_i - n_i| / max(|g|_inf, |n|_inf, 1e-8)`` over inputs.
    """
    with precision(64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = op(*[Tensor(a) for a in arrays])
        w = rng.normal(size=probe.shape)

        def f(*xs):
            return float(np.sum(w * op(*[Tensor(x) for x in xs]).data))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = sum_(mul(op(*leaves), w))
        analytic = backward(loss, leaves)
        numeric = numerical_grad(f, arrays, eps)
    err = 0.0
    for i, n in enumerate(numeric):
        g = analytic[i]
        scale = max(np.abs(g).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
        err = max(err, float(np.abs(g - n).max(initial=0.0) / scale))
    return err
