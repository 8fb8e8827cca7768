import zlib

import numpy as np
import pytest

from icloco import tensor as T
from icloco.tensor import Tensor, gradcheck

N_CASES = 100


def _shape(rng, lo=1, hi=4, ndim=None):
    nd = ndim if ndim is not None else int(rng.integers(1, 4))
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(nd))


def _away_from(x, points, gap=1e-3):
    # nudge samples off kinks so central differences stay valid
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + 2 * gap * np.sign(x - p + 1e-12), x)
    return x


def _case_binary(rng):
    s = _shape(rng)
    # second operand sometimes broadcasts
    s2 = s if rng.random() < 0.5 else (1,) * (len(s) - 1) + (s[-1],)
    return [rng.normal(size=s), rng.normal(size=s2)]


def _case_pair_distinct(rng):
    a, b = _case_binary(rng)
    gap = a - b
    b = np.where(np.abs(gap) < 1e-2, b - 0.1, b)
    return [a, b]


def _case_matmul(rng):
    n, k, m = (int(rng.integers(1, 5)) for _ in range(3))
    batch = _shape(rng, 1, 3, ndim=int(rng.integers(0, 3)))
    right = (k, m) if rng.random() < 0.5 else batch + (k, m)
    return [rng.normal(size=batch + (n, k)), rng.normal(size=right)]


PRIMITIVES = {
    "add": (lambda a, b: T.add(a, b), _case_binary),
    "sub": (lambda a, b: T.sub(a, b), _case_binary),
    "mul": (lambda a, b: T.mul(a, b), _case_binary),
    "div": (lambda a, b: T.div(a, b), lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 4)) * r.choice([-1, 1], size=(3, 4))]),
    "neg": (lambda a: T.neg(a), lambda r: [r.normal(size=_shape(r))]),
    "exp": (lambda a: T.exp(a), lambda r: [r.normal(size=_shape(r))]),
    "log": (lambda a: T.log(a), lambda r: [r.uniform(0.2, 3.0, size=_shape(r))]),
    "square": (lambda a: T.square(a), lambda r: [r.normal(size=_shape(r))]),
    "tanh": (lambda a: T.tanh(a), lambda r: [r.normal(size=_shape(r))]),
    "sigmoid": (lambda a: T.sigmoid(a), lambda r: [2 * r.normal(size=_shape(r))]),
    "gelu": (lambda a: T.gelu(a), lambda r: [2 * r.normal(size=_shape(r))]),
    "clip": (lambda a: T.clip(a, -0.5, 0.7), lambda r: [_away_from(r.normal(size=_shape(r)), (-0.5, 0.7))]),
    "minimum": (lambda a, b: T.minimum(a, b), _case_pair_distinct),
    "maximum": (lambda a, b: T.maximum(a, b), _case_pair_distinct),
    "where": (lambda a, b: T.where(np.arange(a.data.size).reshape(a.shape) % 3 == 0, a, b),
              lambda r: [r.normal(size=(3, 5)), r.normal(size=(3, 5))]),
    "sum": (lambda a: T.sum_(a, axis=-1), lambda r: [r.normal(size=_shape(r))]),
    "sum_all": (lambda a: T.sum_(a), lambda r: [r.normal(size=_shape(r))]),
    "mean": (lambda a: T.mean(a, axis=0, keepdims=True), lambda r: [r.normal(size=_shape(r))]),
    "matmul": (lambda a, b: T.matmul(a, b), _case_matmul),
    "softmax": (lambda a: T.softmax(a), lambda r: [2 * r.normal(size=_shape(r, 2, 5))]),
    "layer_norm": (lambda a: T.layer_norm(a), lambda r: [r.normal(size=_shape(r, 3, 6))]),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, int(r.integers(1, 4))))]),
    "getitem_slice": (lambda a: T.getitem(a, (slice(None), slice(1, 3))), lambda r: [r.normal(size=(3, 4))]),
    "getitem_fancy": (lambda a: T.getitem(a, (slice(None), np.array([0, 2, 2, 1]))), lambda r: [r.normal(size=(2, 3))]),
    "reshape": (lambda a: T.reshape(a, (-1,)), lambda r: [r.normal(size=_shape(r))]),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=_shape(r, ndim=3))]),
    "stop_gradient_branch": (lambda a: T.mul(T.stop_gradient(a), a), lambda r: [r.normal(size=_shape(r))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    op, make = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(N_CASES):
        arrays = make(rng)
        if name == "stop_gradient_branch":
            # the analytic gradient deliberately ignores one branch; compare against that
            with T.precision(64):
                a = Tensor(arrays[0], requires_grad=True)
                g = T.backward(T.sum_(op(a)), [a])[0]
            assert np.array_equal(g, arrays[0])
            continue
        worst = max(worst, gradcheck(op, arrays, rng))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_layer_norm_width_two_closed_form():
    # finite differences are ill-conditioned here (the output saturates at +-1), so use the closed form:
    # y0 = d / sqrt(d^2 + e) with d = (a - b) / 2, y1 = -y0
    rng = np.random.default_rng(5)
    e = 1e-5
    for _ in range(N_CASES):
        a, b = rng.normal(size=2)
        wgt = rng.normal(size=2)
        with T.precision(64):
            x = Tensor(np.array([a, b]), requires_grad=True)
            g = T.backward(T.sum_(T.mul(T.layer_norm(x, eps=e), wgt)), [x])[0]
        d = 0.5 * (a - b)
        dy0_da = 0.5 * e / (d * d + e) ** 1.5
        want = (wgt[0] - wgt[1]) * dy0_da * np.array([1.0, -1.0])
        assert np.allclose(g, want, rtol=1e-9, atol=0)


def test_softmax_symmetric():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2))
    with T.precision(64):
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_layer_norm_of_constant_is_zero():
    assert np.all(T.layer_norm(Tensor(np.full(6, 3.0))).data == 0.0)


def test_stop_gradient_product_rule():
    with T.precision(64):
        w = Tensor(3.0, requires_grad=True)
        y = T.mul(T.stop_gradient(w), w)
        g = T.backward(y, [w])[0]
    assert float(g) == 3.0


def test_stop_gradient_forward_identity():
    assert np.array_equal(T.stop_gradient(Tensor([1.0, 2.0])).data, [1.0, 2.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.mul(x, 2.0))


def test_backward_visits_shared_nodes_once():
    with T.precision(64):
        x = Tensor(2.0, requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, y)  # dz/dx = 4x
        assert float(T.backward(z, [x])[0]) == 8.0


def test_unreached_parameter_gets_zeros():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    g = T.backward(T.sum_(a), {"a": a, "b": b})
    assert np.array_equal(g["b"], np.zeros(3))


def test_precision_switch():
    with T.precision(32):
        assert Tensor([1.0]).data.dtype == np.float32
    with T.precision(64):
        assert Tensor([1.0]).data.dtype == np.float64


def test_non_finite_is_rejected():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.log(Tensor([-1.0]))


def test_array_roundtrip(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(3, dtype=np.float32)}
    T.save_arrays(tmp_path / "x.npz", arrays, meta={"k": 1})
    back, meta = T.load_arrays(tmp_path / "x.npz")
    assert meta == {"k": 1}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].dtype == arrays[k].dtype


def test_corrupt_checkpoint_is_refused(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="corrupt"):
        T.load_arrays(p)


def test_repeated_backward_returns_fresh_gradients():
    with T.precision(64):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        g1 = T.backward(T.sum_(T.square(w)), [w])[0]
        g2 = T.backward(T.sum_(T.square(w)), [w])[0]
    assert np.array_equal(g1, [2.0, 4.0]) and np.array_equal(g2, g1)
    assert np.array_equal(w.grad, [4.0, 8.0])  # .grad itself accumulates
