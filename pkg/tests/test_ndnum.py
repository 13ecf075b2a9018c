import io
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from daalign import ndnum as nd
from daalign.ndnum import Tensor


def test_sigmoid_of_zero():
    assert nd.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_sort_with_permutation_example():
    vals, perm = nd.sort_with_permutation(Tensor([3.0, 1.0, 2.0]))
    assert vals.data.tolist() == [1.0, 2.0, 3.0]
    assert perm.perm.tolist() == [1, 2, 0]


def test_sort_is_stable_on_ties():
    _, perm = nd.sort_with_permutation(Tensor([2.0, 1.0, 2.0, 1.0]))
    assert perm.perm.tolist() == [1, 3, 0, 2]


def test_matmul_example():
    out = nd.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_forward_op_dispatch():
    assert nd.forward_op("sigmoid", Tensor([0.0])).data.tolist() == [0.5]
    with pytest.raises(ValueError):
        nd.forward_op("conv2d", Tensor([0.0]))


def test_backward_square_sum():
    x = nd.parameter([1.0, 2.0, 3.0])
    g = nd.backward(nd.sum(x * x))
    assert g[x].tolist() == [2.0, 4.0, 6.0]


def test_backward_grad_reverse():
    x = nd.parameter([1.0, 2.0, 3.0])
    g = nd.backward(nd.sum(nd.grad_reverse(x, 1.0)))
    assert g[x].tolist() == [-1.0, -1.0, -1.0]


def test_backward_through_sort_matches_frozen_value():
    # d/dx sum(sort(x)^2) at x=[3,1]; central differences give [6, 2]
    x = nd.parameter([3.0, 1.0])
    vals, _ = nd.sort_with_permutation(x)
    g = nd.backward(nd.sum(nd.square(vals)))
    assert np.allclose(g[x], [6.0, 2.0], atol=1e-12)
    fd = nd.numeric_grad(lambda t: nd.sum(nd.square(nd.sort_with_permutation(t)[0])), np.array([3.0, 1.0]))
    assert np.allclose(fd, [6.0, 2.0], atol=1e-6)


def test_shape_mismatch_is_an_error():
    with pytest.raises(nd.ShapeError):
        nd.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(nd.ShapeError):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_of_nonpositive_is_an_error():
    with pytest.raises(ValueError):
        nd.log(Tensor([1.0, 0.0]))


def test_empty_inputs_rejected():
    with pytest.raises(nd.ShapeError):
        nd.softmax(Tensor(np.zeros((2, 0))))
    with pytest.raises(nd.ShapeError):
        nd.mean(Tensor(np.zeros(0)))


def test_nonfinite_forward_raises():
    with pytest.raises(nd.NonFiniteError), np.errstate(over="ignore"):
        nd.scale(Tensor([1e308]), 10.0)


def test_non_scalar_root_rejected():
    x = nd.parameter([1.0, 2.0])
    with pytest.raises(nd.ShapeError):
        nd.backward(x * 2.0)


def test_cycle_detected():
    x = nd.parameter([1.0])
    y = x * 2.0
    z = y * 3.0
    y._parents = (z,)  # corrupt the graph on purpose
    with pytest.raises(RuntimeError, match="cycle"):
        nd.backward(nd.sum(z))


def test_no_grad_records_nothing():
    x = nd.parameter([1.0])
    with nd.no_grad():
        y = x * 2.0
    assert y.is_leaf and not y.requires_grad


def test_shared_subexpression_accumulates():
    x = nd.parameter([0.5, -1.5])
    y = nd.sigmoid(x)
    root = nd.sum(y * y + y)  # y used on three paths
    g = nd.backward(root)[x]
    s = 1 / (1 + np.exp(-np.array([0.5, -1.5])))
    assert np.allclose(g, (2 * s + 1) * s * (1 - s), atol=1e-14)
    rep = nd.finite_diff_check(lambda t: nd.sum(nd.sigmoid(t) * nd.sigmoid(t) + nd.sigmoid(t)), [0.5, -1.5])
    assert rep.passed


def test_finite_diff_check_polynomial():
    rep = nd.finite_diff_check(lambda t: nd.sum(t * t), [1.0, 2.0], eps=1e-6, tol=1e-6)
    assert rep.passed and rep.max_rel_err < 1e-6


def test_gather_accumulates_repeated_indices():
    x = nd.parameter([1.0, 2.0, 3.0])
    g = nd.backward(nd.sum(nd.gather(x, [0, 0, 2])))[x]
    assert g.tolist() == [2.0, 0.0, 1.0]


# one scalar-valued probe per op kind, each with shape-appropriate random input
def _probe(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    w = rng.normal(size=(3, 4))
    other = rng.uniform(0.5, 2.0, size=(3, 4))
    if kind == "add":
        return (3, 4), lambda t: nd.sum(nd.square(t + Tensor(w)))
    if kind == "sub":
        return (3, 4), lambda t: nd.sum(nd.square(Tensor(w) - t))
    if kind == "mul":
        return (3, 4), lambda t: nd.sum(t * Tensor(w) * t)
    if kind == "div":
        return (3, 4), lambda t: nd.sum(t / Tensor(other) + Tensor(w) / nd.sigmoid(t))
    if kind == "scalar-mul":
        return (3, 4), lambda t: nd.sum(nd.square(nd.scale(t, -1.7)))
    if kind == "matmul":
        return (3, 4), lambda t: nd.sum(nd.square(t @ Tensor(w.T)))
    if kind == "matmul3":
        b = rng.normal(size=(2, 3, 2))
        return (2, 4, 3), lambda t: nd.sum(nd.square(t @ Tensor(b)))
    if kind == "transpose":
        return (3, 4), lambda t: nd.sum(nd.transpose(t) @ Tensor(w))
    if kind == "relu":
        return (3, 4), lambda t: nd.sum(nd.relu(t) * Tensor(w))
    if kind == "sigmoid":
        return (3, 4), lambda t: nd.sum(nd.sigmoid(t) * Tensor(w))
    if kind == "softmax":
        return (3, 4), lambda t: nd.sum(nd.softmax(t) * Tensor(w))
    if kind == "log":
        return (3, 4), lambda t: nd.sum(nd.log(nd.sigmoid(t)) * Tensor(w))
    if kind == "square":
        return (3, 4), lambda t: nd.sum(nd.square(t) * Tensor(w))
    if kind == "sum":
        return (3, 4), lambda t: nd.sum(nd.square(nd.sum(t, axis=1)))
    if kind == "mean":
        return (3, 4), lambda t: nd.sum(nd.square(nd.mean(t, axis=0))) + nd.mean(t)
    if kind == "reshape":
        col = rng.normal(size=(6, 1))
        return (3, 4), lambda t: nd.sum(nd.square(nd.reshape(t, (2, 6))) @ Tensor(col))
    if kind == "concat":
        return (3, 4), lambda t: nd.sum(nd.square(nd.concat([t, t * 2.0], axis=1)) @ Tensor(np.ones((8, 1))))
    if kind == "gather":
        return (3, 4), lambda t: nd.sum(nd.square(nd.gather(t, [2, 0, 2], axis=0)) * Tensor(np.ones((3, 4))))
    if kind == "sort_with_permutation":
        return (3, 4), lambda t: nd.sum(nd.sort_with_permutation(t)[0] * Tensor(w))
    if kind == "grad_reverse":
        return (3, 4), lambda t: nd.sum(nd.square(nd.grad_reverse(t, 0.7)))
    raise KeyError(kind)


KINDS = ["add", "sub", "mul", "div", "scalar-mul", "matmul", "matmul3", "transpose", "relu", "sigmoid",
         "softmax", "log", "square", "sum", "mean", "reshape", "concat", "gather", "sort_with_permutation"]


def _tie_free(x, gap=1e-4):
    # nudge apart values closer than gap (sort ties) and away from 0 (relu kink)
    flat = x.reshape(-1)
    order = np.argsort(flat)
    for a, b in zip(order[:-1], order[1:]):
        if flat[b] - flat[a] < gap:
            flat[b] = flat[a] + gap
    flat[np.abs(flat) < gap] = gap
    return x


@pytest.mark.parametrize("kind", KINDS)
def test_gradient_matches_finite_differences(kind):
    shape, f = _probe(kind)
    rng = np.random.default_rng(42)
    for _ in range(20):
        x = _tie_free(rng.uniform(-2, 2, size=shape))
        rep = nd.finite_diff_check(f, x, eps=1e-6, tol=1e-4)
        assert rep.passed, (kind, rep.max_rel_err)


def test_grad_reverse_scales_upstream_gradient():
    shape, f = _probe("grad_reverse")
    x = np.random.default_rng(1).uniform(-2, 2, size=shape)
    leaf = nd.parameter(x)
    g = nd.backward(f(leaf))[leaf]
    assert np.allclose(g, -0.7 * 2 * x, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_sort_permutation_properties(x):
    vals, perm = nd.sort_with_permutation(Tensor(x))
    assert perm.is_bijection()
    assert np.array_equal(vals.data, x[perm.perm])
    assert np.all(np.diff(vals.data) >= 0)
    assert np.array_equal(perm.apply(x), vals.data)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-100, 100)),
       st.floats(0.0, 5.0))
def test_grad_reverse_identity_forward(x, factor):
    leaf = nd.parameter(x)
    out = nd.grad_reverse(leaf, factor)
    assert np.array_equal(out.data, x)
    up = np.linspace(-1, 1, x.size)
    g = nd.backward(nd.sum(out * Tensor(up)))[leaf]
    assert np.allclose(g, -factor * up, rtol=0, atol=1e-15)


def test_fragment_roundtrip_bit_exact():
    rng = np.random.default_rng(3)
    tensors = {"a": rng.normal(size=(2, 3)), "scalar": np.array(1.5), "ünï": rng.normal(size=(4,))}
    buf = io.BytesIO()
    nd.write_fragments(buf, tensors)
    buf.seek(0)
    back = nd.read_fragments(buf)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()
        assert back[k].shape == np.asarray(tensors[k]).shape


def test_fragment_layout():
    buf = io.BytesIO()
    nd.write_fragment(buf, "w", np.array([[1.0, 2.0]]))
    raw = buf.getvalue()
    assert raw[:4] == (1).to_bytes(4, "little") and raw[4:5] == b"w"
    assert raw[5:9] == (2).to_bytes(4, "little")
    assert raw[9:17] == (1).to_bytes(8, "little") and raw[17:25] == (2).to_bytes(8, "little")
    assert np.frombuffer(raw[25:], "<f8").tolist() == [1.0, 2.0]


def test_truncated_fragment_reports_offset():
    buf = io.BytesIO()
    nd.write_fragments(buf, {"x": np.ones(4)})
    raw = buf.getvalue()[:-5]
    with pytest.raises(nd.FragmentError) as err:
        nd.read_fragments(io.BytesIO(raw))
    assert err.value.offset > 0
