import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cebsnet import gradsuite, kernels, ops
from cebsnet.gradcheck import gradcheck
from cebsnet.tensor import ContractError, NonFiniteError, Tensor, no_grad


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------ brute-force oracles

def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, oc, i, j] = (patch * w[oc]).sum() + (b[oc] if b is not None else 0.0)
    return out


def maxpool_oracle(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k].max(axis=(2, 3))
    return out


def bilinear_oracle(x, oh, ow, align):
    """Per-pixel evaluation of the sampling formula."""
    n, c, h, w = x.shape
    out = np.empty((n, c, oh, ow))

    def src(o, n_in, n_out):
        if align:
            return 0.0 if n_out == 1 else o * (n_in - 1) / (n_out - 1)
        return max((o + 0.5) * n_in / n_out - 0.5, 0.0)

    for i in range(oh):
        sy = src(i, h, oh)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = src(j, w, ow)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, i, j] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                               + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


# ----------------------------------------------------------------------- conv

class TestConv2d:
    def test_pointwise_scaling(self):
        out = ops.conv2d(T(np.ones((1, 1, 3, 3))), T(np.full((1, 1, 1, 1), 2.0)), T([0.0]))
        assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_hand_sums_with_padding(self):
        out = ops.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]), padding=1).data[0, 0]
        assert out[1, 1] == 9
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4

    def test_stride_two_shape(self):
        out = ops.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 2, 0)])
    def test_matches_direct_sum(self, rng, k, stride, pad):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        got = ops.conv2d(T(x), T(w), T(b), stride, pad).data
        np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ContractError, match="channels"):
            ops.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))

    def test_random_conv_gradcheck(self, rng):
        x, w = T(rng.standard_normal((1, 2, 5, 5)), True), T(rng.standard_normal((3, 2, 3, 3)), True)
        rep = gradcheck(lambda x, w: ops.conv2d(x, w, padding=1), [x, w])
        assert rep.passed, str(rep)


class TestMaxpool:
    def test_max_of_all(self):
        assert ops.maxpool2d(T([[[[1, 2], [3, 4]]]]), 2, 2).data.item() == 4

    def test_constant_input(self):
        out = ops.maxpool2d(T(np.full((1, 2, 6, 6), 3.5)), 3, 1, 1)
        assert np.array_equal(out.data, np.full((1, 2, 6, 6), 3.5))

    def test_same_shape_k3_s1_p1(self):
        assert ops.maxpool2d(T(np.ones((1, 1, 4, 4))), 3, 1, 1).shape == (1, 1, 4, 4)

    @pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 1, 1), (3, 2, 1), (2, 1, 0)])
    def test_matches_window_max(self, rng, k, stride, pad):
        x = rng.standard_normal((2, 3, 7, 8))
        np.testing.assert_array_equal(ops.maxpool2d(T(x), k, stride, pad).data, maxpool_oracle(x, k, stride, pad))

    def test_ties_route_to_first_maximum(self):
        x = T(np.zeros((1, 1, 2, 2)), True)
        ops.maxpool2d(x, 2, 2).backward(np.ones((1, 1, 1, 1)))
        assert np.array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_gradient_is_routing(self, rng):
        x = T(rng.permutation(64).reshape(1, 1, 8, 8).astype(float), True)
        g = rng.standard_normal((1, 1, 4, 4))
        ops.maxpool2d(x, 2, 2).backward(g)
        assert np.abs(x.grad).sum() == pytest.approx(np.abs(g).sum())

    def test_bad_padding(self):
        with pytest.raises(ContractError):
            ops.maxpool2d(T(np.ones((1, 1, 4, 4))), 2, 2, 2)


class TestUpsampleBilinear:
    @pytest.mark.parametrize("size", [(1, 1), (3, 7), (16, 16)])
    def test_constant_stays_constant(self, size):
        out = ops.upsample_bilinear(T(np.full((1, 2, 4, 4), -1.25)), *size)
        np.testing.assert_allclose(out.data, -1.25, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("align", [False, True])
    def test_same_size_is_identity(self, rng, align):
        x = rng.standard_normal((2, 3, 5, 6))
        np.testing.assert_array_equal(ops.upsample_bilinear(T(x), 5, 6, align).data, x)

    def test_monotone_rows(self):
        out = ops.upsample_bilinear(T([[[[0, 1], [0, 1]]]]), 2, 4).data[0, 0]
        assert (np.diff(out, axis=1) >= 0).all()
        np.testing.assert_allclose(out[0], [0, 0.25, 0.75, 1])

    @pytest.mark.parametrize("align", [False, True])
    @pytest.mark.parametrize("shape", [(2, 2, 4, 8), (3, 5, 7, 2), (5, 3, 1, 9), (1, 1, 11, 3)])
    def test_matches_sampling_formula(self, rng, align, shape):
        h, w, oh, ow = shape
        x = rng.standard_normal((1, 2, h, w))
        got = ops.upsample_bilinear(T(x), oh, ow, align).data
        np.testing.assert_allclose(got, bilinear_oracle(x, oh, ow, align), rtol=1e-12, atol=1e-12)

    def test_bad_size(self):
        with pytest.raises(ContractError):
            ops.upsample_bilinear(T(np.ones((1, 1, 2, 2))), 0, 3)


class TestPrimitives:
    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ops.softmax(T([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_softmax_large_logits_stable(self):
        p = ops.softmax(T([1000.0, 0.0, -1000.0]), 0).data
        assert np.isfinite(p).all() and p[0] == pytest.approx(1.0)

    def test_abs(self):
        assert ops.absolute(T([-3.0])).data.item() == 3.0

    def test_global_avg_pool(self):
        assert ops.global_avg_pool(T([[[[1, 3], [5, 7]]]])).data.item() == 4.0

    def test_sigmoid_derivative_at_zero(self):
        x = T([0.0], True)
        ops.sigmoid(x).backward()
        assert x.grad.item() == 0.25

    def test_linear_gradcheck(self):
        rep = gradcheck(lambda x: x * 2.0, [T([0.3, -1.2], True)])
        assert rep.passed and rep.max_rel_err < 1e-9

    def test_concat_split_round_trip(self, rng):
        x = rng.standard_normal((2, 7, 3, 3))
        parts = ops.split(T(x), [2, 4, 1], axis=1)
        assert [p.shape[1] for p in parts] == [2, 4, 1]
        assert np.array_equal(ops.concat(parts, axis=1).data, x)

    def test_split_size_mismatch(self):
        with pytest.raises(ContractError):
            ops.split(T(np.ones((1, 3, 2, 2))), [1, 1], axis=1)

    def test_broadcast_gradient_reduces(self):
        a, b = T(np.ones((2, 3, 4, 4)), True), T(np.ones((1, 3, 1, 1)), True)
        ops.mul(a, b).backward(np.ones((2, 3, 4, 4)))
        assert b.grad.shape == (1, 3, 1, 1) and np.all(b.grad == 32)

    def test_python_scalar_keeps_dtype(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert (x * 2.0).dtype == np.float32
        assert (1.0 - x).dtype == np.float32

    def test_non_finite_guard(self):
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
            ops.mul(T([1e308]), T([1e308]))

    def test_no_grad_builds_no_graph(self):
        x = T([1.0], True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_backward_on_constant_rejected(self):
        with pytest.raises(ContractError):
            T([1.0]).backward()

    def test_shared_input_accumulates(self):
        x = T([2.0], True)
        (x * x + x).backward()
        assert x.grad.item() == 5.0


class TestRegionPartition:
    def test_uneven_strips(self):
        assert list(ops.partition(128, 40)) == [3 * i for i in range(40)]
        sizes = np.diff(np.append(ops.partition(128, 40), 128))
        assert sizes[-1] == 128 - 39 * 3 and (sizes[:-1] == 3).all()

    def test_k_too_large(self):
        with pytest.raises(ContractError, match="k=5"):
            ops.partition(4, 5)

    def test_expand_reconstructs(self, rng):
        e = rng.random((2, 3, 3))
        out = ops.region_expand(T(e), 7, 8).data[:, 0]
        rows = ops.region_index(7, 3)
        cols = ops.region_index(8, 3)
        np.testing.assert_array_equal(out, e[:, rows][:, :, cols])


@pytest.mark.parametrize("case", gradsuite.SUITES["tensorops"], ids=gradsuite.case_name)
def test_gradcheck_registry(case):
    rep = gradsuite.run_case(case, seeds=20)
    assert rep.passed, str(rep)


def test_tolerance_semantics():
    rep = gradsuite.run_case(gradsuite.case_sigmoid, seeds=2, tol=1e-14)
    assert not rep.passed and "FAIL" in str(rep)


# ------------------------------------------------------- backend equivalence

@pytest.fixture
def both_backends():
    before = kernels.BACKEND
    yield
    kernels.use_backend(before)


def _run(backend, fn):
    kernels.use_backend(backend)
    return fn()


shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(3, 12), st.integers(3, 12))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, k=st.sampled_from([1, 2, 3]), stride=st.sampled_from([1, 2]), pad=st.sampled_from([0, 1]),
       seed=st.integers(0, 2**16))
def test_backends_agree_im2col_col2im(shape, k, stride, pad, seed):
    if pad >= k:
        pad = 0
    x = np.random.default_rng(seed).standard_normal(shape)
    a = _run("numpy", lambda: kernels.im2col(x, k, k, stride, pad))
    b = _run("numba", lambda: kernels.im2col(x, k, k, stride, pad))
    np.testing.assert_array_equal(a, b)
    ca = _run("numpy", lambda: kernels.col2im(a, shape, k, k, stride, pad))
    cb = _run("numba", lambda: kernels.col2im(a, shape, k, k, stride, pad))
    np.testing.assert_allclose(ca, cb, rtol=1e-13, atol=1e-13)
    kernels.use_backend("numba")


@settings(max_examples=40, deadline=None)
@given(shape=shapes, k=st.sampled_from([2, 3]), stride=st.sampled_from([1, 2]), pad=st.sampled_from([0, 1]),
       seed=st.integers(0, 2**16), ties=st.booleans())
def test_backends_agree_maxpool(shape, k, stride, pad, seed, ties):
    r = np.random.default_rng(seed)
    x = r.integers(0, 3, shape).astype(float) if ties else r.standard_normal(shape)
    oa, ia = _run("numpy", lambda: kernels.maxpool_forward(x, k, stride, pad))
    ob, ib = _run("numba", lambda: kernels.maxpool_forward(x, k, stride, pad))
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ia, ib)
    g = r.standard_normal(oa.shape)
    ga = _run("numpy", lambda: kernels.maxpool_backward(g, ia, shape))
    gb = _run("numba", lambda: kernels.maxpool_backward(g, ia, shape))
    np.testing.assert_allclose(ga, gb, rtol=1e-13, atol=1e-13)
    kernels.use_backend("numba")


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), data=st.data())
def test_backends_agree_regions(n, data):
    k = data.draw(st.integers(1, n))
    r = np.random.default_rng(n * 100 + k)
    e = r.random((2, k, k))
    idx, starts = ops.region_index(n, k), ops.partition(n, k)
    a = _run("numpy", lambda: kernels.region_expand(e, idx, idx))
    b = _run("numba", lambda: kernels.region_expand(e, idx, idx))
    np.testing.assert_array_equal(a, b)
    g = r.standard_normal((2, 1, n, n))
    ra = _run("numpy", lambda: kernels.region_reduce(g, starts, starts))
    rb = _run("numba", lambda: kernels.region_reduce(g, starts, starts))
    np.testing.assert_allclose(ra, rb, rtol=1e-12, atol=1e-12)
    kernels.use_backend("numba")


def test_backend_switch_rejects_unknown(both_backends):
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")


def test_env_flag_selects_numpy(tmp_path):
    import subprocess
    import sys

    code = "from cebsnet import kernels; print(kernels.BACKEND)"
    env = {"CEBSNET_NUMBA": "0", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
