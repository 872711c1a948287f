"""Tensor core: forward kernels against loop oracles, backward against finite differences."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpn import cptf, ops
from cpn.gradcheck import finite_diff_check
from cpn.tensor import Tensor, parameter, precision


# --- loop oracles -----------------------------------------------------------

def conv_loop(x, k, stride, pad):
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def matmul_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def bilinear_scalar(img, oh, ow):
    """Half-pixel bilinear interpolation evaluated point by point."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        sy = max((i + 0.5) * h / oh - 0.5, 0.0)
        y0 = min(int(sy), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = max((j + 0.5) * w / ow - 0.5, 0.0)
            x0 = min(int(sx), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


# --- conv2d -----------------------------------------------------------------

class TestConv2d:
    def test_unit_kernel(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_full_sum_kernel(self):
        out = ops.conv2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, [[[[10.0]]]])

    def test_matches_loop_oracle(self, rng, f64):
        x = rng.uniform(-10, 10, (2, 3, 9, 9))
        k = rng.uniform(-10, 10, (4, 3, 3, 3))
        out = ops.conv2d(Tensor(x), Tensor(k), stride=2, pad=1)
        assert out.shape == (2, 4, 5, 5)
        np.testing.assert_allclose(out.data, conv_loop(x, k, 2, 1), atol=1e-6, rtol=0)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_rejects_inexact_extent(self):
        with pytest.raises(ValueError, match="not exact"):
            ops.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 2))
        np.testing.assert_allclose(ops.matmul(Tensor(np.eye(3)), Tensor(b)).data, b.astype(np.float32))

    def test_hand(self):
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_loop_oracle(self, rng, f64):
        a, b = rng.uniform(-10, 10, (5, 7)), rng.uniform(-10, 10, (7, 3))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, matmul_loop(a, b), atol=1e-6, rtol=0)

    def test_inner_mismatch(self):
        with pytest.raises(ValueError):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestPooling:
    def test_constant(self):
        assert ops.global_avg_pool(Tensor(np.full((1, 1, 4, 5), 3.0))).data[0, 0] == 3.0

    def test_hand(self):
        assert ops.global_avg_pool(Tensor([[[[0.0, 0.0], [4.0, 0.0]]]])).data[0, 0] == 1.0

    def test_loop(self, rng, f64):
        x = rng.normal(size=(2, 3, 4, 5))
        out = ops.global_avg_pool(Tensor(x)).data
        for n in range(2):
            for c in range(3):
                tot = 0.0
                for i in range(4):
                    for j in range(5):
                        tot += x[n, c, i, j]
                assert out[n, c] == pytest.approx(tot / 20, abs=1e-12)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_max_reduce_rows(self):
        np.testing.assert_array_equal(ops.max_reduce(Tensor([[1.0, 5.0], [7.0, 2.0]]), axis=1).data, [5, 7])

    def test_l1_distance(self, rng, f64):
        a, b = rng.normal(size=17), rng.normal(size=17)
        got = ops.sum_(ops.abs_(ops.sub(Tensor(a), Tensor(b)))).item()
        assert got == pytest.approx(sum(abs(x - y) for x, y in zip(a, b)), abs=1e-12)

    def test_axis_out_of_range(self):
        with pytest.raises(ValueError):
            ops.max_reduce(Tensor(np.zeros((2, 2))), axis=2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal(ops.add(Tensor([1.0, 2.0]), 1.0).data, [2, 3])

    def test_concat_preserves_order(self):
        out = ops.concat([Tensor([[1.0]]), Tensor([[2.0, 3.0]])], axis=1)
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_no_overflow(self, f64):
        out = ops.softmax(Tensor([1000.0, 0.0]), 0).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-9)

    def test_loop(self, rng, f64):
        x = rng.normal(size=9)
        out = ops.softmax(Tensor(x), 0).data
        denom = sum(np.exp(v) for v in x)
        np.testing.assert_allclose(out, [np.exp(v) / denom for v in x], rtol=1e-12)
        assert abs(out.sum() - 1) < 1e-7

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
    def test_sums_to_one(self, xs):
        with precision(np.float64):
            out = ops.softmax(Tensor(xs), 0).data
        assert np.all(out > 0) or len(xs) > 1
        assert abs(out.sum() - 1) < 1e-6


class TestResize:
    def test_same_size_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 5, 7)))
        np.testing.assert_array_equal(ops.bilinear_resize(x, 5, 7).data, x.data)

    @pytest.mark.parametrize("oh,ow", [(1, 1), (3, 9), (16, 4)])
    def test_constant(self, oh, ow, f64):
        out = ops.bilinear_resize(Tensor(np.full((1, 1, 6, 5), 0.3)), oh, ow).data
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_scalar_reference(self, f64):
        img = np.array([[0.0, 1.0], [1.0, 2.0]])
        out = ops.bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
        np.testing.assert_allclose(out, bilinear_scalar(img, 4, 4), atol=1e-12)
        # first row: src x = -0.25 -> clamp 0, 0.25, 0.75, 1.25 -> clamp to last
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_downsample_scalar_reference(self, rng, f64):
        img = rng.normal(size=(9, 13))
        out = ops.bilinear_resize(Tensor(img[None, None]), 4, 5).data[0, 0]
        np.testing.assert_allclose(out, bilinear_scalar(img, 4, 5), atol=1e-12)


# --- backward ---------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = parameter(rng.normal(size=(2, 3, 4)))
        ops.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_detached_path_gives_zero(self, rng):
        x = parameter(rng.normal(size=3))
        y = ops.add(ops.sum_(ops.mul(x.detach(), 2.0)), ops.sum_(ops.scalar_mul(x, 0.0)))
        y.backward()
        np.testing.assert_array_equal(x.grad, 0)

    def test_only_detached_path(self, rng):
        x = parameter(rng.normal(size=3))
        y = ops.sum_(x.detach())
        y.backward()
        assert x.grad is None

    def test_accumulates(self):
        x = parameter([1.0, 2.0])
        ops.sum_(x).backward()
        ops.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, [2, 2])

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            parameter([1.0, 2.0]).backward()

    def test_diamond_visits_once(self):
        x = parameter([3.0])
        a = ops.mul(x, x)
        y = ops.sum_(ops.add(a, a))
        y.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_detached_branch_values_do_not_change_grads(self, rng):
        """Perturbing a detached branch's values leaves other leaves' grads untouched."""
        with precision(np.float64):
            w = parameter(rng.normal(size=4))
            side = rng.normal(size=4)
            grads = []
            for shift in (0.0, 5.0):
                w.grad = None
                branch = Tensor(side + shift)  # stands for a detached subgraph
                loss = ops.sum_(ops.add(ops.mul(w, w), branch.detach()))
                loss.backward()
                grads.append(w.grad.copy())
            np.testing.assert_array_equal(grads[0], grads[1])


class TestFiniteDiff:
    def test_quadratic(self, f64):
        err = finite_diff_check(lambda x: ops.sum_(ops.mul(x, x)), Tensor([1.0, 2.0]), 1e-6)
        assert err < 1e-6

    def test_l1_away_from_kinks(self, rng, f64):
        b = rng.normal(size=6)
        a = b + np.sign(rng.normal(size=6)) * rng.uniform(0.1, 1, 6)
        err = finite_diff_check(lambda x: ops.sum_(ops.abs_(ops.sub(x, Tensor(b)))), Tensor(a), 1e-6)
        assert err < 1e-4

    def test_detached_argument_skipped(self, f64):
        err = finite_diff_check(lambda x: ops.sum_(ops.mul(x.detach(), 3.0)), Tensor([1.0, 2.0]), 1e-6)
        assert err == 0.0

    def test_eps_range(self, f64):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: ops.sum_(x), Tensor([1.0]), 1e-2)


# --- CPTF -----------------------------------------------------------------

class TestCptf:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, rng, dtype, tmp_path):
        arr = rng.normal(size=(2, 3, 4)).astype(dtype)
        cptf.save(arr, tmp_path / "a.cptf")
        back = cptf.load(tmp_path / "a.cptf")
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)

    def test_header_layout(self):
        buf = cptf.to_bytes(np.zeros((2, 5), dtype=np.float32))
        assert buf[:4] == b"CPTF"
        assert buf[4:7] == bytes([1, 0, 2])
        assert buf[7:15] == (2).to_bytes(4, "little") + (5).to_bytes(4, "little")
        assert len(buf) == 15 + 40

    def test_rejects_garbage(self):
        with pytest.raises(cptf.CptfError):
            cptf.from_bytes(b"NOPE\x01\x00\x00")
        with pytest.raises(cptf.CptfError):
            cptf.from_bytes(cptf.to_bytes(np.zeros(3))[:-1])

    def test_bundle(self, tmp_path, rng):
        arrays = {"conv1.w": rng.normal(size=(2, 2)).astype(np.float32), "theta": np.ones(3)}
        cptf.save_bundle(arrays, tmp_path)
        back = cptf.load_bundle(tmp_path)
        assert set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
