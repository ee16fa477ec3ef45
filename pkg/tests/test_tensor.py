"""Tensor engine: ops, autodiff, optimizer."""

import numpy as np
import pytest
from helpers import finite_diff_check

from mist import tensor as T
from mist.optim import MissingGradientError, ParameterStore, adam_step
from mist.tensor import GraphError, ShapeError, Tape, Tensor, backward


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]))
        assert np.array_equal(out.data, [[2.0, 3.0], [4.0, 5.0]])

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 3)).astype(np.float32)
        expected = np.zeros((4, 3), dtype=np.float64)
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += float(a[i, k]) * float(b[k, j])
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - expected).max() <= 1e-6

    def test_batched_broadcast(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(4 if False else 1, 5, 6))  # broadcast over leading dims
        out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        assert out.shape == (2, 3, 4, 6)
        assert np.allclose(out.data, a @ b)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestMaskedSoftmax:
    def test_symmetric(self):
        out = T.masked_softmax_lastdim(Tensor([0.0, 0.0]), np.zeros(2, dtype=np.float32))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_masked_key_excluded(self):
        bias = np.array([0.0, T.mask_sentinel(np.float32)], dtype=np.float32)
        out = T.masked_softmax_lastdim(Tensor([5.0, 1.0]), bias)
        assert np.array_equal(out.data, [1.0, 0.0])

    def test_empty_row_convention(self):
        s = T.mask_sentinel(np.float32)
        out = T.masked_softmax_lastdim(Tensor([3.0, 3.0]), np.array([s, s], dtype=np.float32))
        assert np.array_equal(out.data, [0.0, 0.0])

    def test_rows_sum_to_one_or_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 8)).astype(np.float32)
        bias = np.zeros((6, 8), dtype=np.float32)
        s = T.mask_sentinel(np.float32)
        bias[1, ::2] = s
        bias[4, :] = s
        out = T.masked_softmax_lastdim(Tensor(x), bias)
        sums = out.data.sum(axis=-1)
        assert np.abs(sums[[0, 1, 2, 3, 5]] - 1.0).max() <= 1e-6
        assert sums[4] == 0.0


class TestReshapePermute:
    def test_transpose_law(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        y = T.reshape_permute(Tensor(x), (2, 3), (1, 0))
        for i in range(2):
            for j in range(3):
                assert x[i, j] == y.data[j, i]

    def test_split_concat_roundtrip_bit_exact(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 4, 2, 2)).astype(np.float32))
        clean = T.narrow(x, 0, 0, 1)
        noisy = T.narrow(x, 0, 1, 1)
        back = T.concat([clean, noisy], axis=0)
        assert np.array_equal(back.data, x.data)

    def test_set_axis_layout_matches_index_oracle(self):
        # [BZ, P, N, H, W, C] = [1,2,2,1,1,4] folded to [BZ*H*W, P*N, C]
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 2, 1, 1, 4)).astype(np.float32)
        step = T.reshape_permute(Tensor(x), (1, 4, 1, 4), (0, 2, 1, 3))
        y = T.reshape(step, (1, 4, 4))
        for p in range(2):
            for n in range(2):
                for c in range(4):
                    assert y.data[0, p * 2 + n, c] == x[0, p, n, 0, 0, c]

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4)).astype(np.float32)
        y = T.reshape_permute(Tensor(x), (2, 3, 4), (2, 0, 1))
        back = T.reshape_permute(y, y.shape, (1, 2, 0))
        assert np.array_equal(back.data, x)

    def test_element_count_mismatch(self):
        with pytest.raises(ShapeError):
            T.reshape_permute(Tensor(np.zeros((2, 3))), (7,), (0,))


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(x)
        grads = backward(loss, tape)
        assert np.array_equal(grads[x], [1.0, 1.0, 1.0])

    def test_grad_of_square(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            loss = T.sum_(T.mul(x, x))
        grads = backward(loss, tape)
        assert np.allclose(grads[x], [2.0, -4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(GraphError):
            backward(y, tape)

    def test_detached_graph_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = T.sum_(x)  # no tape active
        with Tape() as tape:
            pass
        with pytest.raises(GraphError):
            backward(loss, tape)

    def test_reuse_of_intermediate(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            loss = T.sum_(T.add(y, y))
        grads = backward(loss, tape)
        assert np.allclose(grads[x], [12.0])


class TestGradientSoundness:
    """Central-difference checks for every differentiable primitive (f64)."""

    @pytest.mark.parametrize("seed", range(3))
    def test_elementwise_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True)
        y = Tensor(rng.normal(size=(3, 4)) + 2.5, dtype=np.float64, requires_grad=True)

        def loss():
            z = T.div(T.mul(T.add(x, y), T.sub(x, y)), y)
            return T.sum_(T.mul(z, z))

        finite_diff_check(loss, [x, y])

    def test_matmul_broadcast(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64, requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), dtype=np.float64, requires_grad=True)
        finite_diff_check(lambda: T.sum_(T.mul(m := T.matmul(a, b), m)), [a, b])

    def test_reductions_and_unary(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 4)), dtype=np.float64, requires_grad=True)

        def loss():
            s = T.mean(T.exp(T.neg(x)), axis=(1,), keepdims=True)
            return T.sum_(T.mul(T.sqrt(x), s))

        finite_diff_check(loss, [x])

    def test_silu(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(8,)), dtype=np.float64, requires_grad=True)
        finite_diff_check(lambda: T.sum_(T.mul(T.silu(x), T.silu(x))), [x])

    def test_masked_softmax(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(3, 5)), dtype=np.float64, requires_grad=True)
        bias = np.zeros((3, 5), dtype=np.float64)
        bias[0, 2:] = T.mask_sentinel(np.float64)
        bias[2, :] = T.mask_sentinel(np.float64)
        w = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)

        def loss():
            return T.sum_(T.mul(T.masked_softmax_lastdim(x, bias), w))

        finite_diff_check(loss, [x])

    def test_conv2d(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)), dtype=np.float64, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, dtype=np.float64, requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), dtype=np.float64, requires_grad=True)

        def loss():
            out = T.conv2d(x, w, b, padding=1)
            return T.sum_(T.mul(out, out))

        finite_diff_check(loss, [x, w, b])

    def test_pool_and_upsample(self):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float64, requires_grad=True)

        def loss():
            down = T.avg_pool2(x)
            up = T.upsample_nearest2(down)
            return T.sum_(T.mul(up, up))

        finite_diff_check(loss, [x])

    def test_movement_ops(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64, requires_grad=True)

        def loss():
            y = T.reshape_permute(x, (2, 3, 4), (1, 0, 2))
            z = T.concat([T.narrow(y, 1, 0, 1), T.narrow(y, 1, 1, 1)], axis=1)
            return T.sum_(T.mul(z, z))

        finite_diff_check(loss, [x])


class TestInvariants:
    def test_forward_stays_finite(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        y = T.masked_softmax_lastdim(T.matmul(x, x), np.zeros((4, 4), dtype=np.float32))
        assert np.isfinite(y.data).all()

    def test_row_major_strides(self):
        x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
        itemsize = x.data.itemsize
        assert x.data.strides == (12 * itemsize, 4 * itemsize, itemsize)

    def test_determinism_same_seed(self):
        def run():
            rng = np.random.default_rng(42)
            store = ParameterStore(np.float32)
            w = store.create("w", (8, 8), rng)
            x = Tensor(rng.normal(size=(2, 8)).astype(np.float32))
            return T.matmul(x, w).data

        assert np.array_equal(run(), run())


class TestAdam:
    def _store(self, values):
        store = ParameterStore(np.float64)
        p = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        store._params["w"] = p
        return store, p

    def test_zero_gradient_keeps_parameters(self):
        store, p = self._store([1.0, -2.0])
        before = p.data.copy()
        adam_step(store, {"w": np.zeros(2)}, lr=0.1)
        assert np.array_equal(p.data, before)
        assert store.step_count == 1
        assert np.array_equal(store._m["w"], np.zeros(2))

    def test_first_step_is_signed_lr(self):
        store, p = self._store([0.0, 0.0])
        adam_step(store, {"w": np.array([0.3, -7.0])}, lr=0.05)
        assert np.allclose(p.data, [-0.05, 0.05], atol=1e-6)

    def test_quadratic_bowl_convergence(self):
        rng = np.random.default_rng(19)
        target = rng.normal(size=(6,))
        store = ParameterStore(np.float64)
        w = store.create("w", (6,), rng=None, init="zeros")
        for _ in range(200):
            grad = 2.0 * (w.data - target)
            adam_step(store, {"w": grad}, lr=0.05)
        assert np.linalg.norm(w.data - target) < 1e-2

    def test_missing_gradient_rejected(self):
        store, _ = self._store([1.0])
        with pytest.raises(MissingGradientError, match="w"):
            adam_step(store, {}, lr=0.1)


class TestParameterStore:
    def test_names_are_lexicographic(self):
        rng = np.random.default_rng(20)
        store = ParameterStore()
        store.create("b.w", (2,), rng)
        store.create("a.w", (2,), rng)
        store.create("a.b", (2,), rng)
        assert store.names() == ["a.b", "a.w", "b.w"]

    def test_duplicate_name_rejected(self):
        rng = np.random.default_rng(21)
        store = ParameterStore()
        store.create("w", (2,), rng)
        with pytest.raises(ValueError, match="duplicate"):
            store.create("w", (2,), rng)
