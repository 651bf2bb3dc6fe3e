import numpy as np
import pytest

from vitlab import tensor as T
from vitlab.tensor import (
    AdamW,
    GradientError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    check_gradients,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        out = T.matmul(a, b)
        np.testing.assert_allclose(out.data, [[3, 4], [5, 6]])

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.item() == pytest.approx(11.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self):
        a = Tensor(rng(1).standard_normal((5, 4)), requires_grad=True)
        b = Tensor(rng(2).standard_normal((4, 3)), requires_grad=True)

        def loss():
            return T.matmul(a, b).sum()

        with Tape() as tape:
            tape.backward(loss())
        numeric = T.numeric_gradient(loss, a)
        rel = np.linalg.norm(a.grad - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-3

    def test_batched_gradient(self):
        a = Tensor(rng(3).standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng(4).standard_normal((2, 4, 2)), requires_grad=True)
        check_gradients(lambda: T.matmul(a, b).sum(), [a, b])


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_large_values_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0]), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_against_high_precision(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x.astype(np.float64))
        expected /= expected.sum()
        out = T.softmax(Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data, expected, rtol=1e-6)

    def test_rows_sum_to_one(self):
        x = Tensor(rng(5).standard_normal((6, 9)) * 10)
        out = T.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)
        assert (out.data >= 0).all()

    def test_gradient(self):
        x = Tensor(rng(6).standard_normal((3, 5)), requires_grad=True)
        w = Tensor(rng(7).standard_normal((3, 5)))
        check_gradients(lambda: (T.softmax(x, axis=-1) * w).sum(), [x])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))
        out = T.layer_norm(Tensor(np.full((2, 4), 7.0)), gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-4)

    def test_already_standardized(self):
        gain = Tensor(np.ones(2))
        bias = Tensor(np.zeros(2))
        out = T.layer_norm(Tensor([[1.0, -1.0]]), gain, bias, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_gradient(self):
        x = Tensor(rng(8).standard_normal((3, 8)), requires_grad=True)
        gain = Tensor(rng(9).standard_normal(8), requires_grad=True)
        bias = Tensor(rng(10).standard_normal(8), requires_grad=True)
        w = Tensor(rng(11).standard_normal((3, 8)))

        def loss():
            return (T.layer_norm(x, gain, bias) * w).sum()

        check_gradients(loss, [x, gain, bias])  # elementwise, module tolerances
        x.zero_grad()
        with Tape() as tape:
            tape.backward(loss())
        numeric = T.numeric_gradient(loss, x)
        rel = np.linalg.norm(x.grad - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-3

    def test_shape_contract(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        logits = Tensor([[30.0, 0.0, 0.0]])
        assert T.cross_entropy(logits, np.array([0])).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4)))
        loss = T.cross_entropy(logits, np.array([1, 3]))
        assert loss.item() == pytest.approx(np.log(4.0), rel=1e-6)

    def test_out_of_range_label(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_gradient(self):
        logits = Tensor(rng(12).standard_normal((6, 10)), requires_grad=True)
        labels = rng(13).integers(0, 10, size=6)
        check_gradients(lambda: T.cross_entropy(logits, labels), [logits])


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(rng(14).standard_normal(5), requires_grad=True)
        with Tape() as tape:
            tape.backward(x.sum())
        np.testing.assert_allclose(x.grad, np.ones(5))

    def test_square_sum_analytic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            tape.backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * x
            with pytest.raises(GradientError):
                tape.backward(y)

    def test_repeated_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                tape.backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [8.0])

    def test_diamond_graph_sums_both_paths(self):
        # y = sum(x*x + 3x): x feeds two consumers; grad = 2x + 3.
        x = Tensor(rng(15).standard_normal(4), requires_grad=True)
        check_gradients(lambda: (x * x + x * Tensor(np.full(4, 3.0))).sum(), [x])
        x.zero_grad()
        with Tape() as tape:
            tape.backward((x * x + x * Tensor(np.full(4, 3.0))).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data + 3, rtol=1e-5)


class TestOps:
    def test_concat_and_slice_gradients(self):
        a = Tensor(rng(16).standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng(17).standard_normal((2, 2)), requires_grad=True)
        w = Tensor(rng(18).standard_normal((2, 5)))

        def loss():
            joint = T.concat([a, b], axis=1)
            return (joint * w).sum()

        check_gradients(loss, [a, b])

    def test_index_select_gradient_with_duplicates(self):
        a = Tensor(rng(19).standard_normal((4, 2)), requires_grad=True)
        idx = np.array([0, 2, 2, 1])
        w = Tensor(rng(20).standard_normal((4, 2)))
        check_gradients(lambda: (T.index_select(a, idx, axis=0) * w).sum(), [a])

    def test_expand_gradient(self):
        a = Tensor(rng(21).standard_normal((1, 3)), requires_grad=True)
        w = Tensor(rng(22).standard_normal((4, 3)))
        check_gradients(lambda: (T.expand(a, (4, 3)) * w).sum(), [a])

    def test_gelu_gradient(self):
        x = Tensor(rng(23).standard_normal((3, 4)), requires_grad=True)
        check_gradients(lambda: T.gelu(x).sum(), [x])

    def test_mean_and_transpose_gradients(self):
        x = Tensor(rng(24).standard_normal((3, 4, 2)), requires_grad=True)
        w = Tensor(rng(25).standard_normal((2, 4)))
        check_gradients(lambda: (T.transpose(x, (2, 1, 0)).mean(axis=2) * w).sum(), [x])

    def test_nan_detection(self):
        with pytest.raises(NumericError):
            Tensor([np.nan, 1.0])
        big = Tensor([1e38, 1e38])
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            T.mul(big, big)  # overflows float32 to inf

    def test_determinism(self):
        x = rng(26).standard_normal((8, 8)).astype(np.float32)
        a = T.softmax(T.matmul(Tensor(x), Tensor(x)), axis=-1).data
        b = T.softmax(T.matmul(Tensor(x), Tensor(x)), axis=-1).data
        assert (a == b).all()


class TestAdamW:
    def test_zero_grad_leaves_params(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(2, dtype=np.float32)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_first_step_bias_corrected(self):
        # Constant unit gradient: bias-corrected first step is -lr / (1 + eps).
        p = Tensor([0.5], requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(0.4, abs=1e-6)

    def test_missing_grad_rejected(self):
        p = Tensor([1.0], requires_grad=True)
        opt = AdamW([p])
        with pytest.raises(GradientError):
            opt.step()

    def test_quadratic_bowl_converges(self):
        w = Tensor(rng(27).standard_normal(6), requires_grad=True)
        opt = AdamW([w], lr=0.05, weight_decay=0.0)
        for _ in range(500):
            opt.zero_grad()
            with Tape() as tape:
                tape.backward((w * w).sum())
            opt.step()
        assert float((w.data ** 2).sum()) < 1e-4

    def test_grads_untouched_and_counter(self):
        p = Tensor([1.0], requires_grad=True)
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([0.5], dtype=np.float32)
        opt.step()
        np.testing.assert_allclose(p.grad, [0.5])
        assert opt.step_count == 1


class TestBlobFormat:
    def test_round_trip(self, tmp_path):
        arr = rng(28).standard_normal((3, 4, 2)).astype(np.float32)
        path = tmp_path / "t.blob"
        with open(path, "wb") as f:
            T.write_blob(f, arr)
        with open(path, "rb") as f:
            back = T.read_blob(f)
        np.testing.assert_array_equal(arr, back)

    def test_layout_is_little_endian_u32(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        raw = T.blob_to_bytes(arr)
        assert raw[:4] == b"\x02\x00\x00\x00"
        assert raw[4:8] == b"\x02\x00\x00\x00"
        assert raw[8:12] == b"\x03\x00\x00\x00"
        assert len(raw) == 12 + 6 * 4

    def test_bytes_round_trip_offset(self):
        a = np.ones((2, 2), dtype=np.float32)
        b = np.full((3,), 2.0, dtype=np.float32)
        buf = T.blob_to_bytes(a) + T.blob_to_bytes(b)
        out_a, used = T.blob_from_bytes(buf, 0)
        out_b, _ = T.blob_from_bytes(buf, used)
        np.testing.assert_array_equal(out_a, a)
        np.testing.assert_array_equal(out_b, b)
