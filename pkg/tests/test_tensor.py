import numpy as np
import pytest

import mrnadistill.tensor as T
from mrnadistill.errors import (ContractError, DomainError, NumericalError,
                                ShapeError)
from mrnadistill.rng import SeededRng


def rnd(shape, seed=0, scale=1.0):
    return SeededRng(seed).normal(shape, std=scale)


def tn(shape, seed=0, grad=True):
    return T.Tensor(rnd(shape, seed), requires_grad=grad, dtype=np.float64)


def numeric_grad(loss_fn, param: T.Tensor, step=1e-6):
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(param.data.shape)


def analytic_grad(loss_fn, param: T.Tensor):
    param.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, [param])
    return param.grad


def assert_grad_close(loss_fn, param, rtol=1e-6):
    a = analytic_grad(loss_fn, param)
    n = numeric_grad(loss_fn, param)
    denom = np.maximum(np.abs(n), 1e-8)
    assert np.max(np.abs(a - n) / denom) < rtol


class TestForwardSemantics:
    def test_affine_identity(self):
        x = tn((4, 3), seed=1)
        w = T.Tensor(np.eye(3), dtype=np.float64)
        b = T.Tensor(np.zeros(3), dtype=np.float64)
        assert np.allclose(T.affine(x, w, b).data, x.data)

    def test_affine_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(4, 3\).*\(5, 2\)"):
            T.affine(tn((4, 3)), tn((5, 2)), tn((2,)))

    def test_masked_mean_pool_rule(self):
        x = T.Tensor(np.array([[[1.0], [2.0], [3.0]], [[5.0], [5.0], [5.0]]]))
        mask = np.array([[True, True, False], [True, True, False]])
        out = T.masked_mean_pool(x, mask)
        assert np.allclose(out.data.reshape(-1), [1.5, 5.0])

    def test_masked_mean_pool_all_false_mask(self):
        x = tn((1, 3, 2))
        with pytest.raises(DomainError):
            T.masked_mean_pool(x, np.zeros((1, 3), dtype=bool))

    def test_masked_positions_ignored(self):
        x1 = rnd((2, 5, 3), seed=2)
        x2 = x1.copy()
        x2[:, 3:, :] = 99.0
        mask = np.zeros((2, 5), dtype=bool)
        mask[:, :3] = True
        o1 = T.masked_mean_pool(T.Tensor(x1), mask)
        o2 = T.masked_mean_pool(T.Tensor(x2), mask)
        assert np.array_equal(o1.data, o2.data)

    def test_softmax_constant_vector(self):
        out = T.softmax(T.Tensor(np.full(4, 2.5)))
        assert np.allclose(out.data, 0.25)

    def test_softmax_rows_sum_to_one(self):
        out = T.softmax(T.Tensor(rnd((10, 7), seed=3)), axis=-1)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_l2_normalize_unit_norm(self):
        out = T.l2_normalize(T.Tensor(rnd((6, 5), seed=4)))
        assert np.allclose(np.linalg.norm(out.data, axis=-1), 1.0)

    def test_l2_normalize_eps_guard(self):
        out = T.l2_normalize(T.Tensor(np.zeros(4)), eps=1e-12)
        assert np.all(np.isfinite(out.data))

    def test_layer_norm_statistics(self):
        d = 16
        x = tn((7, d), seed=5)
        out = T.layer_norm(x, T.Tensor(np.ones(d), dtype=np.float64),
                           T.Tensor(np.zeros(d), dtype=np.float64))
        assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.data.std(axis=-1), 1.0, atol=1e-4)

    def test_concat_and_shape_error(self):
        a, b = tn((2, 3)), tn((2, 5))
        assert T.concat(a, b, axis=-1).data.shape == (2, 8)
        with pytest.raises(ShapeError):
            T.concat(tn((2, 3)), tn((3, 3)), axis=-1)

    def test_embedding_lookup(self):
        table = T.Tensor(np.arange(12.0).reshape(4, 3), dtype=np.float64)
        out = T.embedding_lookup(table, np.array([[0, 3], [1, 1]]))
        assert out.data.shape == (2, 2, 3)
        assert np.array_equal(out.data[0, 1], table.data[3])

    def test_dropout_eval_identity_and_train_scaling(self):
        x = T.Tensor(np.ones((4, 8)), requires_grad=True)
        assert T.dropout(x, 0.5, None, training=False) is x
        rng = SeededRng(0)
        out = T.dropout(x, 0.5, rng, training=True)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 2.0)  # inverted dropout scaling

    def test_unknown_activation(self):
        with pytest.raises(ContractError):
            T.activation(tn((2, 2)), "relu")

    def test_debug_mode_flags_nonfinite(self):
        T.set_debug(True)
        try:
            bad = T.Tensor(np.array([1.0, np.inf]))
            with pytest.raises(NumericalError):
                T.add(bad, bad)
        finally:
            T.set_debug(False)


class TestPerOpGradients:
    """Central finite differences at float64, rel error <= 1e-4 per op."""

    def test_affine(self):
        x, w, b = tn((3, 4), 1), tn((4, 5), 2), tn((5,), 3)
        c = rnd((3, 5), 9)
        for p in (x, w, b):
            assert_grad_close(lambda: T.tsum(T.mul(T.affine(x, w, b), c)), p, rtol=1e-4)

    def test_embedding_lookup(self):
        table = tn((6, 4), 1)
        ids = np.array([[0, 2, 5], [2, 2, 1]])
        c = rnd((2, 3, 4), 8)
        assert_grad_close(lambda: T.tsum(T.mul(T.embedding_lookup(table, ids), c)), table, rtol=1e-4)

    def test_tanh(self):
        x = tn((4, 3), 2)
        c = rnd((4, 3), 7)
        assert_grad_close(lambda: T.tsum(T.mul(T.activation(x, "tanh"), c)), x, rtol=1e-4)

    def test_gelu(self):
        x = tn((4, 3), 3)
        c = rnd((4, 3), 6)
        assert_grad_close(lambda: T.tsum(T.mul(T.activation(x, "gelu"), c)), x, rtol=1e-4)

    def test_layer_norm(self):
        x, g, b = tn((5, 6), 4), tn((6,), 5), tn((6,), 6)
        c = rnd((5, 6), 5)
        for p in (x, g, b):
            assert_grad_close(lambda: T.tsum(T.mul(T.layer_norm(x, g, b), c)), p, rtol=1e-4)

    def test_masked_mean_pool(self):
        x = tn((2, 4, 3), 7)
        mask = np.array([[True, True, False, True], [True, False, False, True]])
        c = rnd((2, 3), 4)
        assert_grad_close(lambda: T.tsum(T.mul(T.masked_mean_pool(x, mask), c)), x, rtol=1e-4)

    def test_concat(self):
        a, b = tn((2, 3), 8), tn((2, 2), 9)
        c = rnd((2, 5), 3)
        for p in (a, b):
            assert_grad_close(lambda: T.tsum(T.mul(T.concat(a, b, axis=-1), c)), p, rtol=1e-4)

    def test_l2_normalize(self):
        x = tn((3, 4), 10)
        c = rnd((3, 4), 2)
        assert_grad_close(lambda: T.tsum(T.mul(T.l2_normalize(x), c)), x, rtol=1e-4)

    def test_softmax_and_log_softmax(self):
        x = tn((3, 5), 11)
        c = rnd((3, 5), 1)
        assert_grad_close(lambda: T.tsum(T.mul(T.softmax(x, axis=-1), c)), x, rtol=1e-4)
        assert_grad_close(lambda: T.tsum(T.mul(T.log_softmax(x, axis=-1), c)), x, rtol=1e-4)

    def test_reshape_add_sub_mul_scale(self):
        x = tn((2, 6), 12)
        y = tn((2, 6), 13)
        c = rnd((3, 4), 0)
        assert_grad_close(lambda: T.tsum(T.mul(T.reshape(x, (3, 4)), c)), x, rtol=1e-4)
        for p in (x, y):
            assert_grad_close(lambda: T.tsum(T.mul(T.add(x, y), rnd((2, 6), 4))), p, rtol=1e-4)
            assert_grad_close(lambda: T.tsum(T.mul(T.sub(x, y), rnd((2, 6), 5))), p, rtol=1e-4)
            assert_grad_close(lambda: T.tsum(T.mul(T.mul(x, y), rnd((2, 6), 6))), p, rtol=1e-4)
        assert_grad_close(lambda: T.tsum(T.scale(x, 2.5)), x, rtol=1e-4)
        assert_grad_close(lambda: T.tmean(T.add_scalar(x, 3.0)), x, rtol=1e-4)

    def test_sum_mean_axes(self):
        x = tn((3, 4), 14)
        assert_grad_close(lambda: T.tsum(T.mul(T.tsum(x, axis=0), rnd((4,), 1))), x, rtol=1e-4)
        assert_grad_close(lambda: T.tsum(T.mul(T.tmean(x, axis=1), rnd((3,), 2))), x, rtol=1e-4)

    def test_dropout_fixed_mask(self):
        x = tn((4, 4), 15)

        class FixedRng:
            def keep_mask(self, shape, p):
                m = np.ones(shape, dtype=bool)
                m.reshape(-1)[::3] = False
                return m

        assert_grad_close(
            lambda: T.tsum(T.mul(T.dropout(x, 0.25, FixedRng(), True), rnd((4, 4), 3))),
            x, rtol=1e-4)


class TestBackwardContract:
    def test_scalar_loss_required(self):
        x = tn((3,), 1)
        with T.Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_sum_affine_bias_grad_is_ones(self):
        x = T.Tensor(rnd((1, 4), 2), dtype=np.float64)
        w = tn((4, 3), 3)
        b = tn((3,), 4)
        with T.Tape() as tape:
            loss = T.tsum(T.affine(x, w, b))
        tape.backward(loss, [w, b])
        assert np.array_equal(b.grad, np.ones(3))

    def test_disconnected_param_gets_zero(self):
        used, unused = tn((3,), 5), tn((3,), 6)
        with T.Tape() as tape:
            loss = T.tsum(T.mul(used, used))
        tape.backward(loss, [used, unused])
        assert np.array_equal(unused.grad, np.zeros(3))
        assert used.grad is not None and np.any(used.grad != 0)

    def test_gradient_accumulates_on_reuse(self):
        x = tn((3,), 7)
        with T.Tape() as tape:
            loss = T.tsum(T.add(x, x))
        tape.backward(loss, [x])
        assert np.allclose(x.grad, 2.0)

    def test_backward_linearity(self):
        # grad(a*f + b*g) == a*grad(f) + b*grad(g) on a random graph
        x = tn((4, 4), 8)
        a, b = 1.7, -0.6

        def f():
            return T.tmean(T.mul(T.activation(x, "tanh"), x))

        def g():
            return T.tsum(T.l2_normalize(x))

        gf = analytic_grad(f, x)
        gg = analytic_grad(g, x)
        combined = analytic_grad(lambda: T.add(T.scale(f(), a), T.scale(g(), b)), x)
        assert np.allclose(combined, a * gf + b * gg, rtol=1e-10, atol=1e-12)

    def test_no_tape_records_outside_context(self):
        x = tn((2, 2), 9)
        tape = T.Tape()
        with tape:
            T.scale(x, 1.0)
        n_inside = len(tape)
        T.scale(x, 1.0)
        assert len(tape) == n_inside == 1


class TestFiniteDiffCheck:
    def test_requires_float64(self):
        p = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            T.finite_diff_check({"p": p}, lambda: T.tsum(T.mul(p, p)))

    def test_zero_parameter_model(self):
        assert T.finite_diff_check({}, lambda: None) == {}

    def test_two_block_student_all_groups_pass(self):
        from mrnadistill.losses import LossWeights, train_loss
        from mrnadistill.student import StudentConfig, StudentModel
        from mrnadistill.teacher import SyntheticTeacher, preset_spec

        model = StudentModel(StudentConfig(hidden_dim=8, n_blocks=2, tap_layers=(1, 2),
                                           proj_dims=(16, 16), dropout=0.0),
                             seed=3, dtype=np.float64)
        teacher = SyntheticTeacher(preset_spec("desk", seed=3, layer_dims=(16, 16),
                                               effective_rank=(4, 4)))
        rng = SeededRng(11)
        tokens = (rng.uniform((4, 16)) * 5 + 1).astype(np.int64)
        mask = np.ones((4, 16), dtype=bool)
        mask[0, 10:] = False
        targets = teacher.targets(tokens, mask, dtype=np.float64)
        weights = LossWeights()

        def loss_fn():
            out = model.forward(tokens, mask, train=False)
            return train_loss(zip(out.tap_projected, targets), weights)[0]

        report = T.finite_diff_check(model, loss_fn, step=1e-5, tolerance=1e-4)
        assert report, "expected a non-empty report"
        worst = max(report.values())
        assert worst <= 1e-4, f"worst relative error {worst}"

    def test_mutation_detected(self, monkeypatch):
        # a sign-flipped affine backward must blow past the tolerance
        real_affine = T.affine

        def broken_affine(x, w, b):
            out = real_affine(x, w, b)
            tape = T._TAPE_STACK[-1] if T._TAPE_STACK else None
            if tape is not None and tape._nodes:
                node = tape._nodes[-1]
                orig = node.vjp
                node.vjp = lambda g: tuple(None if gi is None else -gi for gi in orig(g))
            return out

        monkeypatch.setattr(T, "affine", broken_affine)
        w = tn((3, 3), 1)
        x = T.Tensor(rnd((2, 3), 2), dtype=np.float64)
        b = T.Tensor(np.zeros(3), dtype=np.float64)
        report = T.finite_diff_check({"w": w}, lambda: T.tsum(T.affine(x, w, b)))
        assert report["w"] > 1e-4
