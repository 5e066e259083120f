"""Tests for the tensor engine: forward semantics, gradients, checkpoints."""

import math

import numpy as np
import pytest

from cib import tensor as T
from cib.tensor import (
    DomainError,
    GraphError,
    ShapeError,
    Tensor,
    apply,
    backward,
    finite_diff_check,
)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = apply("matmul", [a, Tensor(np.eye(2))])
    np.testing.assert_array_equal(out.data, a.data)


def test_logsumexp_of_equal_zeros_is_log_n():
    out = apply("logsumexp", [Tensor([0.0, 0.0, 0.0, 0.0])])
    assert out.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_add_zero_is_bit_identical():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = apply("add", [x, T.zeros_like(x)])
    assert np.array_equal(out.data, x.data)


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    r1 = T.tanh(T.matmul(Tensor(a), Tensor(b))).data
    r2 = T.tanh(T.matmul(Tensor(a), Tensor(b))).data
    assert np.array_equal(r1, r2)


def test_logsumexp_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.normal(size=rng.integers(2, 8))
        c = float(rng.normal() * 5)
        lhs = T.logsumexp(Tensor(x + c)).item()
        rhs = T.logsumexp(Tensor(x)).item() + c
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)

    with pytest.raises(ShapeError) as exc:
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, -0.5]))
    with pytest.raises(DomainError):
        T.log(Tensor([0.0]))


def test_exp_overflow_rejected():
    with pytest.raises(DomainError):
        T.exp(Tensor([1000.0]))


def test_unknown_op_rejected():
    with pytest.raises(ValueError):
        apply("conv2d", [Tensor([1.0])])


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        loss = T.elementwise_mul(x, x)
        grads = backward(loss)
        assert grads.raw(x) == pytest.approx(6.0)

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 2)), requires_grad=True)
        grads = backward(T.sum(x))
        np.testing.assert_array_equal(grads.raw(x), np.ones((3, 2)))

    def test_matmul_mean_against_finite_differences(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(4, 2)))
        err = finite_diff_check(lambda params: T.mean(T.matmul(params[0], v)), [w], h=1e-5)
        assert err < 1e-6

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            backward(T.scalar_mul(x, 2.0))

    def test_repeated_backward_is_idempotent(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum(T.elementwise_mul(x, x))
        g1 = backward(loss).raw(x)
        g2 = backward(loss).raw(x)
        np.testing.assert_array_equal(g1, g2)

    def test_unreachable_parameter_gets_zero_gradient(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        grads = backward(T.sum(x))
        assert unused not in grads
        np.testing.assert_array_equal(grads.get(unused).data, np.zeros(1))

    def test_diamond_graph_accumulates(self):
        # y = x*x + x  ->  dy/dx = 2x + 1
        x = Tensor(2.0, requires_grad=True)
        y = T.add(T.elementwise_mul(x, x), x)
        assert backward(y).raw(x) == pytest.approx(5.0)

    def test_no_grad_disables_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with T.no_grad():
            y = T.sum(T.elementwise_mul(x, x))
        assert not y.requires_grad


class TestFiniteDiffCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)

        def f(params):
            return T.sum(T.matmul(T.transpose(params[0]), T.matmul(a, params[0])))

        assert finite_diff_check(f, [x], h=1e-5) < 1e-7

    def test_constant_function_has_zero_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor(3.0)
        assert finite_diff_check(lambda params: T.sum(c), [x], h=1e-5) == 0.0

    def test_nondeterministic_function_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        state = {"calls": 0}

        def f(params):
            state["calls"] += 1
            return T.sum(T.scalar_mul(params[0], float(state["calls"])))

        with pytest.raises(GraphError):
            finite_diff_check(f, [x])

    def test_rejects_nonpositive_h(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            finite_diff_check(lambda p: T.sum(p[0]), [x], h=0.0)


# ---------------------------------------------------------------------------
# Per-op gradient property test: every registered op, >=100 random cases.
# ---------------------------------------------------------------------------

def _random_case(op, rng):
    """Build (inputs, callable) so that callable(params) is a scalar through op."""
    def away_from_zero(shape, margin=1e-2):
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)

    def scalarize(out, rng):
        r = Tensor(rng.normal(size=out.shape))
        return T.sum(T.elementwise_mul(out, r))

    if op == "matmul":
        m, k, n = rng.integers(1, 4, size=3)
        a = Tensor(rng.normal(size=(m, k)), requires_grad=True)
        b = Tensor(rng.normal(size=(k, n)), requires_grad=True)
        r = rng.normal(size=(m, n))
        return [a, b], lambda p: T.sum(T.elementwise_mul(T.matmul(p[0], p[1]), Tensor(r)))
    if op in ("add", "sub", "elementwise_mul"):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        a = Tensor(rng.normal(size=shape), requires_grad=True)
        # Exercise broadcasting on roughly half the cases.
        bshape = shape if rng.random() < 0.5 else shape[-1:]
        b = Tensor(rng.normal(size=bshape), requires_grad=True)
        r = rng.normal(size=shape)
        fn = getattr(T, op)
        return [a, b], lambda p: T.sum(T.elementwise_mul(fn(p[0], p[1]), Tensor(r)))
    if op == "scalar_mul":
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        c = float(rng.normal())
        r = rng.normal(size=(3,))
        return [a], lambda p: T.sum(T.elementwise_mul(T.scalar_mul(p[0], c), Tensor(r)))
    if op == "relu":
        a = Tensor(away_from_zero((4,), margin=1e-2), requires_grad=True)
        r = rng.normal(size=(4,))
        return [a], lambda p: T.sum(T.elementwise_mul(T.relu(p[0]), Tensor(r)))
    if op == "tanh":
        a = Tensor(rng.normal(size=(4,)), requires_grad=True)
        r = rng.normal(size=(4,))
        return [a], lambda p: T.sum(T.elementwise_mul(T.tanh(p[0]), Tensor(r)))
    if op == "exp":
        a = Tensor(rng.uniform(-2, 2, size=(4,)), requires_grad=True)
        r = rng.normal(size=(4,))
        return [a], lambda p: T.sum(T.elementwise_mul(T.exp(p[0]), Tensor(r)))
    if op == "log":
        a = Tensor(rng.uniform(0.2, 3.0, size=(4,)), requires_grad=True)
        r = rng.normal(size=(4,))
        return [a], lambda p: T.sum(T.elementwise_mul(T.log(p[0]), Tensor(r)))
    if op in ("mean", "sum", "logsumexp"):
        shape = tuple(rng.integers(2, 4, size=2))
        a = Tensor(rng.normal(size=shape), requires_grad=True)
        axis = [None, 0, 1][rng.integers(0, 3)]
        fn = {"mean": T.mean, "sum": T.sum, "logsumexp": T.logsumexp}[op]
        if axis is None:
            return [a], lambda p: fn(p[0], axis=None)
        out_shape = shape[1:] if axis == 0 else shape[:1]
        r = rng.normal(size=out_shape)
        return [a], lambda p: T.sum(T.elementwise_mul(fn(p[0], axis=axis), Tensor(r)))
    if op == "concat":
        n = rng.integers(2, 4)
        cols = int(rng.integers(1, 4))
        parts = [Tensor(rng.normal(size=(int(rng.integers(1, 3)), cols)), requires_grad=True)
                 for _ in range(n)]
        total = sum(p.shape[0] for p in parts)
        r = rng.normal(size=(total, cols))
        return parts, lambda p: T.sum(T.elementwise_mul(T.concat(list(p), axis=0), Tensor(r)))
    if op == "slice":
        rows = int(rng.integers(2, 5))
        a = Tensor(rng.normal(size=(rows, 3)), requires_grad=True)
        start = int(rng.integers(0, rows - 1))
        stop = int(rng.integers(start + 1, rows + 1))
        r = rng.normal(size=(stop - start, 3))
        return [a], lambda p: T.sum(T.elementwise_mul(T.slice_(p[0], 0, start, stop), Tensor(r)))
    if op == "transpose":
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        r = rng.normal(size=(3, 2))
        return [a], lambda p: T.sum(T.elementwise_mul(T.transpose(p[0]), Tensor(r)))
    if op == "broadcast":
        a = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        target = (int(rng.integers(2, 4)), 3)
        r = rng.normal(size=target)
        return [a], lambda p: T.sum(T.elementwise_mul(T.broadcast(p[0], target), Tensor(r)))
    if op == "reshape":
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        r = rng.normal(size=(6,))
        return [a], lambda p: T.sum(T.elementwise_mul(T.reshape(p[0], (6,)), Tensor(r)))
    raise AssertionError(f"no case generator for op {op}")


@pytest.mark.parametrize("op", T.op_kinds())
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(abs(hash(op)) % (2**32))
    for case in range(100):
        params, f = _random_case(op, rng)
        err = finite_diff_check(f, params, h=1e-5)
        assert err < 1e-4, f"{op} case {case}: relative error {err}"


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        params = {
            "w": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
            "b": Tensor(rng.normal(size=(4,)), requires_grad=True),
            "scalar": Tensor(rng.normal(), requires_grad=True),
        }
        path = tmp_path / "ckpt.json"
        T.save_checkpoint(params, path)
        state = T.load_checkpoint(path)
        assert set(state) == set(params)
        for name, t in params.items():
            assert np.array_equal(state[name], t.data)
            assert state[name].dtype == np.float64

    def test_load_into_validates_names(self, tmp_path):
        params = {"w": Tensor(np.ones((2,)))}
        with pytest.raises(ValueError):
            T.load_into(params, {"w": np.ones(2), "extra": np.ones(1)})

    def test_serialization_is_deterministic(self):
        params = {"a": Tensor([1.5, -2.25]), "b": Tensor(np.arange(4.0).reshape(2, 2))}
        assert T.checkpoint_dumps(params) == T.checkpoint_dumps(params)

    def test_document_format(self):
        import base64
        import json

        doc = json.loads(T.checkpoint_dumps({"w": Tensor([[1.0, -2.0]])}))
        assert set(doc) == {"w"}
        assert set(doc["w"]) == {"shape", "data"}
        assert doc["w"]["shape"] == [1, 2]
        payload = base64.b64decode(doc["w"]["data"])
        assert np.array_equal(np.frombuffer(payload, dtype="<f8"), [1.0, -2.0])


def test_required_op_kinds_registered():
    required = {"matmul", "add", "sub", "elementwise_mul", "scalar_mul", "relu",
                "tanh", "exp", "log", "mean", "sum", "logsumexp", "concat",
                "slice", "transpose", "broadcast"}
    assert required <= set(T.op_kinds())


def test_assign_shape_checked():
    t = Tensor(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        t.assign_(np.ones(3))
