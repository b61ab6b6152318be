"""Reverse-mode autodiff: every op family against central differences."""

import numpy as np
import pytest

from spiraldiff import autodiff as ad
from spiraldiff.autodiff import Tensor


def numeric_grad(f, args, i, eps=1e-6):
    """Central-difference gradient of scalar f w.r.t. args[i]."""
    g = np.zeros_like(args[i])
    it = np.nditer(args[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in args]
        minus = [a.copy() for a in args]
        plus[i][idx] += eps
        minus[i][idx] -= eps
        g[idx] = (f(*plus) - f(*minus)) / (2 * eps)
    return g


def check_grads(build, *arrays, tol=1e-6):
    """build(tensors...) -> scalar Tensor; compares backward to differences."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()

    def f(*values):
        return build(*[Tensor(v) for v in values]).item()

    for i, leaf in enumerate(leaves):
        want = numeric_grad(f, list(arrays), i)
        got = leaf.grad
        assert got is not None
        scale = max(1.0, np.abs(want).max())
        assert np.abs(got - want).max() / scale < tol, f"arg {i}"


RNG = np.random.default_rng(17)
A = RNG.standard_normal((2, 3))
B = RNG.standard_normal((2, 3)) + 3.0  # away from zero for div/abs
C = RNG.standard_normal((3, 4))


class TestElementwise:
    def test_add_sub_mul(self):
        check_grads(lambda a, b: (a * b + a - 2.0 * b).sum(), A, B)

    def test_div_and_pow(self):
        check_grads(lambda a, b: ((a / b) ** 2.0).sum(), A, B)

    def test_scalar_operand_broadcast(self):
        check_grads(lambda a: ((3.0 - a) / 2.0 + (-a)).sum(), A)

    def test_broadcasting_unbroadcasts_grads(self):
        col = RNG.standard_normal((2, 1))
        check_grads(lambda a, c: (a * c + c).sum(), A, col)

    def test_absolute_off_origin(self):
        check_grads(lambda a: ad.absolute(a).sum(), B)

    def test_leaky_relu_off_kink(self):
        check_grads(lambda a: ad.leaky_relu(a, 0.01).sum(), B)
        check_grads(lambda a: ad.leaky_relu(a, 0.01).sum(), -B)

    def test_where_routes_gradient(self):
        cond = A > 0
        check_grads(lambda a, b: ad.where(cond, a, b).sum(), A, B)
        leaf_a, leaf_b = Tensor(A, requires_grad=True), Tensor(B, requires_grad=True)
        ad.where(cond, leaf_a, leaf_b).sum().backward()
        assert np.array_equal(leaf_a.grad, cond.astype(float))
        assert np.array_equal(leaf_b.grad, (~cond).astype(float))

    def test_softmax(self):
        w = RNG.standard_normal((2, 3))
        check_grads(lambda a: (ad.softmax(a, axis=-1) * w).sum(), A, tol=1e-5)
        probs = ad.softmax(Tensor(A), axis=-1).value
        assert np.allclose(probs.sum(axis=-1), 1.0)


class TestShapeOps:
    def test_matmul(self):
        check_grads(lambda a, c: (a @ c).sum(), A, C)

    def test_matmul_batched_broadcast(self):
        batch = RNG.standard_normal((4, 2, 3))
        check_grads(lambda x, c: ((x @ c) ** 2.0).sum(), batch, C, tol=1e-5)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3)) @ Tensor(np.ones(3))

    def test_reshape_swapaxes_getitem(self):
        check_grads(lambda a: a.reshape(3, 2).swapaxes(0, 1)[0].sum(), A)

    def test_getitem_slice(self):
        check_grads(lambda a: (a[:, 1:] * 2.0).sum(), A)

    def test_take_rows_accumulates_duplicates(self):
        idx = np.array([0, 1, 0, 0])
        w = RNG.standard_normal((4, 4))
        check_grads(lambda a: (ad.take_rows(a, idx) * w).sum(), C)
        leaf = Tensor(C, requires_grad=True)
        ad.take_rows(leaf, idx).sum().backward()
        assert np.array_equal(leaf.grad[0], 3.0 * np.ones(4))
        assert np.array_equal(leaf.grad[1], np.ones(4))
        assert np.array_equal(leaf.grad[2], np.zeros(4))

    def test_concat(self):
        check_grads(lambda a, b: ad.concat([a, b], axis=0).sum(), A, B)
        check_grads(lambda a, b: (ad.concat([a, b], axis=1) ** 2.0).sum(), A, B)

    def test_sum_mean_axes(self):
        check_grads(lambda a: a.sum(axis=0).mean(), A)
        check_grads(lambda a: a.mean(axis=1, keepdims=True).sum(), A)
        check_grads(lambda a: a.mean(), A)


class TestGraphMechanics:
    def test_diamond_reuse_accumulates(self):
        # y = (2x)*(3x) -> dy/dx = 12x, x reached along two paths
        x = Tensor(A, requires_grad=True)
        y = ((2.0 * x) * (3.0 * x)).sum()
        y.backward()
        assert np.allclose(x.grad, 12.0 * A)

    def test_stop_gradient_blocks_flow(self):
        x = Tensor(A, requires_grad=True)
        y = (ad.stop_gradient(x) * x).sum()
        y.backward()
        assert np.allclose(x.grad, A)  # only the live branch contributes

    def test_straight_through_composition(self):
        # q + sg(z - q) evaluates to z but routes gradient to q
        q = Tensor(A, requires_grad=True)
        z = Tensor(B, requires_grad=True)
        st = q + ad.stop_gradient(z - q)
        assert np.allclose(st.value, B, atol=1e-15)
        (st * 2.0).sum().backward()
        assert np.allclose(q.grad, 2.0 * np.ones_like(A))
        assert z.grad is None

    def test_backward_needs_scalar_without_seed(self):
        x = Tensor(A, requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_backward_with_seed(self):
        x = Tensor(A, requires_grad=True)
        seed = RNG.standard_normal(A.shape)
        (x * 3.0).backward(seed)
        assert np.allclose(x.grad, 3.0 * seed)

    def test_constants_carry_no_grad(self):
        x = Tensor(A)  # requires_grad defaults off
        y = (x * 2.0).sum()
        y.backward()
        assert x.grad is None

    def test_values_are_float64(self):
        t = ad.as_tensor(np.ones((2, 2), dtype=np.float32))
        assert t.value.dtype == np.float64
        assert Tensor([1, 2]).value.dtype == np.float64
