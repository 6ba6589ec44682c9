"""Tape, ops, finite-difference oracle, and the optimizer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gaussianssc.tensor as T
from gaussianssc.tensor import (Adam, ConfigError, ShapeError, Tape, Tensor,
                                grad_check)


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_matmul_1x1():
    out = T.matmul(Tensor([[2.0]]), Tensor([[5.0]]))
    assert np.array_equal(out.data, [[10.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))
    assert "(3, 4)" in str(e.value) and "(5, 2)" in str(e.value)


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    err = grad_check(T.matmul, [Tensor(rng.standard_normal((3, 4))),
                                Tensor(rng.standard_normal((4, 2)))])
    assert err < 1e-6


def test_softplus_at_zero_is_ln2():
    out = T.softplus_clamped(Tensor([0.0]), 0.1, 10.0)
    assert np.allclose(out.data, np.log(2.0), atol=1e-12)


def test_softplus_clamp_floor():
    out = T.softplus_clamped(Tensor([-100.0]), 0.1, 10.0)
    assert np.array_equal(out.data, [0.1])


def test_softplus_interior_value():
    out = T.softplus_clamped(Tensor([3.0]), 0.1, 10.0)
    assert np.allclose(out.data, np.log1p(np.exp(3.0)), atol=1e-12)
    assert abs(out.data.item() - 3.0486) < 1e-4


def test_softplus_bad_band():
    with pytest.raises(ConfigError):
        T.softplus_clamped(Tensor([0.0]), 2.0, 1.0)


def test_softplus_interior_gradcheck():
    err = grad_check(lambda x: T.softplus_clamped(x, 0.1, 10.0),
                     [Tensor([0.7, 1.3, -0.2])])
    assert err < 1e-6


def test_bilinear_lattice_point_exact():
    plane = np.arange(24, dtype=float).reshape(4, 6, 1)
    out = T.bilinear_sample(Tensor(plane), Tensor([2.0]), Tensor([3.0]))
    assert np.array_equal(out.data.ravel(), plane[3, 2].ravel())


def test_bilinear_midpoint():
    plane = np.zeros((2, 2, 1))
    plane[0, 1, 0] = 1.0
    out = T.bilinear_sample(Tensor(plane), Tensor([0.5]), Tensor([0.0]))
    assert np.allclose(out.data, 0.5)


def test_bilinear_clamps_to_corner():
    plane = np.arange(8, dtype=float).reshape(2, 4, 1)
    out = T.bilinear_sample(Tensor(plane), Tensor([-5.0]), Tensor([-5.0]))
    assert np.array_equal(out.data.ravel(), plane[0, 0].ravel())


def test_scatter_add_single_entry():
    target = np.zeros((3, 3, 2))
    out = T.scatter_add(Tensor(target), [1], [2], Tensor([[5.0, 6.0]]))
    expect = target.copy()
    expect[1, 2] = [5.0, 6.0]
    assert np.array_equal(out.data, expect)


def test_scatter_add_collision_additivity():
    out = T.scatter_add(Tensor(np.zeros((2, 2, 1))), [0, 0], [1, 1],
                        Tensor([[2.0], [3.0]]))
    assert np.array_equal(out.data[0, 1], [5.0])


def test_scatter_add_repeat_bit_identical_and_permutation_close():
    rng = np.random.default_rng(3)
    vals = rng.standard_normal((6, 3))
    rows = np.array([1, 0, 1, 1, 0, 1])
    cols = np.array([2, 2, 2, 0, 2, 2])
    a = T.scatter_add(Tensor(np.zeros((2, 3, 3))), rows, cols, Tensor(vals))
    # same input order reduces bit-identically
    b = T.scatter_add(Tensor(np.zeros((2, 3, 3))), rows, cols, Tensor(vals))
    assert a.data.tobytes() == b.data.tobytes()
    # reordered collisions agree to rounding only (ties keep input order)
    p = np.array([3, 5, 1, 0, 2, 4])
    c = T.scatter_add(Tensor(np.zeros((2, 3, 3))), rows[p], cols[p], Tensor(vals[p]))
    assert np.allclose(a.data, c.data, atol=1e-12)


def test_scatter_add_index_error_names_entry():
    with pytest.raises(IndexError) as e:
        T.scatter_add(Tensor(np.zeros((2, 2, 1))), [0, 5], [0, 1],
                      Tensor(np.zeros((2, 1))))
    assert "(5, 1)" in str(e.value) and "entry 1" in str(e.value)


def test_grad_check_constant_op_is_zero():
    err = grad_check(lambda x: x * 0.0, [Tensor([1.0, 2.0])])
    assert err == 0.0


def test_grad_check_flags_corrupted_backward():
    def bad(x):
        # fused op whose hand VJP is deliberately wrong
        return T.custom_op("bad", (x,), x.data * 2.0,
                           lambda g, need: (g * 3.0,))
    err = grad_check(bad, [Tensor([1.0, -2.0, 0.5])])
    assert err > 0.5


def test_backward_accumulates_shared_input():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x + x
        tape.backward(y)
    assert np.allclose(x.grad, [5.0])


def test_adam_zero_grad_no_update():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    before = p.data.copy()
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, before)


def test_adam_descends_quadratic():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(200):
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(p.data.item()) < 1e-2


def test_clip_gradient_band():
    x = Tensor([-1.0, 0.2, 1.5], requires_grad=True)
    with Tape() as tape:
        tape.backward(T.clip(x, -0.5, 0.5).sum())
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_normalizes(vals):
    out = T.softmax(Tensor(vals), axis=0)
    assert abs(out.data.sum() - 1.0) < 1e-12
    assert (out.data >= 0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_broadcast_add_grads_match_oracle(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((3, 1)))
    b = Tensor(rng.standard_normal((1, 4)))
    assert grad_check(T.add, [a, b]) < 1e-6
