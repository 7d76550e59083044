import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rala_kit import autodiff as ad
from rala_kit import gradcheck
from rala_kit.attention import AttentionConfig, rala_attention
from rala_kit.linalg import DimensionError, rng


def test_identity_forward_and_backward():
    leaf = np.arange(6.0).reshape(2, 3)
    value, tape = ad.forward(lambda a: a, [leaf])
    np.testing.assert_array_equal(value, leaf)
    (g,) = ad.backward(tape, np.ones((2, 3)))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_matmul_by_identity_and_scalar_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    value, _ = ad.forward(lambda x: ad.matmul(x, np.eye(2)), [a])
    np.testing.assert_array_equal(value, a)
    _, tape = ad.forward(ad.matmul, [[[2.5]], [[-4.0]]])
    ga, gb = ad.backward(tape, [[1.0]])
    assert ga[0, 0] == -4.0 and gb[0, 0] == 2.5


def test_unused_leaf_gets_exact_zero():
    _, tape = ad.forward(lambda a, b: ad.scale(a, 2.0), [np.ones((2, 2)), np.ones((3, 1))])
    _, gb = ad.backward(tape, np.ones((2, 2)))
    assert gb.shape == (3, 1) and np.all(gb == 0.0)


def test_untaped_call_returns_array():
    out = ad.matmul(np.eye(2), np.ones((2, 1)))
    assert isinstance(out, np.ndarray)


def test_replay_reproduces_cached_values(gen):
    x, q, k, v = (gen.standard_normal((5, 4)) for _ in range(4))
    w, b = gen.standard_normal((4, 4)), gen.standard_normal((1, 4))
    cfg = AttentionConfig(head_dim=4)
    _, tape = ad.forward(lambda *a: rala_attention(a[0], a[1], a[2], a[3], cfg, {"weight": a[4], "bias": a[5]}),
                         [x, q, k, v, w, b])
    for node, replayed in zip(tape.nodes, tape.replay()):
        np.testing.assert_array_equal(node.value, replayed)


def test_tape_is_topologically_ordered(gen):
    _, tape = ad.forward(lambda a, b: ad.softmax_rows(ad.matmul(a, b)), [gen.standard_normal((2, 3)),
                                                                        gen.standard_normal((3, 2))])
    for node in tape.nodes:
        assert all(i.index < node.index for i in node.inputs)


def test_rala_forward_taped_equals_plain(gen):
    x, q, k, v = (gen.standard_normal((12, 6)) for _ in range(4))
    params = {"weight": gen.standard_normal((6, 6)), "bias": gen.standard_normal((1, 6))}
    cfg = AttentionConfig(head_dim=6)
    plain = rala_attention(x, q, k, v, cfg, params)
    taped, _ = ad.forward(lambda *a: rala_attention(a[0], a[1], a[2], a[3], cfg, {"weight": a[4], "bias": a[5]}),
                          [x, q, k, v, params["weight"], params["bias"]])
    np.testing.assert_array_equal(plain, taped)


def test_shape_error_names_failing_node():
    tape = ad.Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = ad.softmax_rows(a)
    with pytest.raises(DimensionError, match=r"matmul at tape node .*softmax_rows#"):
        ad.matmul(b, np.ones((2, 2)))


def test_seed_grad_shape_checked():
    _, tape = ad.forward(lambda a: a, [np.ones((2, 2))])
    with pytest.raises(DimensionError):
        ad.backward(tape, np.ones((3, 3)))


def test_linear_expression_gradcheck_is_roundoff_exact(gen):
    w = gen.standard_normal((4, 4))
    rep = ad.finite_diff_check(lambda a: ad.add(ad.matmul(a, w), ad.scale(a, 2.0)),
                               [gen.standard_normal((3, 4))], h=1e-5)
    assert rep.max_rel_error < 1e-9


def test_softmax_gradcheck_small(gen):
    rep = ad.finite_diff_check(ad.softmax_rows, [gen.standard_normal((2, 3))], h=1e-5)
    assert rep.max_rel_error < 1e-6


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(ad.tanh, [np.ones((2, 2))], h=0.1)


def test_broadcast_gradients_reduce_to_input_shape(gen):
    a, b = gen.standard_normal((2, 3, 4)), gen.standard_normal((3, 1))
    rep = ad.finite_diff_check(ad.hadamard, [a, b], h=1e-5)
    assert rep.max_rel_error < 1e-8
    rep = ad.finite_diff_check(ad.matmul, [a, gen.standard_normal((4, 2))], h=1e-5)
    assert rep.max_rel_error < 1e-8


@pytest.mark.parametrize("name", [n for n in gradcheck.CASES if n != "rala_block"])
def test_every_op_matches_central_differences(name):
    rep = gradcheck.check_op(name, trials=20, h=1e-5)
    assert rep.max_rel_error < 1e-5, rep


def test_op_registry_is_fully_gradchecked():
    assert set(ad.OPS) <= set(gradcheck.CASES)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    g = rng(seed, "linearity")
    a, b = g.standard_normal((3, 4)), g.standard_normal((4, 3))
    proj = g.standard_normal((3, 3))

    def f1(x, y):
        return ad.softmax_rows(ad.matmul(x, y))

    def f2(x, y):
        return ad.tanh(ad.matmul(x, y))

    _, t1 = ad.forward(f1, [a, b])
    _, t2 = ad.forward(f2, [a, b])
    _, t12 = ad.forward(lambda x, y: ad.add(f1(x, y), f2(x, y)), [a, b])
    for g1, g2, g12 in zip(ad.backward(t1, proj), ad.backward(t2, proj), ad.backward(t12, proj)):
        np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-14)
