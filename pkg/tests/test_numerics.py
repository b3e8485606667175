import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from alfalab.errors import ContractError, RankError, ShapeError
from alfalab.numerics import (
    AdamState,
    AdamW,
    Tape,
    adamw_step,
    fd_gradient,
    make_rng,
    matmul,
    softmax_rows,
    svd,
)

# singular values of default_rng(86).normal(size=(8, 6)), frozen from the Jacobi eigen oracle
SV_8x6 = [4.238155190065332, 4.055199758458945, 2.9564358678845033]


def test_matmul_identity_and_hand_case():
    m = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0], [6]])).tolist() == [[17], [39]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_associativity():
    rng = make_rng(1)
    a, b, c = rng.normal(size=(5, 7)), rng.normal(size=(7, 4)), rng.normal(size=(4, 6))
    diff = matmul(matmul(a, b), c) - matmul(a, matmul(b, c))
    assert np.abs(diff).max() <= 1e-9


def test_softmax_cases():
    assert np.allclose(softmax_rows(np.zeros((2, 3))), 1 / 3, atol=1e-15)
    assert np.allclose(softmax_rows(np.array([[0.0, math.log(3)]])), [[0.25, 0.75]], atol=1e-15)
    x = make_rng(2).normal(size=(3, 5))
    assert np.allclose(softmax_rows(x + 123.0), softmax_rows(x), atol=1e-15)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    p = softmax_rows(x)
    assert np.all(np.isfinite(p))
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12


def test_svd_identity_tail():
    res = svd(np.eye(4), 2)
    assert np.allclose(res.S, [1, 1])
    assert math.isclose(np.linalg.norm(np.eye(4) - res.reconstruct()), math.sqrt(2), rel_tol=1e-12)


def test_svd_rank_one_exact():
    u, v = make_rng(3).normal(size=5), make_rng(4).normal(size=7)
    w = np.outer(u, v)
    assert np.abs(svd(w, 1).reconstruct() - w).max() <= 1e-12


def test_svd_8x6_against_eigen_oracle():
    w = np.random.default_rng(86).normal(size=(8, 6))
    res = svd(w, 3)
    assert np.allclose(oracles.singular_values(w)[:3], SV_8x6, atol=1e-12)
    assert np.abs(res.S - SV_8x6).max() <= 1e-9


def test_svd_rank_errors():
    w = np.ones((3, 4))
    for d in (0, 4, -1):
        with pytest.raises(RankError):
            svd(w, d)


def test_svd_sign_convention_and_deficient_rank():
    w = np.zeros((4, 6))
    w[0, 0] = 3.0
    w[1, 2] = -2.0
    res = svd(w, 4)
    assert np.allclose(res.S, [3, 2, 0, 0])
    assert np.allclose(res.U.T @ res.U, np.eye(4), atol=1e-12)
    for row in res.Vt:
        assert row[np.argmax(np.abs(row))] > 0
    assert np.abs(res.reconstruct() - w).max() <= 1e-14


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1), st.data())
def test_svd_optimality_property(m, n, seed, data):
    d = data.draw(st.integers(1, min(m, n)))
    w = np.random.default_rng(seed).normal(size=(m, n))
    res = svd(w, d)
    err = np.linalg.norm(w - res.reconstruct())
    assert abs(err - oracles.tail_energy(w, d)) <= 1e-8 * max(1.0, np.linalg.norm(w))
    assert np.all(np.diff(res.S) <= 1e-12)


def test_svd_deterministic():
    w = make_rng(9).normal(size=(10, 13))
    a, b = svd(w, 5), svd(w, 5)
    assert a.U.tobytes() == b.U.tobytes() and a.Vt.tobytes() == b.Vt.tobytes()


def test_make_rng_streams():
    assert make_rng(1, 2).random() == make_rng(1, 2).random()
    assert make_rng(1, 2).random() != make_rng(1, 3).random()


# ------------------------------------------------------------------ tape


def test_backward_quadratic_and_constant():
    p_val = make_rng(5).normal(size=(3, 2))
    tape = Tape()
    p = tape.param("p", p_val)
    const_loss = tape.l1_mean(tape.const(np.array([[4.0]])))
    assert np.array_equal(tape.backward(const_loss)["p"], np.zeros((3, 2)))
    # 0.5 * ||P||_F^2 = 0.5 * (e1^T P^T P e1 + e2^T P^T P e2)
    gram = tape.matmul(tape.transpose(p), p)
    terms = []
    for e in (np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])):
        terms.append(tape.matmul(tape.matmul(tape.const(e), gram), tape.const(e.T)))
    loss = tape.scale(tape.add(*terms), 0.5)
    assert np.allclose(tape.backward(loss)["p"], p_val, atol=1e-14)


def test_unused_param_gets_zero_grad():
    tape = Tape()
    tape.param("unused", np.ones((2, 2)))
    x = tape.param("x", np.array([[2.0]]))
    g = tape.backward(tape.scale(x, 3.0))
    assert g["x"].tolist() == [[3.0]]
    assert np.array_equal(g["unused"], np.zeros((2, 2)))


def test_backward_needs_scalar():
    tape = Tape()
    p = tape.param("p", np.ones((2, 2)))
    with pytest.raises(ContractError):
        tape.backward(p)


def test_l1_subgradient_zero_at_zero():
    tape = Tape()
    p = tape.param("p", np.array([[0.0, 2.0], [-1.0, 0.0]]))
    g = tape.backward(tape.l1_mean(p))["p"]
    assert g.tolist() == [[0.0, 0.5], [-0.5, 0.0]]


def _random_graph(tape, params, rng, depth):
    """Chain of primitive ops over 3x3 parameters, reduced by l1_mean."""
    nodes = list(params)
    x = nodes[0]
    ops = ["matmul", "add", "transpose", "scale", "softmax", "stack"]
    for i in range(depth):
        op = ops[int(rng.integers(len(ops)))]
        other = nodes[int(rng.integers(len(nodes)))]
        if op == "matmul":
            x = tape.matmul(x, other)
        elif op == "add":
            x = tape.add(x, other)
        elif op == "transpose":
            x = tape.transpose(x)
        elif op == "scale":
            x = tape.scale(x, float(rng.uniform(-1.5, 1.5)))
        elif op == "softmax":
            x = tape.softmax_rows(x)
        else:
            x = tape.matmul(tape.const(np.full((3, 6), 0.5)), tape.stack([x, other]))
    return tape.l1_mean(tape.add(x, tape.const(np.full((3, 3), 0.37))))


@pytest.mark.parametrize("seed", range(12))
def test_backward_matches_fd_on_random_graphs(seed):
    rng = make_rng(100, seed)
    values = {f"p{i}": rng.normal(0, 0.6, size=(3, 3)) for i in range(3)}
    depth = 1 + seed % 12
    op_seed = 200 + seed

    def loss_of(vals):
        tape = Tape()
        ps = [tape.param(k, v) for k, v in vals.items()]
        return tape, _random_graph(tape, ps, make_rng(op_seed), depth)

    tape, loss = loss_of(values)
    grads = tape.backward(loss)
    for name in values:
        def f(p, name=name):
            vals = dict(values)
            vals[name] = p
            return float(loss_of(vals)[1].value[0, 0])

        num = fd_gradient(f, values[name])
        scale = max(np.abs(num).max(), 1e-5)  # floor: fd noise on exactly-zero grads
        assert np.abs(num - grads[name]).max() / scale <= 1e-4


def test_vjp_shape_check():
    tape = Tape()
    p = tape.param("p", np.ones((2, 3)))
    q = tape.scale(p, 2.0)
    with pytest.raises(ShapeError):
        tape.vjp(q, np.ones((3, 2)))
    assert np.array_equal(tape.vjp(q, np.ones((2, 3)))["p"], np.full((2, 3), 2.0))


def test_fd_gradient_simple_cases():
    p = make_rng(6).normal(size=(2, 3))
    assert np.allclose(fd_gradient(lambda x: float(x.sum()), p), 1.0, atol=1e-9)
    assert abs(fd_gradient(lambda x: 0.5 * float((x * x).sum()), np.array([[2.0]]))[0, 0] - 2.0) <= 1e-8
    with pytest.raises(ContractError):
        fd_gradient(lambda x: 0.0, p, h=0.0)


# ------------------------------------------------------------------ optimizer


def test_adamw_zero_grad_no_decay_is_noop():
    p = make_rng(7).normal(size=(2, 2))
    new, _ = adamw_step(p, np.zeros_like(p), AdamState.zeros_like(p), lr=0.1)
    assert np.array_equal(new, p)


def test_adamw_decoupled_decay():
    p = np.array([[2.0, -4.0]])
    new, _ = adamw_step(p, np.zeros_like(p), AdamState.zeros_like(p), lr=0.1, weight_decay=0.5)
    assert np.array_equal(new, p * (1 - 0.1 * 0.5))


def test_adamw_scalar_oracle_one_step():
    new, st_ = adamw_step(np.array([1.0]), np.array([1.0]), AdamState.zeros_like(np.array([1.0])), lr=0.1)
    expected = oracles.adamw_scalar(1.0, 1.0, 0.0, 0.0, 0, 0.1)[0]
    assert expected == pytest.approx(0.900000001, abs=1e-15)
    assert new[0] == pytest.approx(expected, abs=1e-15)
    assert st_.t == 1


def test_adamw_matches_scalar_oracle_over_steps():
    rng = make_rng(8)
    grads = rng.normal(size=6)
    p, state = np.array([0.3]), AdamState.zeros_like(np.array([0.3]))
    q, m, v, t = 0.3, 0.0, 0.0, 0
    for g in grads:
        p, state = adamw_step(p, np.array([g]), state, lr=0.05, weight_decay=0.01)
        q, m, v, t = oracles.adamw_scalar(q, g, m, v, t, 0.05, wd=0.01)
    assert p[0] == pytest.approx(q, abs=1e-14)


def test_adamw_shape_error():
    with pytest.raises(ShapeError):
        adamw_step(np.zeros(2), np.zeros(3), AdamState.zeros_like(np.zeros(2)), lr=0.1)


def test_adamw_class_lr_scale():
    params = {"a": np.array([1.0]), "b": np.array([1.0])}
    opt = AdamW(lr=0.1, lr_scale={"b": 10.0})
    opt.step(params, {"a": np.array([1.0]), "b": np.array([1.0])})
    assert params["a"][0] == pytest.approx(1 - 0.1, abs=1e-7)
    assert params["b"][0] == pytest.approx(1 - 1.0, abs=1e-6)
