import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from needlecheck.tensor import (
    MultilinearForm,
    TensorProcess,
    TensorShapeError,
    apply_form,
    compose_at,
    compose_slot,
    compose_two_at,
    contract_at,
    contract_two_at,
    ito_convergence,
    multilinear_ito_residual,
    pair_codomain,
    pair_sum,
    pair_sum_mixed,
    random_ito_instance,
    slot_sum,
)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def form_and_vectors(draw, max_arity=4, max_dim=3):
    d = draw(st.integers(1, max_arity))
    n = draw(st.integers(1, max_dim))
    coef = draw(arrays(float, (n,) * d, elements=finite))
    vecs = [draw(arrays(float, (n,), elements=finite)) for _ in range(d)]
    return MultilinearForm(coef), vecs


def brute(coef, vecs):
    out = coef
    for v in reversed(vecs):
        out = out @ v
    return float(out)


@given(form_and_vectors(), finite, finite, st.data())
def test_multilinear_in_each_slot(fv, a, b, data):
    form, vecs = fv
    k = data.draw(st.integers(0, form.arity - 1))
    w = data.draw(arrays(float, (form.dim,), elements=finite))
    mixed = list(vecs)
    mixed[k] = a * vecs[k] + b * w
    other = list(vecs)
    other[k] = w
    lhs = form(*mixed)
    rhs = a * form(*vecs) + b * form(*other)
    assert np.isclose(lhs, rhs, atol=1e-9 * (1 + abs(lhs)))


@given(form_and_vectors())
def test_evaluation_matches_coordinates(fv):
    form, vecs = fv
    assert np.isclose(form(*vecs), brute(form.coefficients, vecs), atol=1e-9)


@given(form_and_vectors(), st.data())
def test_identity_composition_is_neutral(fv, data):
    form, _ = fv
    i = data.draw(st.integers(1, form.arity))
    out = compose_at(form, np.eye(form.dim), i)
    np.testing.assert_allclose(out.coefficients, form.coefficients, atol=1e-12)


@given(form_and_vectors(max_arity=3), st.data())
def test_composition_evaluates_through_the_map(fv, data):
    form, vecs = fv
    n = form.dim
    i = data.draw(st.integers(1, form.arity))
    G = data.draw(arrays(float, (n, n), elements=finite))
    composed = compose_at(form, G, i)
    mapped = list(vecs)
    mapped[i - 1] = G @ vecs[i - 1]
    assert np.isclose(composed(*vecs), form(*mapped), atol=1e-8 * (1 + abs(form(*mapped))))


def test_compose_with_bilinear_map_raises_arity():
    rng = np.random.default_rng(1)
    form = MultilinearForm(rng.standard_normal((2, 2)))
    gamma = rng.standard_normal((2, 2, 2))
    out = compose_at(form, gamma, 1)
    assert out.arity == 3
    y, z, w = rng.standard_normal((3, 2))
    assert np.isclose(out(y, z, w), form(np.einsum("aij,i,j->a", gamma, y, z), w))


def test_compose_two_slots_order():
    rng = np.random.default_rng(2)
    form = MultilinearForm(rng.standard_normal((2, 2, 2)))
    G, T = rng.standard_normal((2, 2, 2))
    x, y, z = rng.standard_normal((3, 2))
    out = compose_two_at(form, G, T, 1, 3)
    assert np.isclose(out(x, y, z), form(G @ x, y, T @ z))
    out = compose_two_at(form, G, T, 3, 1)
    assert np.isclose(out(x, y, z), form(T @ x, y, G @ z))


@given(form_and_vectors(max_arity=3), st.data())
def test_contraction_fixes_a_slot(fv, data):
    form, vecs = fv
    if form.arity < 2:
        return
    i = data.draw(st.integers(1, form.arity))
    rest = vecs[: i - 1] + vecs[i:]
    c = contract_at(form, vecs[i - 1], i)
    assert np.isclose(c(*rest), form(*vecs), atol=1e-9 * (1 + abs(form(*vecs))))


def test_two_slot_contraction_and_scalar_result():
    rng = np.random.default_rng(3)
    form = MultilinearForm(rng.standard_normal((3, 3)))
    y, z = rng.standard_normal((2, 3))
    assert np.isclose(contract_two_at(form, y, z, 1, 2), form(y, z))
    assert np.isclose(contract_two_at(form, y, z, 2, 1), form(z, y))
    assert isinstance(contract_at(MultilinearForm(np.ones(3)), y, 1), float)


def test_slot_and_pair_sums_on_batched_arrays():
    rng = np.random.default_rng(4)
    M, n = 5, 2
    P = rng.standard_normal((1, n, n, n))
    x, w, v = rng.standard_normal((3, M, n))
    expect = (apply_form(P, [w, x, x]) + apply_form(P, [x, w, x]) + apply_form(P, [x, x, w]))
    np.testing.assert_allclose(slot_sum(P, x, w, 3), expect)
    expect = (apply_form(P, [w, v, x]) + apply_form(P, [w, x, v]) + apply_form(P, [x, w, v]))
    np.testing.assert_allclose(pair_sum_mixed(P, x, w, v, 3), expect)
    np.testing.assert_allclose(pair_sum(P, x, w, 3), pair_sum_mixed(P, x, w, w, 3))


def test_pair_codomain():
    rng = np.random.default_rng(5)
    p = rng.standard_normal(3)
    T = rng.standard_normal((3, 3, 3))
    np.testing.assert_allclose(pair_codomain(p, T), np.einsum("a,aij->ij", p, T))


def test_batched_composition_matches_loop():
    rng = np.random.default_rng(6)
    P = rng.standard_normal((4, 2, 2))
    G = rng.standard_normal((4, 2, 2))
    out = compose_slot(P, G, 2, 2)
    for m in range(4):
        np.testing.assert_allclose(out[m], P[m] @ G[m])


def test_shape_errors():
    with pytest.raises(TensorShapeError):
        MultilinearForm(np.zeros((2, 3)))
    with pytest.raises(TensorShapeError):
        MultilinearForm(np.zeros((2,) * 5))
    f = MultilinearForm(np.zeros((2, 2)))
    with pytest.raises(TensorShapeError):
        f(np.zeros(2))
    with pytest.raises(TensorShapeError):
        f(np.zeros(3), np.zeros(3))
    with pytest.raises(TensorShapeError):
        compose_at(f, np.zeros(2), 1)
    with pytest.raises(TensorShapeError):
        contract_at(f, np.zeros(2), 3)
    with pytest.raises(TensorShapeError):
        TensorProcess(np.zeros(3), np.zeros((2, 2)), 1)


@given(form_and_vectors())
def test_serialisation_round_trip(fv):
    form, _ = fv
    np.testing.assert_array_equal(MultilinearForm.from_dict(form.to_dict()).coefficients,
                                  form.coefficients)
    np.testing.assert_array_equal(MultilinearForm.from_csv(form.to_csv()).coefficients,
                                  form.coefficients)


def test_tensor_process():
    vals = np.zeros((3, 5, 2, 2))
    tp = TensorProcess(np.linspace(0, 1, 3), vals, 2)
    assert tp.per_path and tp.dim == 2 and tp.at(1).shape == (5, 2, 2)
    assert not TensorProcess(np.linspace(0, 1, 3), np.zeros((3, 2, 2)), 2).per_path


def test_ito_residual_exact_for_constant_forms():
    """With A = B = 0, f, g constant and d = 1 the Euler scheme is exact."""
    from needlecheck.tensor import ItoInstance

    P0 = np.array([1.0, -2.0])
    inst = ItoInstance(1, 2, P0, lambda t: np.zeros(2), lambda t: np.zeros(2),
                       lambda t, x: np.ones_like(x), lambda t, x: 0.5 * np.ones_like(x),
                       np.zeros(2))
    dW = np.random.default_rng(0).standard_normal((50, 16)) * 0.25
    np.testing.assert_allclose(multilinear_ito_residual(inst, dW), 0.0, atol=1e-12)


def test_ito_residual_converges():
    inst = random_ito_instance(2, 2, np.random.default_rng(0))
    res = ito_convergence(inst, levels=(5, 6, 7, 8), paths=1000, seed=1)
    assert res["mean_abs_residual"][-1] < res["mean_abs_residual"][0]
    assert res["slope"] > 0.3
