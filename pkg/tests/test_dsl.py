import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from witten_lab.dsl import (
    ExprDomainError,
    ExprError,
    ScalarField,
    eval_jet,
    eval_many,
    finite_difference_jet,
    parse,
    to_source,
)


def test_cubic_jet_by_hand():
    e = parse("x1^3/3 - x1", 1)
    j = eval_jet(e, [2.0])
    assert j.value == pytest.approx(2 / 3)
    np.testing.assert_allclose(j.gradient, [3.0])
    np.testing.assert_allclose(j.hessian, [[4.0]])


def test_paraboloid_jet():
    j = eval_jet(parse("x1^2 + x2^2", 2), [1.0, 1.0])
    assert j.value == 2.0
    np.testing.assert_allclose(j.gradient, [2, 2])
    np.testing.assert_allclose(j.hessian, [[2, 0], [0, 2]])


def test_unknown_identifier_reports_span():
    with pytest.raises(ExprError) as info:
        parse("x1^2 + x3", 2)
    assert "x3" in str(info.value)
    assert info.value.span == (7, 9)


@pytest.mark.parametrize("src", ["x1 +", "(x1", "x1 ^ 1.5", "exp x1", "exp(x1, x1)", "x1 $ 2", "", "foo(x1)"])
def test_syntax_errors(src):
    with pytest.raises(ExprError):
        parse(src, 1)


def test_precedence():
    # power binds tighter than unary minus
    assert eval_jet(parse("-x1^2", 1), [3.0]).value == -9.0
    assert eval_jet(parse("2^-1", 1), [0.0]).value == 0.5
    assert eval_jet(parse("x1 - 1 - 1", 1), [0.0]).value == -2.0
    assert eval_jet(parse("8 / 2 / 2", 1), [0.0]).value == 2.0
    assert eval_jet(parse("x1^2^3", 1), [2.0]).value == 64.0
    assert eval_jet(parse("2 * -x1", 1), [3.0]).value == -6.0


def test_domain_errors_carry_subexpression():
    e = parse("1/(x1 - 1) + 2", 1)
    with pytest.raises(ExprDomainError) as info:
        eval_jet(e, [1.0])
    assert "x1 - 1" in str(info.value)
    with pytest.raises(ExprDomainError):
        eval_jet(parse("sqrt(x1)", 1), [-1.0])


def test_spans_ignored_in_equality():
    assert parse("x1+x2", 2) == parse("x1   +   x2", 2)
    assert parse("x1+x2", 2) != parse("x2+x1", 2)


CASES = [
    ("x1^3/3 - x1", 1),
    ("x1^3/3 - x1 + x2^2", 2),
    ("exp(-(x1^2 + x2^2)/2) * sin(x1) + cos(x2)^3", 2),
    ("tanh(3*(x1 - 0.5)) * x2 + sqrt(1 + x1^2)", 2),
    ("(x1^2 + x2^2)^-1 + x3 * x1", 3),
]


@pytest.mark.parametrize("src,n", CASES)
def test_ad_matches_finite_differences(src, n):
    e = parse(src, n)
    rng = np.random.default_rng(0)
    for p in rng.uniform(0.3, 1.5, size=(10, n)):
        j = eval_jet(e, p)
        g, H = finite_difference_jet(lambda x: eval_jet(e, x).value, p, 1e-4)
        scale_g = max(1.0, np.max(np.abs(j.gradient)))
        scale_h = max(1.0, np.max(np.abs(j.hessian)))
        assert np.max(np.abs(g - j.gradient)) / scale_g < 1e-6
        assert np.max(np.abs(H - j.hessian)) / scale_h < 1e-6
        assert np.array_equal(j.hessian, j.hessian.T)


def test_batch_matches_pointwise():
    e = parse("x1^3/3 - x1 + x2^2", 2)
    pts = np.random.default_rng(1).normal(size=(7, 2))
    v, g, H = eval_many(e, pts)
    for i, p in enumerate(pts):
        j = eval_jet(e, p)
        assert v[i] == j.value
        np.testing.assert_array_equal(g[i], j.gradient)


def test_scalar_field_wrapper():
    f = ScalarField("x1^2/2", 1)
    assert f([3.0]) == 4.5
    np.testing.assert_allclose(f.grad(np.array([[1.0], [2.0]]))[:, 0], [1, 2])


_leaf = st.one_of(
    st.sampled_from(["x1", "x2"]),
    st.integers(0, 9).map(str),
    st.sampled_from(["0.5", "1.25", "3e-2"]),
)


def _combine(children):
    return st.one_of(
        st.tuples(children, st.sampled_from("+-*/"), children).map(lambda t: f"({t[0]}){t[1]}({t[2]})"),
        st.tuples(children, st.integers(-3, 3)).map(lambda t: f"({t[0]})^{t[1]}"),
        children.map(lambda c: f"-({c})"),
        st.tuples(st.sampled_from(["exp", "sin", "cos", "sqrt", "tanh"]), children).map(lambda t: f"{t[0]}({t[1]})"),
    )


@settings(max_examples=200, deadline=None)
@given(st.recursive(_leaf, _combine, max_leaves=12))
def test_roundtrip_stable(src):
    e = parse(src, 2)
    printed = to_source(e.root)
    again = parse(printed, 2)
    assert again == e
    assert to_source(again.root) == printed
