import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snmm import ad
from snmm.model import (Add, Bindings, ColumnMap, Const, Covariate, CsvParseError, Dataset, Div,
                        Exp, FitSpec, FixedParam, InvLogit, MissingColumn, ModelSyntaxError, Mul,
                        MultipleSplineNodes, Neg, RandEffect, Scaled, Sin, SplineEval, Sub,
                        UnboundName, UnknownFunction, eval_expr, load_csv, parse_model, to_text,
                        walk, write_csv)

SINE = "1 + b1 + exp(b2)*f(t - ilogit(b3))"
SMOCC = "beta0 + beta1*sex + b1 + exp(beta2*sex)*f(age + beta3*GA + b3)"


def test_parse_sine_model():
    tree = parse_model(SINE)
    nodes = list(walk(tree))
    assert sum(isinstance(n, SplineEval) for n in nodes) == 1
    assert sorted(n.index for n in nodes if isinstance(n, RandEffect)) == [1, 2, 3]
    assert tree == Add(Add(Const(1.0), RandEffect(1)),
                       Mul(Exp(RandEffect(2)), SplineEval(Sub(Covariate("t"), InvLogit(RandEffect(3))))))


def test_parse_growth_model():
    spec = FitSpec(SMOCC)
    assert spec.beta_labels == [0, 1, 2, 3]
    assert spec.b_labels == [1, 3]
    assert spec.covariate_names == ["GA", "age", "sex"]
    assert (spec.p, spec.q) == (4, 2)


def test_two_spline_nodes_rejected():
    with pytest.raises(MultipleSplineNodes):
        parse_model("f(t) + f(t)")
    with pytest.raises(MultipleSplineNodes):
        parse_model("1 + t")


def test_syntax_errors_carry_offset_and_expectation():
    with pytest.raises(ModelSyntaxError) as info:
        parse_model("1 + f(t")
    assert info.value.offset == 7 and info.value.expected == "')'"
    with pytest.raises(ModelSyntaxError) as info:
        parse_model("1 + * f(t)")
    assert info.value.offset == 4
    with pytest.raises(ModelSyntaxError) as info:
        parse_model("f(t) $")
    assert info.value.offset == 5
    with pytest.raises(UnknownFunction) as info:
        parse_model("tanh(b1) + f(t)")
    assert info.value.offset == 0


def test_precedence_and_unary_minus():
    assert parse_model("f(t) - 2 - 3") == Sub(Sub(SplineEval(Covariate("t")), Const(2.0)), Const(3.0))
    assert parse_model("f(t) / 2 * 3") == Mul(Div(SplineEval(Covariate("t")), Const(2.0)), Const(3.0))
    assert parse_model("-b1 * f(t)") == Mul(Neg(RandEffect(1)), SplineEval(Covariate("t")))
    assert parse_model("f(pi*t)") == SplineEval(Mul(Const(math.pi), Covariate("t")))


def test_eval_examples():
    assert eval_expr(Const(5.0), Bindings()) == 5.0
    assert eval_expr(InvLogit(RandEffect(3)), Bindings(b={3: 0.0})) == 0.5
    tree = parse_model(SINE)
    env = Bindings(b={1: 0.0, 2: 0.0, 3: 0.0}, covariates={"t": 0.25},
                   spline=lambda u: math.sin(2 * math.pi * u))
    assert eval_expr(tree, env) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(UnboundName):
        eval_expr(tree, Bindings(b={1: 0.0}))


def test_eval_gradients_on_hand_built_trees():
    x = np.array([0.7, -1.3, 2.1])
    linear = Add(Mul(Const(3.0), FixedParam(0)), Mul(FixedParam(1), Covariate("z")))
    product = Mul(FixedParam(0), Mul(FixedParam(1), FixedParam(2)))

    def run(tree):
        return ad.grad(lambda v: eval_expr(tree, Bindings(beta={0: v[0], 1: v[1], 2: v[2]},
                                                          covariates={"z": 4.0})) + 0.0 * v[0], x)

    assert np.allclose(run(linear), [3.0, 4.0, 0.0])
    assert np.allclose(run(product), [x[1] * x[2], x[0] * x[2], x[0] * x[1]])


def test_scaled_shift_must_be_a_model_effect():
    with pytest.raises(ValueError):
        FitSpec("1 + b1 + f(t - b2)", knots=Scaled(shift=3))


# ---------------------------------------------------------------------------
# Round trip
# ---------------------------------------------------------------------------

atoms = st.one_of(
    st.floats(0, 1e6, allow_nan=False).map(Const),
    st.just(Const(math.pi)),
    st.integers(0, 9).map(FixedParam),
    st.integers(1, 9).map(RandEffect),
    st.sampled_from(["t", "age", "sex", "GA", "x_1"]).map(Covariate))

exprs = st.recursive(
    atoms,
    lambda kids: st.one_of(
        st.builds(Neg, kids), st.builds(Exp, kids), st.builds(Sin, kids),
        st.builds(InvLogit, kids),
        st.builds(Add, kids, kids), st.builds(Sub, kids, kids),
        st.builds(Mul, kids, kids), st.builds(Div, kids, kids)),
    max_leaves=10)

models = st.tuples(exprs, exprs, st.sampled_from([Add, Sub, Mul, Div])).map(
    lambda t: t[2](t[0], SplineEval(t[1])))


@given(models)
def test_print_parse_round_trip(tree):
    text = to_text(tree)
    again = parse_model(text)
    assert again == tree
    assert to_text(again) == text


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def test_load_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("subject,y,t\nA,1.0,0\nB,2.0,0\nA,3.0,1\n", encoding="utf-8")
    d = load_csv(p)
    assert (d.m, d.N) == (2, 3)
    assert d.subject_ids == ["A", "B"]
    # rows of a subject keep their file order
    assert np.array_equal(d.y[d.subject_rows(0)], [1.0, 3.0])


def test_missing_column_and_parse_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("subject,t\nA,0\n", encoding="utf-8")
    with pytest.raises(MissingColumn):
        load_csv(p)
    p.write_text("subject,y,t\nA,1.0,0\nA,oops,1\n", encoding="utf-8")
    with pytest.raises(CsvParseError, match="row 3"):
        load_csv(p)


def test_growth_schema_round_trip(tmp_path):
    from snmm.simulate import Scenario, generate

    data, _ = generate(Scenario.smocc(m=200, seed=4, total_rows=1942))
    cols = ColumnMap(subject="id", y="hgt", time="age", covariates=("sex", "GA"))
    path = tmp_path / "growth.csv"
    write_csv(data, path, cols)
    back = load_csv(path, cols)
    assert (back.N, back.m) == (1942, 200)
    assert np.array_equal(back.y, data.y)
    assert np.array_equal(back.covariates["GA"], data.covariates["GA"])


@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.floats(-10, 10)), min_size=1, max_size=40))
def test_loader_preserves_order_within_subject(rows):
    ids = [r[0] for r in rows]
    ys = [r[1] for r in rows]
    d = Dataset.from_records(ids, ys, {"t": np.arange(len(rows), dtype=float)})
    for i, sid in enumerate(d.subject_ids):
        expected = [y for s, y in rows if s == sid]
        assert list(d.y[d.subject_rows(i)]) == expected
        assert np.all(np.diff(d.t[d.subject_rows(i)]) > 0)
    assert np.array_equal(np.unique(d.subject), np.arange(d.m))
