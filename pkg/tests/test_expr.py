import math
import random

import numpy as np
import pytest

from evolab.expr import (
    Binary, DomainError, Num, ParseError, Unary, UnsupportedFormError, Var,
    desugar_r, diff, evaluate, parse, to_source,
)


def test_parse_polynomial():
    e = parse("2*(1+x1^2)", 1)
    assert evaluate(e, 0.0, (1.0,)) == 4.0
    assert evaluate(e, 0.0, (0.0,)) == 2.0


def test_parse_r_norm():
    e = parse("exp(-t)*r", 3)
    v = evaluate(e, 0.0, (1.0, 2.0, 2.0))
    assert v == pytest.approx(3.0)


def test_parse_rejects_variable_beyond_dim():
    with pytest.raises(ParseError):
        parse("x2+1", 1)


def test_parse_whitespace_insensitive():
    a = parse("1 + 2 * x1", 1)
    b = parse("1+2*x1", 1)
    assert evaluate(a, 0, (3.0,)) == evaluate(b, 0, (3.0,))


def test_power_right_associative():
    e = parse("2^3^2", 1)
    assert evaluate(e, 0, (0.0,)) == 512.0


def test_unary_minus_vs_power():
    # -x^2 parses as -(x^2)
    e = parse("-x1^2", 1)
    assert evaluate(e, 0, (3.0,)) == -9.0


def test_eval_r_squared():
    e = parse("r^2", 2)
    assert evaluate(e, 5.0, (3.0, 4.0)) == pytest.approx(25.0)


def test_eval_division_by_zero():
    e = parse("1/x1", 1)
    with pytest.raises(DomainError):
        evaluate(e, 0.0, (0.0,))


def test_eval_log_domain():
    with pytest.raises(DomainError):
        evaluate(parse("log(x1)", 1), 0.0, (-1.0,))


def test_eval_sqrt_domain():
    with pytest.raises(DomainError):
        evaluate(parse("sqrt(x1)", 1), 0.0, (-1.0,))


def test_eval_vectorized():
    e = parse("x1^2+t", 1)
    xs = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(evaluate(e, 1.0, (xs,)), [1.0, 2.0, 5.0])


def test_diff_power_rule():
    e = parse("x1^2", 1)
    d = diff(e, "x1")
    for x in (-2.0, 0.5, 3.0):
        assert evaluate(d, 0, (x,)) == pytest.approx(2 * x)


def test_diff_product_rule():
    e = parse("sin(x1)*x2", 2)
    d = diff(e, "x2")
    for x1 in (-1.0, 0.7):
        assert evaluate(d, 0, (x1, 9.0)) == pytest.approx(math.sin(x1))


def test_diff_chain_rule_time():
    e = parse("exp(-t)*x1", 1)
    d = diff(e, "t")
    assert evaluate(d, 2.0, (3.0,)) == pytest.approx(-math.exp(-2.0) * 3.0)


def test_diff_requires_desugared_r():
    e = parse("r^2", 2)
    with pytest.raises(UnsupportedFormError):
        diff(e, "x1")
    d = diff(desugar_r(e, 2), "x1")
    assert evaluate(d, 0, (3.0, 4.0)) == pytest.approx(6.0)


def test_diff_nonconstant_exponent_unsupported():
    e = parse("x1^x1", 1)
    with pytest.raises(UnsupportedFormError):
        diff(e, "x1")


def test_desugar_r_matches_r():
    e = parse("exp(-r^2)", 2)
    f = desugar_r(e, 2)
    for p in [(0.3, -1.2), (2.0, 0.0)]:
        assert evaluate(f, 0, p) == pytest.approx(evaluate(e, 0, p))


# ---------------------------------------------------------------------------
# randomized properties

def _random_expr(rng, dim, depth):
    """Random differentiable expression avoiding singular points."""
    if depth == 0:
        kind = rng.randrange(3)
        if kind == 0:
            return Num(round(rng.uniform(-3, 3), 3))
        if kind == 1:
            return Var("t")
        return Var(f"x{rng.randrange(1, dim + 1)}")
    kind = rng.randrange(8)
    a = _random_expr(rng, dim, depth - 1)
    if kind == 0:
        return Binary("+", a, _random_expr(rng, dim, depth - 1))
    if kind == 1:
        return Binary("-", a, _random_expr(rng, dim, depth - 1))
    if kind == 2:
        return Binary("*", a, _random_expr(rng, dim, depth - 1))
    if kind == 3:
        # keep the denominator away from zero
        b = _random_expr(rng, dim, depth - 1)
        return Binary("/", a, Binary("+", Num(2.0), Binary("^", b, Num(2.0))))
    if kind == 4:
        return Binary("^", Binary("+", Num(1.0), Binary("^", a, Num(2.0))),
                      Num(float(rng.randrange(1, 4))))
    if kind == 5:
        return Unary("sin", a)
    if kind == 6:
        return Unary("cos", a)
    return Unary("exp", Unary("sin", a))


def test_diff_matches_finite_differences():
    rng = random.Random(12345)
    dim = 2
    checked = 0
    for _ in range(200):
        e = _random_expr(rng, dim, rng.randrange(1, 4))
        var = f"x{rng.randrange(1, dim + 1)}"
        d = diff(e, var)
        t = rng.uniform(0, 1)
        x = [rng.uniform(-2, 2) for _ in range(dim)]
        h = 1e-5
        i = int(var[1:]) - 1
        xp = list(x)
        xm = list(x)
        xp[i] += h
        xm[i] -= h
        fd = (evaluate(e, t, xp) - evaluate(e, t, xm)) / (2 * h)
        sym = evaluate(d, t, x)
        assert abs(sym - fd) <= 1e-6 * (1 + abs(fd)), to_source(e)
        checked += 1
    assert checked == 200


def test_print_parse_round_trip():
    rng = random.Random(777)
    dim = 2
    for _ in range(50):
        e = _random_expr(rng, dim, rng.randrange(1, 4))
        e2 = parse(to_source(e), dim)
        t = rng.uniform(0, 1)
        x = [rng.uniform(-2, 2) for _ in range(dim)]
        assert evaluate(e2, t, x) == evaluate(e, t, x)


def test_diff_is_linear():
    rng = random.Random(99)
    dim = 1
    for _ in range(30):
        a = _random_expr(rng, dim, 2)
        b = _random_expr(rng, dim, 2)
        s = Binary("+", a, b)
        ds = diff(s, "x1")
        da = diff(a, "x1")
        db = diff(b, "x1")
        t = rng.uniform(0, 1)
        x = [rng.uniform(-2, 2)]
        assert evaluate(ds, t, x) == evaluate(da, t, x) + evaluate(db, t, x)
