"""Model language, datasets and fit specifications.

A model is a single expression for the mean response, e.g.::

    beta0 + beta1*sex + b1 + exp(beta2*sex)*f(age + beta3*GA + b3)

``betaK`` are fixed effects, ``bK`` subject random effects, ``f(...)`` the
penalized-spline population curve (exactly once) whose argument is the
axis transformation, and any other identifier a data column.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ad
from .splines import BasisSpec


# ---------------------------------------------------------------------------
# Expression tree
# ---------------------------------------------------------------------------


class Expr:
    """Base class for model expression nodes."""

    def children(self) -> tuple["Expr", ...]:
        return ()


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class FixedParam(Expr):
    index: int


@dataclass(frozen=True)
class RandEffect(Expr):
    index: int


@dataclass(frozen=True)
class Covariate(Expr):
    name: str


@dataclass(frozen=True)
class _Unary(Expr):
    child: Expr

    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class _Binary(Expr):
    left: Expr
    right: Expr

    def children(self):
        return (self.left, self.right)


class Neg(_Unary):
    pass


class Exp(_Unary):
    pass


class Log(_Unary):
    pass


class Sin(_Unary):
    pass


class Cos(_Unary):
    pass


class InvLogit(_Unary):
    pass


class SplineEval(_Unary):
    """``f(child)``: the child is the axis transformation feeding the spline."""


class Add(_Binary):
    pass


class Sub(_Binary):
    pass


class Mul(_Binary):
    pass


class Div(_Binary):
    pass


FUNCTIONS = {"exp": Exp, "log": Log, "sin": Sin, "cos": Cos, "ilogit": InvLogit, "f": SplineEval}
_FUNC_NAMES = {v: k for k, v in FUNCTIONS.items()}
_BINARY_SYMBOL = {Add: "+", Sub: "-", Mul: "*", Div: "/"}
_PRECEDENCE = {Add: 1, Sub: 1, Mul: 2, Div: 2}


def walk(expr: Expr):
    yield expr
    for c in expr.children():
        yield from walk(c)


def spline_node(expr: Expr) -> SplineEval:
    nodes = [e for e in walk(expr) if isinstance(e, SplineEval)]
    if len(nodes) != 1:
        raise MultipleSplineNodes(f"model must contain exactly one f(...), found {len(nodes)}")
    return nodes[0]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class ModelSyntaxError(SyntaxError):
    def __init__(self, message: str, offset: int = 0, expected: str = ""):
        super().__init__(f"{message} at offset {offset}" + (f" (expected {expected})" if expected else ""))
        self.offset = offset
        self.expected = expected


class MultipleSplineNodes(ModelSyntaxError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(message, offset)


class UnknownFunction(ModelSyntaxError):
    pass


_TOKEN = re.compile(r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<id>[A-Za-z_][A-Za-z_0-9.]*)|(?P<op>[-+*/()]))")


def _tokenize(text: str):
    pos = 0
    out = []
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            raise ModelSyntaxError(f"unexpected character {text[pos:].lstrip()[0]!r}",
                                   pos + len(text[pos:]) - len(text[pos:].lstrip()))
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, value):
        kind, v, off = self.tok
        if v != value:
            raise ModelSyntaxError(f"unexpected {v or 'end of input'!r}", off, repr(value))
        self.advance()

    def expr(self) -> Expr:
        node = self.term()
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            op = self.advance()[1]
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            op = self.advance()[1]
            rhs = self.factor()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def factor(self) -> Expr:
        kind, v, off = self.tok
        if kind == "num":
            self.advance()
            return Const(float(v))
        if kind == "op" and v == "-":
            self.advance()
            return Neg(self.factor())
        if kind == "op" and v == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "id":
            self.advance()
            if self.tok[1] == "(" and self.tok[0] == "op":
                if v not in FUNCTIONS:
                    raise UnknownFunction(f"unknown function {v!r}", off,
                                          "one of " + ", ".join(sorted(FUNCTIONS)))
                self.advance()
                arg = self.expr()
                self.expect(")")
                return FUNCTIONS[v](arg)
            if v == "pi":
                return Const(math.pi)
            m = re.fullmatch(r"beta(\d+)", v)
            if m:
                return FixedParam(int(m.group(1)))
            m = re.fullmatch(r"b(\d+)", v)
            if m:
                return RandEffect(int(m.group(1)))
            return Covariate(v)
        raise ModelSyntaxError(f"unexpected {v or 'end of input'!r}", off,
                               "number, name, '(' or '-'")


def parse_model(text: str) -> Expr:
    """Parse a model string; exactly one ``f(...)`` node is required."""
    p = _Parser(text)
    node = p.expr()
    kind, v, off = p.tok
    if kind != "end":
        raise ModelSyntaxError(f"unexpected {v!r}", off, "operator or end of input")
    spline_node(node)
    return node


def to_text(expr: Expr) -> str:
    """Pretty-print with the minimal parentheses needed to re-parse the same tree."""
    return _fmt(expr, 0)


def _fmt(e: Expr, parent_prec: int, right: bool = False) -> str:
    if isinstance(e, Const):
        if e.value == math.pi:
            return "pi"
        s = repr(float(e.value))
        return s if e.value >= 0 else f"({s})"
    if isinstance(e, FixedParam):
        return f"beta{e.index}"
    if isinstance(e, RandEffect):
        return f"b{e.index}"
    if isinstance(e, Covariate):
        return e.name
    if isinstance(e, Neg):
        return "-" + _fmt(e.child, 3)
    if isinstance(e, _Unary):
        return f"{_FUNC_NAMES[type(e)]}({_fmt(e.child, 0)})"
    prec = _PRECEDENCE[type(e)]
    s = f"{_fmt(e.left, prec)} {_BINARY_SYMBOL[type(e)]} {_fmt(e.right, prec, right=True)}"
    if prec < parent_prec or (right and prec == parent_prec):
        return f"({s})"
    return s


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class UnboundName(KeyError):
    pass


@dataclass
class Bindings:
    """Values for the names an expression refers to.

    ``beta`` and ``b`` map model indices to values; ``covariates`` maps
    column names to arrays; ``spline`` evaluates ``f`` at its argument.
    Values may be floats, arrays or taped :class:`~snmm.ad.AdArray` values.
    """

    beta: dict = field(default_factory=dict)
    b: dict = field(default_factory=dict)
    covariates: dict = field(default_factory=dict)
    spline: Optional[Callable] = None


_UNARY_FN = {Neg: lambda x: -x, Exp: ad.exp, Log: ad.log, Sin: ad.sin, Cos: ad.cos,
             InvLogit: ad.ilogit}


def eval_expr(expr: Expr, env: Bindings):
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, FixedParam):
        try:
            return env.beta[expr.index]
        except KeyError:
            raise UnboundName(f"beta{expr.index}") from None
    if isinstance(expr, RandEffect):
        try:
            return env.b[expr.index]
        except KeyError:
            raise UnboundName(f"b{expr.index}") from None
    if isinstance(expr, Covariate):
        try:
            return env.covariates[expr.name]
        except KeyError:
            raise UnboundName(expr.name) from None
    if isinstance(expr, SplineEval):
        if env.spline is None:
            raise UnboundName("f")
        return env.spline(eval_expr(expr.child, env))
    if isinstance(expr, _Unary):
        return _UNARY_FN[type(expr)](eval_expr(expr.child, env))
    a = eval_expr(expr.left, env)
    b = eval_expr(expr.right, env)
    if isinstance(expr, Add):
        return ad.add(a, b)
    if isinstance(expr, Sub):
        return ad.sub(a, b)
    if isinstance(expr, Mul):
        return ad.mul(a, b)
    return ad.div(a, b)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class MissingColumn(KeyError):
    pass


class CsvParseError(ValueError):
    pass


@dataclass
class Dataset:
    """Longitudinal data sorted by subject (order kept within subject)."""

    subject: np.ndarray  # (N,) contiguous indices 0..m-1
    y: np.ndarray
    covariates: dict
    time: str = "t"
    subject_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.subject = np.asarray(self.subject, dtype=int)
        self.y = np.asarray(self.y, dtype=float)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        if self.time not in self.covariates:
            raise MissingColumn(self.time)
        N = self.y.shape[0]
        if self.subject.shape != (N,) or any(v.shape != (N,) for v in self.covariates.values()):
            raise ValueError("dataset columns have inconsistent lengths")
        if not np.all(np.isfinite(self.y)) or not np.all(np.isfinite(self.t)):
            raise ValueError("missing or non-finite y or time values")
        if N and np.any(np.diff(self.subject) < 0):
            raise ValueError("rows must be grouped by subject in increasing index order")
        if N and not np.array_equal(np.unique(self.subject), np.arange(self.m)):
            raise ValueError("subject indices must be contiguous from 0")
        if not self.subject_ids:
            self.subject_ids = [str(i) for i in range(self.m)]

    @classmethod
    def from_records(cls, subject_ids, y, covariates, time="t"):
        """Build from raw columns, re-indexing subjects by first appearance."""
        subject_ids = list(subject_ids)
        order_ids: dict = {}
        for s in subject_ids:
            order_ids.setdefault(s, len(order_ids))
        idx = np.array([order_ids[s] for s in subject_ids], dtype=int)
        perm = np.argsort(idx, kind="stable")
        return cls(subject=idx[perm], y=np.asarray(y, float)[perm],
                   covariates={k: np.asarray(v, float)[perm] for k, v in covariates.items()},
                   time=time, subject_ids=[str(s) for s in order_ids])

    @property
    def t(self) -> np.ndarray:
        return self.covariates[self.time]

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    @property
    def m(self) -> int:
        return int(self.subject.max()) + 1 if self.subject.size else 0

    @property
    def n_i(self) -> np.ndarray:
        return np.bincount(self.subject, minlength=self.m)

    def subject_rows(self, i: int) -> np.ndarray:
        return np.nonzero(self.subject == i)[0]

    def with_y(self, y) -> "Dataset":
        return Dataset(subject=self.subject, y=y, covariates=self.covariates,
                       time=self.time, subject_ids=list(self.subject_ids))


@dataclass(frozen=True)
class ColumnMap:
    """Which CSV columns hold the subject id, response, time and covariates."""

    subject: str = "subject"
    y: str = "y"
    time: str = "t"
    covariates: tuple = ()


def load_csv(path, columns: ColumnMap = ColumnMap()) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [columns.subject, columns.y, columns.time, *columns.covariates]
        for c in needed:
            if c not in header:
                raise MissingColumn(f"column {c!r} not found in {path}")
        ids, ys = [], []
        cov = {c: [] for c in [columns.time, *columns.covariates]}
        for row_no, row in enumerate(reader, start=2):
            ids.append(row[columns.subject])
            try:
                ys.append(float(row[columns.y]))
                for c in cov:
                    cov[c].append(float(row[c]))
            except (TypeError, ValueError):
                raise CsvParseError(f"{path}: row {row_no}: non-numeric value") from None
    return Dataset.from_records(ids, ys, cov, time=columns.time)


def write_csv(data: Dataset, path, columns: ColumnMap | None = None) -> None:
    columns = columns or ColumnMap(time=data.time,
                                   covariates=tuple(k for k in data.covariates if k != data.time))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([columns.subject, columns.y, columns.time, *columns.covariates])
        for j in range(data.N):
            w.writerow([data.subject_ids[data.subject[j]], repr(float(data.y[j])),
                        repr(float(data.covariates[columns.time][j])),
                        *(repr(float(data.covariates[c][j])) for c in columns.covariates)])


# ---------------------------------------------------------------------------
# Fit specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedInterval:
    lower: float
    upper: float


@dataclass(frozen=True)
class Scaled:
    """Standardize the spline argument to [0, 1] with bounds +-c sd of one random effect."""

    shift: int  # model index of the random effect shifting the argument, e.g. 3 for b3
    c: float = 3.0


@dataclass(frozen=True)
class MonotonicityConfig:
    lambda_c: float = 0.0
    eps: float = 1e-6
    M: int = 200

    def __post_init__(self):
        if self.lambda_c < 0 or self.eps <= 0 or self.M < 2:
            raise ValueError("monotonicity config needs lambda_c >= 0, eps > 0, M >= 2")


@dataclass(frozen=True)
class FitSpec:
    model: Expr
    knots: object = FixedInterval(0.0, 1.0)
    n_interior: int = 10
    degree: int = 3
    penalty_order: int = 2
    sum_to_zero: bool = False
    monotonicity: Optional[MonotonicityConfig] = None
    spline_mode: str = "fused"  # or "recursion": Cox-de Boor on taped values
    extrapolate: bool = False  # continue the boundary polynomial pieces outside the knot span

    def __post_init__(self):
        if isinstance(self.model, str):
            object.__setattr__(self, "model", parse_model(self.model))
        spline_node(self.model)
        if isinstance(self.knots, Scaled) and self.knots.shift not in self.b_labels:
            raise ValueError(f"shift effect b{self.knots.shift} does not appear in the model")
        if self.spline_mode not in ("fused", "recursion"):
            raise ValueError("spline_mode must be 'fused' or 'recursion'")

    @property
    def beta_labels(self) -> list[int]:
        return sorted({e.index for e in walk(self.model) if isinstance(e, FixedParam)})

    @property
    def b_labels(self) -> list[int]:
        return sorted({e.index for e in walk(self.model) if isinstance(e, RandEffect)})

    @property
    def covariate_names(self) -> list[str]:
        return sorted({e.name for e in walk(self.model) if isinstance(e, Covariate)})

    @property
    def p(self) -> int:
        return len(self.beta_labels)

    @property
    def q(self) -> int:
        return len(self.b_labels)

    @property
    def basis(self) -> BasisSpec:
        if isinstance(self.knots, Scaled):
            lo, hi = 0.0, 1.0
        else:
            lo, hi = self.knots.lower, self.knots.upper
        return BasisSpec(n_interior=self.n_interior, lower=lo, upper=hi, degree=self.degree)
