"""Parametric function expressions over point tuples.

Expressions are immutable trees closed under +, -, *, / and functional
composition.  Leaves own their parameters; an interior node aggregates the
leaf parameters by reference, in stable (left to right) order.  Parameter
values are the only mutable state, read at evaluation time, so a value set
on a leaf is visible to the next evaluation of any expression containing
that leaf.

Evaluation is vectorized: ``eval`` receives a tuple with one float64 array
(or scalar) per argument and applies numpy ufuncs, so a user closure must
be written with numpy-compatible operations.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .kinematics import Parameter
from .parallel import EVAL_BATCH, run_batches
from .store import ColumnStore

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class EvaluationError(ValueError):
    """An expression could not be evaluated at a concrete point."""


class ParamSet:
    """Ordered parameter collection, addressable by name and by index."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: list[Parameter] = []
        self._index: dict[str, int] = {}
        for p in params:
            self.add(p)

    def add(self, param: Parameter) -> None:
        if param.name in self._index:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        self._index[param.name] = len(self._params)
        self._params.append(param)

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, key: str | int) -> Parameter:
        if isinstance(key, str):
            return self._params[self._index[key]]
        return self._params[key]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self._params)

    def values(self) -> tuple[float, ...]:
        return tuple(p.value for p in self._params)

    def set_values(self, values: Sequence[float]) -> None:
        if len(values) != len(self._params):
            raise ValueError("value count does not match parameter count")
        for p, v in zip(self._params, values):
            p.set(v)

    def free(self) -> list[Parameter]:
        return [p for p in self._params if not p.fixed]


class FunctorExpr:
    """Base expression node.  Subclasses define ``arity`` and ``eval``."""

    arity: int = 1

    def eval(self, args: tuple):
        raise NotImplementedError

    def __call__(self, *point):
        if len(point) != self.arity:
            raise EvaluationError(
                f"expression consumes {self.arity} arguments, got {len(point)}"
            )
        out = self.eval(tuple(point))
        if np.isscalar(point[0]) and not np.isscalar(out):
            return float(np.asarray(out).reshape(()))
        return out

    def leaf_params(self) -> list[Parameter]:
        """Leaf parameter lists concatenated left to right, deduplicated
        by object identity (a shared Parameter appears once)."""
        out: list[Parameter] = []
        seen: set[int] = set()
        for p in self._collect_params():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def param_set(self) -> ParamSet:
        return ParamSet(self.leaf_params())

    def _collect_params(self) -> Iterable[Parameter]:
        return ()

    # operator algebra
    def __add__(self, other):
        return combine("+", self, other)

    def __sub__(self, other):
        return combine("-", self, other)

    def __mul__(self, other):
        return combine("*", self, other)

    def __truediv__(self, other):
        return combine("/", self, other)


class GaussianShape(FunctorExpr):
    """Normalized density exp(-(x-mu)^2 / (2 sigma^2)) / (sigma sqrt(2 pi))."""

    arity = 1

    def __init__(self, mean: Parameter, sigma: Parameter):
        self.mean = mean
        self.sigma = sigma

    def eval(self, args):
        s = self.sigma.value
        if not s > 0:
            raise EvaluationError(f"sigma must be positive, got {s}")
        x = args[0]
        z = (x - self.mean.value) / s
        return np.exp(-0.5 * z * z) / (s * _SQRT_2PI)

    def _collect_params(self):
        return (self.mean, self.sigma)


class ExponentialShape(FunctorExpr):
    """Unnormalized shape exp(-x / tau); normalization is applied downstream."""

    arity = 1

    def __init__(self, tau: Parameter):
        self.tau = tau

    def eval(self, args):
        t = self.tau.value
        if t == 0:
            raise EvaluationError("tau must be non-zero")
        return np.exp(-np.asarray(args[0], dtype=float) / t)

    def _collect_params(self):
        return (self.tau,)


class Closure(FunctorExpr):
    """User function of (point, params) lifted into the algebra."""

    def __init__(self, fn: Callable, params: ParamSet, arity: int = 1):
        self.fn = fn
        self.params = params
        self.arity = arity

    def eval(self, args):
        return self.fn(args, self.params)

    def _collect_params(self):
        return tuple(self.params)


class _BinaryOp(FunctorExpr):
    _ops = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}

    def __init__(self, op: str, left: FunctorExpr, right: FunctorExpr):
        if op not in self._ops:
            raise ValueError(f"unknown operator {op!r}")
        if left.arity != right.arity:
            raise ValueError(
                f"operand arities differ: {left.arity} vs {right.arity}"
            )
        self.op = op
        self.left = left
        self.right = right
        self.arity = left.arity

    def eval(self, args):
        a = self.left.eval(args)
        b = self.right.eval(args)
        if self.op == "/":
            zero = np.asarray(b) == 0
            if np.any(zero):
                j = int(np.argmax(np.asarray(zero).ravel()))
                point = tuple(
                    np.asarray(c).ravel()[j] if not np.isscalar(c) else c for c in args
                )
                raise EvaluationError(f"division by zero at point {point}")
        return self._ops[self.op](a, b)

    def _collect_params(self):
        yield from self.left._collect_params()
        yield from self.right._collect_params()


class Composition(FunctorExpr):
    """outer(inner_1(x), ..., inner_k(x)); inners share the input arity."""

    def __init__(self, outer: FunctorExpr, inners: Sequence[FunctorExpr]):
        if outer.arity != len(inners):
            raise ValueError(
                f"outer consumes {outer.arity} arguments, got {len(inners)} inners"
            )
        arities = {f.arity for f in inners}
        if len(arities) != 1:
            raise ValueError(f"inner arities differ: {sorted(arities)}")
        self.outer = outer
        self.inners = tuple(inners)
        self.arity = arities.pop()

    def eval(self, args):
        return self.outer.eval(tuple(f.eval(args) for f in self.inners))

    def _collect_params(self):
        yield from self.outer._collect_params()
        for f in self.inners:
            yield from f._collect_params()


class Coordinate(FunctorExpr):
    """Projection of an n-dimensional point onto one component."""

    def __init__(self, index: int, arity: int = 1):
        if not 0 <= index < arity:
            raise ValueError(f"index {index} out of range for arity {arity}")
        self.index = index
        self.arity = arity

    def eval(self, args):
        return np.asarray(args[self.index], dtype=float) + 0.0


def shape_gaussian(mean: Parameter, sigma: Parameter) -> FunctorExpr:
    if not sigma.value > 0:
        raise ValueError(f"sigma must be positive, got {sigma.value}")
    return GaussianShape(mean, sigma)


def shape_exponential(tau: Parameter) -> FunctorExpr:
    if tau.value == 0:
        raise ValueError("tau must be non-zero")
    return ExponentialShape(tau)


def wrap_closure(fn: Callable, params: ParamSet | Iterable[Parameter] = (), arity: int = 1) -> FunctorExpr:
    """Lift ``fn(point, params)`` into the expression algebra."""
    if not isinstance(params, ParamSet):
        params = ParamSet(params)
    return Closure(fn, params, arity)


def combine(op: str, a: FunctorExpr, b: FunctorExpr) -> FunctorExpr:
    """Pointwise arithmetic on two expressions of identical arity."""
    return _BinaryOp(op, a, b)


def compose(outer: FunctorExpr, inners: Sequence[FunctorExpr]) -> FunctorExpr:
    return Composition(outer, inners)


def coordinate(index: int, arity: int) -> FunctorExpr:
    return Coordinate(index, arity)


def identity() -> FunctorExpr:
    return Coordinate(0, 1)


def map_evaluate(
    expr: FunctorExpr,
    store: ColumnStore,
    arg_columns: Sequence[str],
    workers: int | None = 1,
) -> np.ndarray:
    """Evaluate ``expr`` on every row projection; returns a float64 column
    aligned index-for-index with the store.

    Rows are processed in fixed-size batches regardless of the worker
    count, so the result is bitwise identical for any number of workers.
    Parameter values must not be mutated while this runs.
    """
    if len(arg_columns) != expr.arity:
        raise ValueError(
            f"expression consumes {expr.arity} arguments, got {len(arg_columns)} columns"
        )
    cols = []
    for name in arg_columns:
        col = store.column(name)
        if col.dtype != np.float64:
            raise ValueError(f"column {name!r} is not real64")
        cols.append(col)
    out = np.empty(len(store))

    def batch(a: int, b: int) -> None:
        out[a:b] = expr.eval(tuple(c[a:b] for c in cols))

    run_batches(batch, len(store), workers, batch=EVAL_BATCH)
    out.flags.writeable = False
    return out
