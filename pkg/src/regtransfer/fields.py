"""Multi-indices, rectangular grids and sampled fields with derivatives."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np
import sympy as sp


@dataclass(frozen=True)
class MultiIndex:
    """Ordered tuple of coordinate indices, each in ``1..d``.

    ``MultiIndex(())`` is the empty index and stands for the identity.
    """

    entries: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))
        if any(e < 1 for e in self.entries):
            raise ValueError("multi-index entries are 1-based coordinate indices")

    @property
    def order(self) -> int:
        return len(self.entries)

    def counts(self, d: int) -> tuple[int, ...]:
        if any(e > d for e in self.entries):
            raise ValueError(f"multi-index {self.entries} has an entry above d={d}")
        c = [0] * d
        for e in self.entries:
            c[e - 1] += 1
        return tuple(c)

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(self.entries + other.entries)


def as_counts(alpha, d: int) -> tuple[int, ...]:
    """Normalise a derivative specification to a count vector of length d.

    Accepts a MultiIndex (coordinate entries), a count tuple of length d
    (how often each coordinate is differentiated) or, for d = 1, an int.
    """
    if isinstance(alpha, MultiIndex):
        return alpha.counts(d)
    if isinstance(alpha, (int, np.integer)):
        if d != 1:
            raise ValueError("integer derivative order only makes sense for d=1")
        return (int(alpha),)
    counts = tuple(int(c) for c in alpha)
    if len(counts) == 0:
        return (0,) * d
    if len(counts) != d or any(c < 0 for c in counts):
        raise ValueError(f"count vector {counts} must have {d} nonnegative entries")
    return counts


def enumerate_multi_indices(d: int, q: int) -> list[MultiIndex]:
    """All multi-indices of order 0..q in lexicographic order (with repetitions)."""
    out = [MultiIndex(())]
    for m in range(1, q + 1):
        out.extend(MultiIndex(t) for t in itertools.product(range(1, d + 1), repeat=m))
    return out


def count_classes(d: int, q: int, min_order: int = 0):
    """Distinct derivative count vectors of order min_order..q with their multiplicity.

    The multiplicity is the number of ordered multi-indices sharing the count
    vector, so summing over classes reproduces the sum over all multi-indices.
    """
    out = []
    for m in range(min_order, q + 1):
        for c in _compositions(m, d):
            mult = factorial(m)
            for ci in c:
                mult //= factorial(ci)
            out.append((c, mult))
    return out


@lru_cache(maxsize=None)
def _compositions_cached(m: int, d: int):
    if d == 1:
        return ((m,),)
    out = []
    for first in range(m, -1, -1):
        for rest in _compositions_cached(m - first, d - 1):
            out.append((first,) + rest)
    return tuple(out)


def _compositions(m, d):
    return _compositions_cached(m, d)


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid: ``shape[i]`` nodes on ``[lower[i], upper[i]]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        n = tuple(int(v) for v in np.atleast_1d(self.shape))
        if not (len(lo) == len(hi) == len(n)):
            raise ValueError("lower, upper and shape must have equal length")
        if any(k < 2 for k in n) or any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", n)

    @classmethod
    def cube(cls, radius: float, n: int, d: int = 1) -> "Grid":
        return cls((-radius,) * d, (radius,) * d, (n,) * d)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / (n - 1) for a, b, n in zip(self.lower, self.upper, self.shape))

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lower, self.upper, self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (d,)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def refine(self, factor: int = 2) -> "Grid":
        """Nested refinement: spacing divided by ``factor``."""
        return Grid(self.lower, self.upper, tuple(factor * (n - 1) + 1 for n in self.shape))

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoid rule over the box; NaN entries (FD boundary band) are excluded."""
        v = np.asarray(values, dtype=float)
        if np.isnan(v).any():
            v = np.where(np.isnan(v), 0.0, v)
        for axis, h in enumerate(self.spacing):
            v = np.trapezoid(v, dx=h, axis=0)
        return float(v)


@lru_cache(maxsize=None)
def central_stencil(k: int, accuracy: int) -> tuple[np.ndarray, np.ndarray]:
    """Offsets and weights of the central difference for the k-th derivative."""
    if accuracy not in (2, 4):
        raise ValueError("finite-difference accuracy must be 2 or 4")
    p = (k + 1) // 2 - 1 + accuracy // 2
    offsets = np.arange(-p, p + 1)
    rows = [[sp.Integer(o) ** m / sp.factorial(m) for o in offsets] for m in range(2 * p + 1)]
    rhs = [1 if m == k else 0 for m in range(2 * p + 1)]
    w = sp.Matrix(rows).LUsolve(sp.Matrix(rhs))
    return offsets, np.array([float(v) for v in w])


class SampledField:
    """Real field on a grid with derivatives from analytic closures or finite differences.

    Build with :meth:`from_expr` (sympy expression, exact derivatives),
    :meth:`from_callables` (closures keyed by count vectors) or
    :meth:`from_values` (grid values; central differences of order 2 or 4).
    """

    MAX_FD_ORDER = 4

    def __init__(self, grid: Grid, values=None, closures=None, expr=None,
                 symbols=None, fd_accuracy: int = 2):
        self.grid = grid
        self._closures = dict(closures or {})
        self._expr = expr
        self._symbols = tuple(symbols) if symbols is not None else None
        self.fd_accuracy = fd_accuracy
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        if values is not None:
            values = np.asarray(values, dtype=float)
            if values.shape != grid.shape:
                raise ValueError(f"values shape {values.shape} does not match grid {grid.shape}")
            if not np.all(np.isfinite(values)):
                raise ValueError("field values must be finite")
            self._cache[(0,) * grid.d] = values

    # construction -----------------------------------------------------

    @classmethod
    def from_expr(cls, expr, symbols, grid: Grid) -> "SampledField":
        symbols = tuple(symbols) if isinstance(symbols, (list, tuple)) else (symbols,)
        if len(symbols) != grid.d:
            raise ValueError("need one symbol per grid axis")
        return cls(grid, expr=sp.sympify(expr), symbols=symbols)

    @classmethod
    def from_callables(cls, grid: Grid, closures: dict) -> "SampledField":
        """``closures[counts](points) -> values``; ``points`` has shape ``(..., d)``."""
        if (0,) * grid.d not in closures:
            raise ValueError("closure for the function itself is required")
        return cls(grid, closures=closures)

    @classmethod
    def from_values(cls, values, grid: Grid, fd_accuracy: int = 2) -> "SampledField":
        return cls(grid, values=values, fd_accuracy=fd_accuracy)

    def on_grid(self, grid: Grid) -> "SampledField":
        """Same analytic field sampled on another grid."""
        if not self.is_analytic:
            raise ValueError("finite-difference fields cannot be resampled")
        return SampledField(grid, closures=self._closures, expr=self._expr, symbols=self._symbols)

    # queries ------------------------------------------------------------

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def is_analytic(self) -> bool:
        return self._expr is not None or bool(self._closures)

    @property
    def values(self) -> np.ndarray:
        return self.derivative(())

    @property
    def expr(self):
        return self._expr

    @property
    def symbols(self):
        return self._symbols

    def closure(self, alpha):
        """Callable evaluating the derivative at arbitrary points (analytic fields)."""
        counts = as_counts(alpha, self.d)
        if counts in self._closures:
            return self._closures[counts]
        if self._expr is None:
            if self._closures:
                raise KeyError(f"no closure supplied for derivative counts {counts}")
            raise ValueError("finite-difference field has no closures")
        dexpr = self._expr
        for s, c in zip(self._symbols, counts):
            if c:
                dexpr = sp.diff(dexpr, s, c)
        raw = sp.lambdify(self._symbols, dexpr, "numpy", cse=True)

        def fn(points, _raw=raw):
            pts = np.asarray(points, dtype=float)
            out = _raw(*[pts[..., i] for i in range(pts.shape[-1])])
            return np.broadcast_to(np.asarray(out, dtype=float), pts.shape[:-1]).copy()

        self._closures[counts] = fn
        return fn

    def evaluate(self, alpha, points) -> np.ndarray:
        """Derivative ``alpha`` at ``points`` (shape ``(..., d)``)."""
        pts = np.asarray(points, dtype=float)
        if self.is_analytic:
            return self.closure(alpha)(pts)
        return self._fd_at_points(as_counts(alpha, self.d), pts)

    def derivative(self, alpha) -> np.ndarray:
        """Derivative ``alpha`` on the grid; FD mode marks the boundary band with NaN."""
        counts = as_counts(alpha, self.d)
        if counts in self._cache:
            return self._cache[counts]
        if self.is_analytic:
            out = self.closure(counts)(self.grid.points())
        else:
            out = self._fd(counts)
        self._cache[counts] = out
        return out

    # finite differences ------------------------------------------------------------

    def _fd(self, counts):
        if sum(counts) > self.MAX_FD_ORDER:
            raise ValueError(f"finite-difference derivatives are capped at order {self.MAX_FD_ORDER}")
        out = self._cache[(0,) * self.d]
        for axis, k in enumerate(counts):
            if k:
                out = _apply_stencil(out, axis, k, self.fd_accuracy, self.grid.spacing[axis])
        return out

    def _fd_at_points(self, counts, pts):
        h = np.array(self.grid.spacing)
        lo = np.array(self.grid.lower)
        idx_f = (pts - lo) / h
        idx = np.rint(idx_f).astype(int)
        if np.any(np.abs(idx_f - idx) > 1e-8):
            raise ValueError("finite-difference fields can only be queried at grid nodes")
        field = self.derivative(counts)
        n = np.array(self.grid.shape)
        if np.any(idx < 0) or np.any(idx >= n):
            raise ValueError("point outside the grid")
        vals = field[tuple(idx[..., i] for i in range(self.d))]
        if np.any(np.isnan(vals)):
            raise ValueError("point outside the grid interior for the finite-difference stencil")
        return vals


def _apply_stencil(arr, axis, k, accuracy, h):
    offsets, w = central_stencil(k, accuracy)
    p = offsets[-1]
    n = arr.shape[axis]
    out = np.full(arr.shape, np.nan)
    core = [slice(None)] * arr.ndim
    core[axis] = slice(p, n - p)
    acc = np.zeros_like(np.take(arr, np.arange(p, n - p), axis=axis))
    for o, wi in zip(offsets, w):
        acc = acc + wi * np.take(arr, np.arange(p + o, n - p + o), axis=axis)
    out[tuple(core)] = acc / h**k
    return out
