"""Polynomial weights, local seminorms and weighted Sobolev norms.

The weight is psi_kappa(x) = (1 + |x|^2)^kappa. ``|f|_q(x)`` sums the absolute
values of all partial derivatives of order at most q, counting every ordered
multi-index in {1..d}^m (so mixed derivatives appear with multiplicity), and
``||f||_{q,kappa,p}`` is the L^p norm of ``|psi_kappa f|_q``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import comb, prod

import numpy as np
import sympy as sp

from .errors import TruncationError
from .fields import Grid, SampledField, as_counts, count_classes

log = logging.getLogger(__name__)

TAGS = ("NOT3a", "NOT3b", "NOT3c", "NOT3d", "NOT4a", "NOT5a", "n2", "n4")


def eval_weight(x, kappa: float) -> float:
    """psi_kappa at a single point (scalar or coordinate sequence)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float((1.0 + np.dot(x, x)) ** kappa)


def weight(points, kappa: float) -> np.ndarray:
    """psi_kappa on an array of points with coordinates on the last axis."""
    pts = np.asarray(points, dtype=float)
    return (1.0 + np.sum(pts * pts, axis=-1)) ** kappa


def weight_derivative(points, kappa: float, alpha) -> np.ndarray:
    """Exact partial derivative of psi_kappa via Faa di Bruno on u = |x|^2.

    Only blocks of size one (d u / dx_i = 2 x_i) and two (2 delta_ij) survive,
    so the sum runs over partial matchings of the derivative positions.
    """
    pts = np.asarray(points, dtype=float)
    d = pts.shape[-1]
    counts = as_counts(alpha, d)
    positions = [i for i, c in enumerate(counts) for _ in range(c)]
    u = np.sum(pts * pts, axis=-1)
    total = np.zeros(pts.shape[:-1])
    for singles, pairs in _matchings(tuple(positions)):
        k = len(singles) + pairs
        coef = prod(kappa - j for j in range(k))
        if coef == 0:
            continue
        term = coef * (1.0 + u) ** (kappa - k) * 2.0 ** k
        for i in singles:
            term = term * pts[..., i]
        total = total + term
    return total


def _matchings(positions):
    """Yield (singletons, number_of_pairs) over partitions into blocks of size 1 or 2
    whose pairs join equal coordinates (mixed pairs give a zero factor)."""
    if not positions:
        yield (), 0
        return
    first, rest = positions[0], positions[1:]
    for singles, pairs in _matchings(rest):
        yield (first,) + singles, pairs
    for j, other in enumerate(rest):
        if other == first:
            for singles, pairs in _matchings(rest[:j] + rest[j + 1:]):
                yield singles, pairs + 1


def product_derivative(f: SampledField, kappa: float, counts, points=None) -> np.ndarray:
    """Derivative of psi_kappa * f by the Leibniz rule (on the grid or at points)."""
    d = f.d
    pts = f.grid.points() if points is None else np.asarray(points, dtype=float)
    out = 0.0
    for b in np.ndindex(*[c + 1 for c in counts]):
        coef = prod(comb(c, bi) for c, bi in zip(counts, b))
        rest = tuple(c - bi for c, bi in zip(counts, b))
        fpart = f.derivative(rest) if points is None else f.evaluate(rest, pts)
        if kappa == 0:
            if any(b):
                continue
            out = out + fpart
            continue
        out = out + coef * weight_derivative(pts, kappa, b) * fpart
    return np.broadcast_to(out, pts.shape[:-1]) if np.ndim(out) == 0 else out


def local_seminorm(f: SampledField, q: int, x) -> float:
    """``|f|_q(x)``: sum of |d^alpha f(x)| over all multi-indices of order <= q."""
    pt = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    total = 0.0
    for counts, mult in count_classes(f.d, q):
        total += mult * abs(float(f.evaluate(counts, pt)[0]))
    return total


def seminorm_field(f: SampledField, q: int, kappa: float = 0.0, points=None) -> np.ndarray:
    """``|psi_kappa f|_q`` on the grid (or at ``points``)."""
    total = 0.0
    for counts, mult in count_classes(f.d, q):
        total = total + mult * np.abs(product_derivative(f, kappa, counts, points))
    return total


def weighted_seminorm_field(f: SampledField, q: int, kappa: float = 0.0, points=None) -> np.ndarray:
    """``psi_kappa |f|_q`` on the grid (or at ``points``)."""
    pts = f.grid.points() if points is None else np.asarray(points, dtype=float)
    return weight(pts, kappa) * seminorm_field(f, q, 0.0, points)


@dataclass
class NormReport:
    value: float
    tail: float
    relative_tail: float


def _lp(grid: Grid, g: np.ndarray, p: float) -> float:
    if np.isinf(p):
        return float(np.nanmax(g))
    return grid.integrate(g**p) ** (1.0 / p)


def _shell_points(grid: Grid):
    """Coarse nodes covering the box of twice the radius minus the grid box."""
    lo = np.array(grid.lower)
    hi = np.array(grid.upper)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    h = 2.0 * np.array(grid.spacing)
    axes = [np.arange(m - 2 * r, m + 2 * r + 0.5 * hh, hh) for m, r, hh in zip(mid, half, h)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    outside = np.any((pts < lo) | (pts > hi), axis=-1)
    return pts[outside], np.prod(h)


def weighted_norm(f: SampledField, q: int, kappa: float, p: float,
                  tail_tol: float = 1e-3, report: bool = False):
    """``||f||_{q,kappa,p}`` by trapezoid quadrature on the grid, sup for p = inf.

    The part of ``R^d`` outside the box is estimated on a coarse shell out to
    twice the radius (analytic fields) or by the outermost grid band (FD
    fields). A relative tail above ``tail_tol`` raises ``TruncationError``.
    The p = inf value is a grid supremum, hence a lower bound of the true sup.
    """
    g = seminorm_field(f, q, kappa)
    value = _lp(f.grid, g, p)
    if f.is_analytic:
        pts, vol = _shell_points(f.grid)
        gs = seminorm_field(f, q, kappa, points=pts)
        if np.isinf(p):
            tail = float(np.max(gs)) if gs.size else 0.0
            rel = max(0.0, tail - value) / max(value, 1e-300)
        else:
            tail = float(np.sum(gs**p) * vol) ** (1.0 / p)
            rel = tail / max(value, 1e-300)
    else:
        band = np.zeros(g.shape, dtype=bool)
        for axis in range(f.d):
            sl = [slice(None)] * f.d
            w = max(2, g.shape[axis] // 20)
            sl[axis] = np.r_[0:w, g.shape[axis] - w:g.shape[axis]]
            band[tuple(sl)] = True
        gb = np.where(band, g, 0.0)
        if np.isinf(p):
            tail, rel = 0.0, 0.0
        else:
            tail = f.grid.integrate(gb**p) ** (1.0 / p)
            rel = tail / max(value, 1e-300)
    if rel > tail_tol:
        raise TruncationError(
            f"tail estimate {rel:.3g} (relative) exceeds {tail_tol:g}; the integrand is not "
            "negligible outside the grid")
    if report:
        return NormReport(value, tail, rel)
    return value


# ---------------------------------------------------------------------------
# inequality verification


@dataclass
class WeightCheck:
    tag: str
    constant: float
    refined_constant: float
    passed: bool
    lower: float | None = None
    refined_lower: float | None = None
    detail: dict = field(default_factory=dict)


def _stable(a, b, tol=0.05):
    return bool(np.isfinite(a) and np.isfinite(b) and abs(a - b) <= tol * max(abs(b), 1e-300))


def _x_symbols(d):
    return sp.symbols(f"x1:{d + 1}") if d > 1 else (sp.Symbol("x1"),)


def default_corpus(d: int = 1) -> list[tuple[str, sp.Expr, tuple]]:
    """Twenty smooth test fields (name, expression, symbols)."""
    if d != 1:
        xs = _x_symbols(d)
        r2 = sum(s**2 for s in xs)
        base = [
            sp.exp(-r2), sp.exp(-r2 / 2) * (1 + xs[0]), 1 / (1 + r2), 1 / (1 + r2) ** 2,
            sp.exp(-r2 / 4) * sp.cos(xs[0]), sp.exp(-(xs[0] - 1) ** 2 - xs[-1] ** 2),
            sp.sech(xs[0]) * sp.exp(-r2 / 4), sp.exp(-r2 / 3) * (2 + sp.sin(sum(xs))),
            (1 - r2) * sp.exp(-r2 / 2), sp.cos(xs[-1]) / (1 + r2),
        ]
        exprs = base + [e * sp.exp(-r2 / 8) * (1 + sp.Rational(k, 10) * xs[0])
                        for k, e in enumerate(base, start=1)]
        return [(f"f{i:02d}", e, xs) for i, e in enumerate(exprs)]
    x = sp.Symbol("x1")
    exprs = [
        sp.exp(-x**2),
        sp.exp(-(x - 1) ** 2 / 2),
        sp.exp(-x**2 / 4) * sp.cos(2 * x),
        sp.sin(x) * sp.exp(-x**2 / 8),
        1 / (1 + x**2),
        1 / (1 + x**2) ** 2,
        x * sp.exp(-x**2),
        (1 + x + x**2) * sp.exp(-x**2 / 2),
        sp.sech(x),
        sp.exp(-(x + sp.Rational(1, 2)) ** 2) * (2 + sp.sin(3 * x)),
        sp.tanh(x) * sp.exp(-x**2 / 10),
        sp.cos(x) / (1 + x**2),
        (1 + x**3) * sp.exp(-x**2 / 2),
        sp.atan(x) / (1 + x**2),
        sp.sech(x) ** 2,
        sp.exp(-x**2 / 3) * (1 + x**2) ** 2 / (4 + x**2),
        (1 - x**2) * sp.exp(-x**2 / 2),
        sp.exp(-(x - 2) ** 2) + sp.exp(-(x + 2) ** 2),
        (1 + sp.sin(x) ** 2) * sp.exp(-x**2 / 6),
        sp.log(2 + x**2) * sp.exp(-x**2),
    ]
    return [(f"f{i:02d}", e, (x,)) for i, e in enumerate(exprs)]


def _field(params, grid):
    if "field" in params:
        f = params["field"]
        return f.on_grid(grid) if isinstance(f, SampledField) else f
    return SampledField.from_expr(params["expr"], params["symbols"], grid)


def _measure(tag, params, grid):
    """Return (sup, inf) of the defining ratio on ``grid``; inf may be None."""
    pts = grid.points()
    if tag == "NOT3a":
        k, k2 = params["kappa"], params["kappa_prime"]
        if not k >= k2 >= 0:
            raise ValueError("NOT3a needs kappa >= kappa' >= 0")
        r = weight(pts, -k) / weight(pts, -k2)
        return float(r.max()), None
    if tag == "NOT3b":
        k = params["kappa"]
        flat = pts.reshape(-1, grid.d)
        x = flat[:, None, :]
        y = flat[None, :, :]
        r = weight(x, k) / (weight(y, k) * weight(x - y, k))
        return float(r.max()), None
    if tag == "NOT3c":
        f = _field(params, grid)
        q, k = params["q"], params["kappa"]
        num = seminorm_field(f, q, k)
        den = weighted_seminorm_field(f, q, k)
        r = num / den
        return float(np.nanmax(r)), float(np.nanmin(r))
    if tag == "NOT3d":
        k = params["kappa"]
        phi = params["phi"]  # callable on points (..., d) -> (..., d) with jacobian
        jac = params["jacobian"]
        origin = np.zeros((1, grid.d))
        jnorm = np.sqrt(np.sum(jac(pts) ** 2, axis=(-2, -1)))
        bound = weight(phi(origin), k)[0] * (1.0 + jnorm.max() ** 2) ** k * weight(pts, k)
        r = weight(phi(pts), k) / bound
        return float(r.max()), None
    if tag == "NOT4a":
        f = _field(params, grid)
        q, k, p = params["q"], params["kappa"], params.get("p", 2.0)
        num = _lp(grid, seminorm_field(f, q, k), p)
        den = _lp(grid, weighted_seminorm_field(f, q, k), p)
        return num / den, num / den
    if tag == "NOT5a":
        f = _field(params, grid)
        q, k, p = params["q"], params["kappa"], params.get("p", 2.0)
        num = _lp(grid, seminorm_field(f, q, k), p)
        den = _lp(grid, seminorm_field(f, q, k + grid.d), np.inf)
        return num / den, None
    if tag in ("n2", "n4"):
        k = params["k"]
        alpha = params["alpha"]
        if tag == "n2":
            r = np.abs(weight_derivative(pts, -k, alpha)) * weight(pts, k)
        else:
            r = np.abs(weight_derivative(pts, k, alpha)) / weight(pts, k)
        return float(r.max()), None
    raise ValueError(f"unknown weight inequality tag {tag!r}; expected one of {TAGS}")


def verify_weight_inequality(tag: str, params: dict, grid: Grid) -> WeightCheck:
    """Measure the best constant of a weight inequality on ``grid`` and on its 2x refinement.

    Passes when the constant is finite and changes by at most 5% under
    refinement (and, for the monotonicity tag, does not exceed 1).
    """
    if tag not in TAGS:
        raise ValueError(f"unknown weight inequality tag {tag!r}; expected one of {TAGS}")
    c, lo = _measure(tag, params, grid)
    c2, lo2 = _measure(tag, params, grid.refine())
    ok = _stable(c, c2)
    if lo is not None:
        ok = ok and _stable(lo, lo2) and lo2 > 0
    if tag == "NOT3a":
        ok = ok and c2 <= 1.0 + 1e-12
    return WeightCheck(tag, c, c2, ok, lo, lo2)


def weight_suite(corpus=None, grid: Grid | None = None, kappa: float = 1.0, q: int = 1,
                 p: float = 2.0) -> list[WeightCheck]:
    """Run every weight inequality; field-dependent tags run once per corpus member.

    ``detail["member"]`` names the corpus member (or the parameter set).
    """
    corpus = default_corpus() if corpus is None else corpus
    grid = Grid.cube(6.0, 601) if grid is None else grid
    x = sp.Symbol("x1")
    sine = x + sp.sin(x) / 10
    phi = sp.lambdify(x, sine, "numpy")
    dphi = sp.lambdify(x, sp.diff(sine, x), "numpy")
    fixed = [
        ("NOT3a", {"kappa": 2.0 * kappa, "kappa_prime": 0.5 * kappa}, grid, "kappa-pair"),
        ("NOT3b", {"kappa": kappa}, Grid.cube(4.0, 81), "peetre"),
        ("NOT3d", {"kappa": kappa, "phi": lambda pts: phi(pts),
                   "jacobian": lambda pts: dphi(pts)[..., None]}, grid, "x+sin(x)/10"),
        ("n2", {"k": kappa, "alpha": 1}, grid, "alpha=1"),
        ("n2", {"k": kappa, "alpha": 2}, grid, "alpha=2"),
        ("n4", {"k": kappa, "alpha": 1}, grid, "alpha=1"),
        ("n4", {"k": kappa, "alpha": 2}, grid, "alpha=2"),
    ]
    out = []
    for tag, params, g, label in fixed:
        res = verify_weight_inequality(tag, params, g)
        res.detail["member"] = label
        out.append(res)
    for tag in ("NOT3c", "NOT4a"):
        for name, expr, syms in corpus:
            params = {"expr": expr, "symbols": syms, "q": q, "kappa": kappa, "p": p}
            res = verify_weight_inequality(tag, params, grid)
            res.detail["member"] = name
            out.append(res)
    return out
