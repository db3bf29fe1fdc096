"""Integration by parts through a change of variables phi.

With sigma(phi) = grad(phi) grad(phi)^T and gamma = sigma^{-1},

    H_i(phi, g) = -sum_k d_k( g sum_j gamma^{ij} d_k phi^j ),

and iterating, int (d^alpha f)(phi) g = int f(phi) H_alpha(phi, g). Everything
is symbolic (sympy) when phi and g are; values-only g falls back to finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import sympy as sp

from .errors import SingularMatrixError
from .fields import Grid, MultiIndex, SampledField, count_classes
from .weights import weight

MAX_IBP_ORDER = 3
DET_FLOOR = 1e-14


def _symbols(d):
    return tuple(sp.Symbol(f"x{i + 1}") for i in range(d))


def _diff(expr, symbols, counts):
    out = expr
    for s, c in zip(symbols, counts):
        if c:
            out = sp.diff(out, s, c)
    return out


def _lambdify(expr, symbols):
    raw = sp.lambdify(symbols, expr, "numpy", cse=True)

    def fn(points):
        pts = np.asarray(points, dtype=float)
        out = raw(*[pts[..., i] for i in range(pts.shape[-1])])
        return np.broadcast_to(np.asarray(out, dtype=float), pts.shape[:-1]).copy()

    return fn


class DiffeoField:
    """Smooth map phi: R^d -> R^d given by sympy expressions, with probe-grid certificates."""

    def __init__(self, exprs, symbols=None, probe: Grid | None = None):
        if not isinstance(exprs, (list, tuple)):
            exprs = [exprs]
        self.d = len(exprs)
        self.symbols = tuple(symbols) if symbols is not None else _symbols(self.d)
        if len(self.symbols) != self.d:
            raise ValueError("phi must map R^d to R^d")
        self.exprs = [sp.sympify(e) for e in exprs]
        self.probe = probe or (Grid.cube(4 * math.pi, 4001) if self.d == 1 else Grid.cube(2 * math.pi, 101, self.d))
        self._fns = {}

    # symbolic pieces ----------------------------------------------------

    @cached_property
    def jacobian(self) -> sp.Matrix:
        """(i, j) entry d_j phi^i."""
        return sp.Matrix(self.exprs).jacobian(self.symbols)

    @cached_property
    def sigma_expr(self) -> sp.Matrix:
        J = self.jacobian
        return J * J.T

    @cached_property
    def det_expr(self):
        return sp.simplify(self.sigma_expr.det())

    @cached_property
    def gamma_expr(self) -> sp.Matrix:
        if self.d == 1:
            return sp.Matrix([[1 / self.sigma_expr[0, 0]]])
        return self.sigma_expr.adjugate() / self.det_expr

    @cached_property
    def ibp_coefficients(self) -> sp.Matrix:
        """c[i, k] = sum_j gamma^{ij} d_k phi^j."""
        return sp.simplify(self.gamma_expr * self.jacobian)

    def fn(self, key, expr):
        if key not in self._fns:
            self._fns[key] = _lambdify(expr, self.symbols)
        return self._fns[key]

    # numerics -----------------------------------------------------------

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.stack([self.fn(("phi", i), e)(pts) for i, e in enumerate(self.exprs)], axis=-1)

    def det_sigma(self, points) -> np.ndarray:
        return self.fn("det", self.det_expr)(points)

    def component_derivative(self, i: int, counts, points) -> np.ndarray:
        return self.fn(("d", i, tuple(counts)), _diff(self.exprs[i], self.symbols, counts))(points)

    def seminorm_1q(self, q: int, points) -> np.ndarray:
        """|phi(x)|_{1,q}: sum over components and ordered indices of orders 1..q."""
        pts = np.asarray(points, dtype=float)
        total = np.zeros(pts.shape[:-1])
        for i in range(self.d):
            for counts, mult in count_classes(self.d, q, min_order=1):
                total += mult * np.abs(self.component_derivative(i, counts, pts))
        return total

    def norm_1q(self, q: int) -> float:
        """||phi||_{1,q,inf}: sum over 1 <= |alpha| <= q of the probe-grid sup of |d^alpha phi|."""
        pts = self.probe.points()
        total = 0.0
        for i in range(self.d):
            for counts, mult in count_classes(self.d, q, min_order=1):
                total += mult * float(np.max(np.abs(self.component_derivative(i, counts, pts))))
        return total

    @cached_property
    def epsilon(self) -> float:
        """inf over the probe grid of det sigma(phi)."""
        return float(np.min(self.det_sigma(self.probe.points())))

    @property
    def hat(self) -> float:
        """|phi(0)|."""
        return float(np.linalg.norm(self(np.zeros((1, self.d)))[0]))

    def require_invertible(self, points):
        det = self.det_sigma(points)
        if np.any(det <= DET_FLOOR):
            raise SingularMatrixError(f"sigma(phi) is singular on the grid (min det {np.min(det):.3g})")


def identity_map(d: int = 1, probe: Grid | None = None) -> DiffeoField:
    s = _symbols(d)
    return DiffeoField(list(s), s, probe)


def sigma_gamma(phi: DiffeoField, x):
    """sigma = grad phi grad phi^T and gamma = sigma^{-1} at a point."""
    pt = np.asarray(x, dtype=float).reshape(1, phi.d)
    J = np.array([[float(phi.component_derivative(i, _unit(j, phi.d), pt)[0]) for j in range(phi.d)]
                  for i in range(phi.d)])
    sigma = J @ J.T
    if np.linalg.det(sigma) <= DET_FLOOR:
        raise SingularMatrixError(f"sigma(phi) is singular at {pt[0]}")
    return sigma, np.linalg.solve(sigma, np.eye(phi.d))


def _unit(j, d):
    c = [0] * d
    c[j] = 1
    return tuple(c)


def _alpha_entries(alpha, d) -> tuple[int, ...]:
    if isinstance(alpha, MultiIndex):
        return alpha.entries
    if isinstance(alpha, (int, np.integer)):
        if d != 1:
            raise ValueError("integer alpha only in one dimension")
        return (1,) * int(alpha)
    return tuple(int(a) for a in alpha)


@lru_cache(maxsize=256)
def _h_symbolic(phi_key, phi: DiffeoField, g_expr, entries):
    g = g_expr
    c = phi.ibp_coefficients
    for i in entries:
        g = -sum(sp.diff(g * c[i - 1, k], phi.symbols[k]) for k in range(phi.d))
    return g


def h_operator(phi: DiffeoField, g: SampledField, alpha) -> SampledField:
    """H_alpha(phi, g), alpha = (alpha_1, ..., alpha_m) with 1-based coordinate entries."""
    entries = _alpha_entries(alpha, phi.d)
    if len(entries) > MAX_IBP_ORDER:
        raise ValueError(f"|alpha| is capped at {MAX_IBP_ORDER}")
    if any(not 1 <= i <= phi.d for i in entries):
        raise ValueError("alpha entries must lie in 1..d")
    if g.d != phi.d:
        raise ValueError("g and phi live in different dimensions")
    pts = g.grid.points()
    phi.require_invertible(pts)
    if g.expr is not None:
        g_expr = g.expr.subs(dict(zip(g.symbols, phi.symbols)))
        h = _h_symbolic(id(phi), phi, g_expr, entries)
        return SampledField.from_expr(h, phi.symbols, g.grid)
    return _h_fd(phi, g, entries)


def _h_fd(phi, g, entries):
    pts = g.grid.points()
    coeff = [[phi.fn(("c", i, k), phi.ibp_coefficients[i, k])(pts) for k in range(phi.d)]
             for i in range(phi.d)]
    vals = g.values
    for i in entries:
        out = 0.0
        for k in range(phi.d):
            prod = SampledField.from_values(np.nan_to_num(vals * coeff[i - 1][k]), g.grid, fd_accuracy=4)
            out = out - prod.derivative(_unit(k, phi.d))
        # keep the stencil band invalid across iterations
        vals = np.where(np.isnan(vals), np.nan, out)
    vals = np.where(np.isnan(vals), 0.0, vals)
    return SampledField.from_values(vals, g.grid, fd_accuracy=4)


@dataclass
class IBPResult:
    lhs: float
    rhs: float
    residual: float


def verify_ibp(phi: DiffeoField, f: SampledField, g: SampledField, alpha, domain: Grid | None = None,
               support_tol: float = 1e-12) -> IBPResult:
    """|int (d^alpha f)(phi) g - int f(phi) H_alpha(phi, g)| by trapezoid on ``domain``."""
    domain = domain or g.grid
    g = g.on_grid(domain) if g.grid != domain else g
    pts = domain.points()
    gv = np.abs(g.values)
    edge = _boundary_max(gv)
    if edge > support_tol * max(float(np.max(gv)), 1e-300):
        raise ValueError("g does not vanish at the boundary of the domain; boundary terms would not cancel")
    entries = _alpha_entries(alpha, phi.d)
    counts = MultiIndex(entries).counts(phi.d) if entries else (0,) * phi.d
    y = phi(pts)
    lhs = domain.integrate(f.evaluate(counts, y) * g.values)
    H = h_operator(phi, g, entries)
    rhs = domain.integrate(f.evaluate((0,) * phi.d, y) * H.values)
    return IBPResult(lhs, rhs, abs(lhs - rhs))


def _boundary_max(v):
    out = 0.0
    for axis in range(v.ndim):
        out = max(out, float(np.max(np.abs(np.take(v, [0, -1], axis=axis)))))
    return out


def complexity_constant(phi: DiffeoField, q: int, points=None, field: bool = False):
    """C_q(phi)(x) = (1 v |phi(x)|_{1,q+2}^{2d-1}) / (1 ^ det sigma(phi)(x)^{q+1}); sup over the probe grid."""
    pts = phi.probe.points() if points is None else np.asarray(points, dtype=float)
    phi.require_invertible(pts)
    num = np.maximum(1.0, phi.seminorm_1q(q + 2, pts) ** (2 * phi.d - 1))
    den = np.minimum(1.0, phi.det_sigma(pts) ** (q + 1))
    c = num / den
    return c if field else float(np.max(c))


# ---------------------------------------------------------------------------
# pullback norm probes


def ibp_corpus(d: int = 1):
    """Smooth rapidly decaying test functions (sympy) for the pullback probes."""
    s = _symbols(d)
    r2 = sum(v**2 for v in s)
    return [
        ("gauss", sp.exp(-r2), s),
        ("shifted-gauss", sp.exp(-(s[0] - 1) ** 2 - sum(v**2 for v in s[1:])), s),
        ("gauss-cos", sp.exp(-r2 / 2) * sp.cos(2 * s[0]), s),
        ("sech", 1 / sp.cosh(s[0]) * sp.exp(-sum(v**2 for v in s[1:])), s),
        ("poly-gauss", (1 + s[0] + s[0] ** 2) * sp.exp(-r2), s),
    ]


def _local_seminorm_expr(expr, symbols, q, pts, min_order=0):
    total = np.zeros(pts.shape[:-1])
    for counts, mult in count_classes(len(symbols), q, min_order):
        total += mult * np.abs(_lambdify(_diff(expr, symbols, counts), symbols)(pts))
    return total


@dataclass
class PullbackReport:
    mode: str
    ratio: float
    budget_factor: float
    per_function: dict
    finite: bool


def _psi_expr(symbols, kappa):
    return (1 + sum(v**2 for v in symbols)) ** kappa


def pullback_norm_probe(phi: DiffeoField, corpus=None, q: int = 1, kappa: float = 0.0, p: float = 2.0,
                        mode: str = "ip10", grid: Grid | None = None, alpha_order: int = 1) -> PullbackReport:
    """Worst-case measured ratio of each inequality's left side to its structural factor.

    ip6: sup_x |H_alpha(phi, g)|_q / (|g|_{q+|alpha|} C_{q+|alpha|}(phi)^{|alpha|}) over |alpha| = alpha_order.
    ip10: ||psi_k^{-1} V_phi (psi_k f)||_{q,inf} / ||f||_{q,inf}, budget psi_k(phi(0)) ||phi||_{1,q,inf}^{q+2k}.
    ip12: ||psi_k V_phi^* (f / psi_k)||_{q,p} / ||f||_{q+1,p}, budget
          psi_k(phi(0)) (1 v ||phi||_{1,q+2,inf}^{2dq+1+2k}) / eps(phi)^{q(q+1)+1/p*} (d = 1).
    """
    if mode not in ("ip6", "ip10", "ip12"):
        raise ValueError(f"unknown mode {mode!r}")
    corpus = corpus or ibp_corpus(phi.d)
    grid = grid or (Grid.cube(10.0, 4001) if phi.d == 1 else Grid.cube(5.0, 61, phi.d))
    pts = grid.points()
    s = phi.symbols
    psi_phi0 = weight(phi(np.zeros((1, phi.d))), kappa)[0]
    per = {}
    if mode == "ip6":
        phi.require_invertible(pts)
        budget = 1.0
        for name, e, sym in corpus:
            g = e.subs(dict(zip(sym, s)))
            den = _local_seminorm_expr(g, s, q + alpha_order, pts)
            den = den * complexity_constant(phi, q + alpha_order, pts, field=True) ** alpha_order
            worst = 0.0
            for entries in _all_entries(phi.d, alpha_order):
                H = _h_symbolic(id(phi), phi, g, entries)
                num = _local_seminorm_expr(H, s, q, pts)
                mask = den > 1e-300
                worst = max(worst, float(np.max(num[mask] / den[mask])))
            per[name] = worst
    elif mode == "ip10":
        budget = float(psi_phi0 * phi.norm_1q(q) ** (q + 2 * kappa))
        psi = _psi_expr(s, kappa)
        for name, e, sym in corpus:
            f = e.subs(dict(zip(sym, s)))
            comp = (psi * f).subs({v: phi.exprs[i] for i, v in enumerate(s)}, simultaneous=True) / psi
            lhs = float(np.max(_local_seminorm_expr(comp, s, q, pts)))
            per[name] = lhs / float(np.max(_local_seminorm_expr(f, s, q, pts))) / budget
    else:
        if phi.d != 1:
            raise ValueError("the ip12 probe is implemented for d = 1")
        p_star = 1.0 if math.isinf(p) else p / (p - 1)
        eps = phi.epsilon
        budget = float(psi_phi0 * max(1.0, phi.norm_1q(q + 2) ** (2 * q + 1 + 2 * kappa))
                       / eps ** (q * (q + 1) + 1 / p_star))
        for name, e, sym in corpus:
            f = e.subs(dict(zip(sym, s)))
            lhs = _pushforward_norm(phi, f, q, kappa, p, grid)
            rhs = _lp_norm(_local_seminorm_expr(f, s, q + 1, pts), grid, p)
            per[name] = lhs / rhs / budget
    ratio = max(per.values())
    return PullbackReport(mode, ratio, budget, per, bool(np.isfinite(ratio)))


def _all_entries(d, m):
    from itertools import product
    return [tuple(t) for t in product(range(1, d + 1), repeat=m)]


def _lp_norm(vals, grid, p):
    if math.isinf(p):
        return float(np.max(vals))
    return grid.integrate(vals**p) ** (1 / p)


def _pushforward_norm(phi, f, q, kappa, p, grid):
    """||psi_k V^*(f/psi_k)||_{q,p} in 1D via the parametrisation y = phi(x).

    V^* u(y) = u(x) / |phi'(x)| at y = phi(x), d/dy = (1/phi'(x)) d/dx and
    dy = |phi'(x)| dx, so phi is never inverted.
    """
    (x,) = phi.symbols
    dphi = sp.diff(phi.exprs[0], x)
    psi_y = (1 + phi.exprs[0] ** 2) ** kappa
    # phi' never vanishes (det sigma > 0), so its sign is that at the origin
    sign = 1 if float(dphi.subs(x, 0)) > 0 else -1
    w = psi_y * f / (1 + x**2) ** kappa / (sign * dphi)
    pts = grid.points()
    total = np.zeros(pts.shape[:-1])
    cur = w
    for j in range(q + 1):
        total += np.abs(_lambdify(cur, phi.symbols)(pts))
        cur = sp.diff(cur, x) / dphi
    jac = np.abs(_lambdify(dphi, phi.symbols)(pts))
    if math.isinf(p):
        return float(np.max(total))
    return grid.integrate(total**p * jac) ** (1 / p)
