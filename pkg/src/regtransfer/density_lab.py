"""Transition densities p_t(x, y): exact oracles, kernel density estimates and checks on them.

All densities here are one-dimensional. Oracles carry analytic derivatives in
both variables; KDE densities only support y-derivatives up to order 2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from math import comb, gamma, pi

import numpy as np
import sympy as sp
from scipy.interpolate import CubicSpline
from scipy.special import eval_hermitenorm

from .fields import Grid, MultiIndex, SampledField, as_counts
from .weights import weight, weight_derivative


def _order(alpha) -> int:
    if alpha is None:
        return 0
    return sum(as_counts(alpha, 1))


def _gauss_derivative(u, var, k):
    """k-th derivative of the centred normal density with variance ``var``."""
    s = np.sqrt(var)
    z = u / s
    g = np.exp(-0.5 * z * z) / np.sqrt(2 * pi * var)
    return (-1) ** k * s ** (-k) * eval_hermitenorm(k, z) * g


class KernelDensity:
    """Transition density at time ``t`` from base point ``x``."""

    t: float
    x: float = 0.0
    convolution = False

    def dxdy(self, a: int, b: int, x, y) -> np.ndarray:
        raise NotImplementedError

    def pdf(self, y, x=None) -> np.ndarray:
        return self.dxdy(0, 0, self.x if x is None else x, y)

    def at_time(self, t: float) -> "KernelDensity":
        return replace(self, t=float(t))

    def scale(self) -> float:
        """Natural spatial scale at time t (used to place evaluation grids)."""
        return 1.0

    def center(self, x):
        """Location of the kernel mass for start point x."""
        return np.asarray(x, dtype=float)

    def mass(self, grid: Grid | None = None) -> float:
        if grid is None:
            c, s = float(self.center(self.x)), self.scale()
            grid = Grid((c - 40 * s,), (c + 40 * s,), (40001,))
        return grid.integrate(self.pdf(grid.axes[0]))


@dataclass
class HeatKernel(KernelDensity):
    """Brownian transition density with variance ``sigma2`` per unit time."""

    t: float = 1.0
    sigma2: float = 1.0
    x: float = 0.0
    convolution = True

    def dxdy(self, a, b, x, y):
        u = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return (-1) ** a * _gauss_derivative(u, self.sigma2 * self.t, a + b)

    def scale(self):
        return float(np.sqrt(self.sigma2 * self.t))


@dataclass
class OUKernel(KernelDensity):
    """Transition density of dX = -theta X dt + sigma dW."""

    t: float = 1.0
    theta: float = 1.0
    sigma2: float = 1.0
    x: float = 0.0

    @property
    def decay(self) -> float:
        return float(np.exp(-self.theta * self.t))

    @property
    def variance(self) -> float:
        return float(self.sigma2 * -np.expm1(-2 * self.theta * self.t) / (2 * self.theta))

    def dxdy(self, a, b, x, y):
        m = self.decay
        u = np.asarray(y, dtype=float) - m * np.asarray(x, dtype=float)
        return (-m) ** a * _gauss_derivative(u, self.variance, a + b)

    def scale(self):
        return float(np.sqrt(self.variance))

    def center(self, x):
        return self.decay * np.asarray(x, dtype=float)


def stable_exponent_constant(alpha: float) -> float:
    """c with int (1 - cos(xi z)) |z|^{-1-alpha} dz = c |xi|^alpha."""
    if abs(alpha - 1.0) < 1e-12:
        return pi
    return float(-2.0 * gamma(-alpha) * np.cos(pi * alpha / 2))


@dataclass
class StableKernel(KernelDensity):
    """Symmetric stable density with characteristic function exp(-t * scale_c * |xi|^alpha).

    Computed by discrete Fourier inversion with ``modes`` points on the
    physical box [-half_width, half_width); values between nodes come from a
    cubic spline. ``alias_bound(k)`` bounds the periodisation error of the
    k-th derivative using the power-law tail of the density.
    """

    t: float = 1.0
    alpha: float = 1.5
    x: float = 0.0
    scale_c: float = 1.0
    modes: int = 2**16
    half_width: float = 200.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    convolution = True

    def __post_init__(self):
        if not 0 < self.alpha <= 2:
            raise ValueError("stable index must lie in (0, 2]")

    def at_time(self, t):
        return StableKernel(float(t), self.alpha, self.x, self.scale_c, self.modes, self.half_width)

    @classmethod
    def from_model(cls, alpha: float, t: float = 1.0, **kw) -> "StableKernel":
        """Oracle for the stable1d(alpha) jump model."""
        return cls(t=t, alpha=alpha, scale_c=stable_exponent_constant(alpha), **kw)

    def scale(self):
        return float((self.scale_c * self.t) ** (1.0 / self.alpha))

    @property
    def nodes(self) -> np.ndarray:
        du = 2 * self.half_width / self.modes
        return -self.half_width + du * np.arange(self.modes)

    def samples(self, k: int) -> np.ndarray:
        """k-th derivative of the density on :attr:`nodes`."""
        if k in self._cache:
            return self._cache[k]
        n, U = self.modes, self.half_width
        dxi = pi / U
        xi = (np.arange(n) - n // 2) * dxi
        a = (-1j * xi) ** k * np.exp(-self.t * self.scale_c * np.abs(xi) ** self.alpha) * np.exp(1j * xi * U)
        sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        g = (dxi / (2 * pi)) * sign * np.fft.fft(a)
        out = g.real
        self._cache[k] = out
        return out

    def _spline(self, k):
        key = ("spline", k)
        if key not in self._cache:
            self._cache[key] = CubicSpline(self.nodes, self.samples(k))
        return self._cache[key]

    def mass(self, grid: Grid | None = None) -> float:
        """Mass on ``grid``, by default on the whole Fourier box (node values, periodic rectangle rule)."""
        if grid is not None:
            return super().mass(grid)
        return float(np.sum(self.samples(0)) * 2 * self.half_width / self.modes)

    def alias_bound(self, k: int = 0) -> float:
        a, U = self.alpha, self.half_width
        if a == 2:
            return 0.0
        c_tail = self.t * self.scale_c * gamma(1 + a) * np.sin(pi * a / 2) / pi
        poch = np.prod([1 + a + j for j in range(k)]) if k else 1.0
        n = np.arange(1, 2001)
        s = np.sum(((2 * n - 1) * U) ** (-1 - a - k))
        return float(2 * c_tail * poch * s)

    def dxdy(self, a, b, x, y):
        u = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if np.any(np.abs(u) > 0.5 * self.half_width):
            raise ValueError("stable oracle queried outside half of its Fourier box")
        return (-1) ** a * self._spline(a + b)(u)


@dataclass
class MixtureDensity(KernelDensity):
    """p(x, y) = sum_i w_i N(y - x; mean_i, var_i), independent of t."""

    weights: tuple = (1.0,)
    means: tuple = (0.0,)
    variances: tuple = (1.0,)
    t: float = 1.0
    x: float = 0.0
    convolution = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def dxdy(self, a, b, x, y):
        u = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        out = 0.0
        for w, m, v in zip(self.weights, self.means, self.variances):
            out = out + w * _gauss_derivative(u - m, v, a + b)
        return (-1) ** a * out

    def scale(self):
        return float(np.sqrt(max(self.variances)))


class KDEDensity(KernelDensity):
    """Gaussian kernel density estimate of a one-dimensional cloud."""

    MAX_ORDER = 2

    def __init__(self, samples, bandwidth: float, t: float, x: float = 0.0, point_mass: bool = False):
        self.samples = np.asarray(samples, dtype=float).ravel()
        self.bandwidth = float(bandwidth)
        self.t = t
        self.x = x
        self.point_mass = point_mass

    def at_time(self, t):
        raise ValueError("a KDE is tied to the time of its cloud")

    def scale(self):
        return float(max(np.std(self.samples), self.bandwidth))

    def center(self, x):
        return np.asarray(np.mean(self.samples))

    def dxdy(self, a, b, x, y):
        if a != 0:
            raise ValueError("KDE densities have no x-derivatives")
        if b > self.MAX_ORDER:
            raise ValueError(f"KDE supports y-derivatives up to order {self.MAX_ORDER}")
        y = np.asarray(y, dtype=float)
        flat = y.ravel()
        h = self.bandwidth
        out = np.empty(flat.shape)
        step = max(1, 2_000_000 // max(1, len(self.samples)))
        for s in range(0, len(flat), step):
            u = (flat[s:s + step, None] - self.samples[None, :]) / h
            g = np.exp(-0.5 * u * u)
            if b == 1:
                g = -u * g
            elif b == 2:
                g = (u * u - 1) * g
            out[s:s + step] = g.sum(axis=1)
        out /= len(self.samples) * h ** (1 + b) * np.sqrt(2 * pi)
        return out.reshape(y.shape)


def silverman_bandwidth(samples) -> float:
    """0.9 * min(std, IQR/1.34) * N^(-1/5); 0 for a degenerate sample."""
    s = np.asarray(samples, dtype=float).ravel()
    sd = np.std(s, ddof=1)
    q75, q25 = np.percentile(s, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return float(0.9 * spread * len(s) ** -0.2)


def kde_estimate(cloud, bandwidth="auto") -> KDEDensity:
    """Gaussian KDE of a cloud (N >= 100); Silverman bandwidth when ``auto``.

    A cloud with zero spread yields a narrow bump at the common point and a
    warning (point-mass mode).
    """
    pts = np.asarray(cloud.endpoints, dtype=float)
    if pts.shape[1] != 1:
        raise ValueError("kde_estimate handles one-dimensional clouds")
    if len(pts) < 100:
        raise ValueError("kde_estimate needs at least 100 samples")
    x0 = float(np.ravel(cloud.x0)[0])
    if np.ptp(pts) == 0:
        warnings.warn("cloud has zero spread; returning a point-mass bump", RuntimeWarning, stacklevel=2)
        h = 1e-3 * max(1.0, abs(float(pts[0, 0])))
        return KDEDensity(pts[:, 0], h, cloud.t, x0, point_mass=True)
    h = silverman_bandwidth(pts) if bandwidth == "auto" else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    return KDEDensity(pts[:, 0], h, cloud.t, x0)


def l1_distance(a: KernelDensity, b: KernelDensity, grid: Grid | None = None) -> float:
    """int |p_a - p_b| dy over a grid (default: 12 scales around b)."""
    if grid is None:
        c, s = float(b.center(b.x)), b.scale()
        grid = Grid((c - 12 * s,), (c + 12 * s,), (4001,))
    y = grid.axes[0]
    return grid.integrate(np.abs(a.pdf(y) - b.pdf(y)))


def kernel_derivatives(density: KernelDensity, alpha, beta, grid: Grid) -> SampledField:
    """Field of d_x^alpha d_y^beta p_t(x, y) on a 2D (x, y) grid, or on a 1D y grid at the base point.

    The result stores values only, so finite differences of the returned
    field give an independent cross-check of the analytic derivative.
    """
    a, b = _order(alpha), _order(beta)
    if isinstance(density, KDEDensity) and (a > 0 or b > KDEDensity.MAX_ORDER):
        raise ValueError("KDE supports only y-derivatives of order <= 2")
    if grid.d == 1:
        vals = density.dxdy(a, b, density.x, grid.axes[0])
    elif grid.d == 2:
        if isinstance(density, KDEDensity):
            raise ValueError("KDE densities live on a y grid only")
        pts = grid.points()
        vals = density.dxdy(a, b, pts[..., 0], pts[..., 1])
    else:
        raise ValueError("kernel_derivatives supports (y) or (x, y) grids")
    return SampledField.from_values(vals, grid)


# ---------------------------------------------------------------------------
# blow-up fits


@dataclass
class BoundFit:
    alpha: int
    beta: int
    kappa: float
    pi: float
    exponent: float
    slope: float
    prefactor: float
    r2: float
    t_grid: np.ndarray
    M: np.ndarray

    def rows(self):
        """(t, q, kappa, pi, M_q, slope, R2) per t."""
        q = self.alpha + self.beta
        return [(float(t), q, self.kappa, self.pi, float(m), self.slope, self.r2) for t, m in zip(self.t_grid, self.M)]


def _offsets(density, radius):
    s = density.scale()
    inner = s * np.linspace(-12, 12, 4801)
    outer = np.linspace(-radius, radius, 2001)
    u = np.union1d(inner, outer)
    if isinstance(density, StableKernel):
        u = u[np.abs(u) <= 0.45 * density.half_width]
    return u


def _weighted_sup(density, a, b, kappa, pi_exp, xs, radius):
    if isinstance(density, KDEDensity):
        xs = np.array([density.x])
    best = 0.0
    for xv in xs:
        c = float(density.center(xv))
        y = c + _offsets(density, radius)
        v = np.abs(density.dxdy(a, b, xv, y)) * weight((xv - y)[:, None], kappa) / weight(np.array([[xv]]), pi_exp)[0]
        best = max(best, float(np.max(v)))
    return best


def _fit_loglog(t, M):
    lt, lm = np.log(t), np.log(M)
    A = np.vstack([lt, np.ones_like(lt)]).T
    coef, *_ = np.linalg.lstsq(A, lm, rcond=None)
    pred = A @ coef
    ss = np.sum((lm - lm.mean()) ** 2)
    r2 = 1.0 - np.sum((lm - pred) ** 2) / ss if ss > 0 else 1.0
    return float(coef[0]), float(np.exp(coef[1])), float(r2)


def blowup_fit(family, q: int, kappa: float = 0.0, t_grid=None, alpha: int = 0, pi_exp=None,
               pi_grid=(0, 1, 2, 3, 4), x_grid=None, radius: float = 10.0) -> BoundFit:
    """Fit M_q(t) = sup |d_x^alpha d_y^(q-alpha) p_t| psi_kappa(x-y) / psi_pi(x) ~ C t^slope.

    ``family`` is an oracle (evaluated at every t of ``t_grid``) or a sequence
    of densities, one per time. Without ``pi_exp`` the smallest pi on
    ``pi_grid`` whose sup is stable (within 5%) when the x range doubles is used.
    """
    if isinstance(family, KernelDensity):
        if t_grid is None:
            raise ValueError("an oracle family needs a t grid")
        t_grid = np.asarray(t_grid, dtype=float)
        members = [family.at_time(t) for t in t_grid]
    else:
        members = list(family)
        t_grid = np.array([m.t for m in members], dtype=float)
    if len(t_grid) < 5 or np.log10(t_grid.max() / t_grid.min()) < 1.5 - 1e-12:
        raise ValueError("fit needs at least 5 times spanning 1.5 decades")
    b = q - alpha
    if b < 0:
        raise ValueError("alpha cannot exceed q")
    xs = np.linspace(-2.0, 2.0, 21) if x_grid is None else np.asarray(x_grid, dtype=float)

    def sups(p, xr):
        return np.array([_weighted_sup(m, alpha, b, kappa, p, xr, radius) for m in members])

    if pi_exp is None:
        chosen = None
        for p in pi_grid:
            m1, m2 = sups(p, xs), sups(p, 2 * xs)
            if np.all(np.isfinite(m1)) and np.all(np.abs(m2 - m1) <= 0.05 * m1):
                chosen, M = float(p), m1
                break
        if chosen is None:
            raise ValueError("no pi on the search grid gives a stable weighted sup")
    else:
        chosen, M = float(pi_exp), sups(pi_exp, xs)
    if np.any(M <= 0) or not np.all(np.isfinite(M)):
        raise ValueError("weighted sup must be positive and finite")
    slope, C, r2 = _fit_loglog(t_grid, M)
    return BoundFit(alpha, b, kappa, chosen, -slope, slope, C, r2, t_grid, M)


@dataclass
class TransferVerdict:
    verdict: str  # "pass", "fail" or "no guarantee"
    measured: float
    predicted: float
    slack: float


def predicted_exponent(q: int, d: int, a: float, b: float, delta: float, theta0: float, epsilon: float) -> float:
    """theta0 (1 + (a+b)/delta) (q + 2d + epsilon)."""
    return theta0 * (1 + (a + b) / delta) * (q + 2 * d + epsilon)


def transfer_exponent_check(fit: BoundFit, a: float, b: float, delta: float, theta0: float,
                            epsilon: float = 0.0, d: int = 1, balance=None, no_jumps: bool = False) -> TransferVerdict:
    """Compare the fitted blow-up exponent with the transferred budget.

    Returns "no guarantee" when ``balance`` (a BalanceReport) is not bounded;
    ``no_jumps`` marks the pure-Gaussian case where the substituted semigroup
    is exact and the check is trivially satisfied.
    """
    measured = abs(fit.slope)
    if balance is not None and balance.verdict != "bounded":
        return TransferVerdict("no guarantee", measured, np.nan, np.nan)
    if no_jumps:
        return TransferVerdict("pass", measured, np.inf, np.inf)
    if delta <= 0:
        return TransferVerdict("no guarantee", measured, np.nan, np.nan)
    pred = predicted_exponent(fit.alpha + fit.beta, d, a, b, delta, theta0, epsilon)
    return TransferVerdict("pass" if measured <= pred else "fail", measured, pred, pred - measured)


# ---------------------------------------------------------------------------
# semigroup property checks


_xs = sp.Symbol("x")


def semigroup_corpus():
    """Rapidly decreasing test functions (plus a constant) as sympy expressions."""
    x = _xs
    return [
        ("gauss", sp.exp(-x**2)),
        ("shifted", sp.exp(-(x - 1) ** 2 / 2)),
        ("odd", x * sp.exp(-x**2 / 2)),
        ("wave", sp.cos(2 * x) * sp.exp(-x**2 / 2)),
        ("skew", (1 + x + x**2) * sp.exp(-x**2 / 3)),
        ("sech", sp.sech(x)),
        ("twin", sp.exp(-(x - 2) ** 2) + sp.exp(-(x + 2) ** 2) / 2),
        ("const", sp.Integer(1) + 0 * x),
    ]


def _lambdas(expr, q):
    out = []
    for k in range(q + 1):
        fn = sp.lambdify(_xs, sp.diff(expr, _xs, k) if k else expr, "numpy")
        out.append(lambda v, fn=fn: np.broadcast_to(np.asarray(fn(v), dtype=float), np.shape(v)).astype(float))
    return out


@dataclass
class SemigroupCheck:
    tag: str
    constant: float
    passed: bool
    detail: dict = field(default_factory=dict)


SEMIGROUP_TAGS = ("A31", "A32", "A34", "A36", "A38", "A4", "CK", "P_t-psi-moment")


class _Quad:
    """Uniform trapezoid rule in the integration variable, resolving the kernel scale."""

    def __init__(self, oracle, lo, hi):
        s = oracle.scale()
        h = min(s / 12.0, 0.02)
        n = int(np.ceil((hi - lo) / h)) + 1
        self.nodes = np.linspace(lo, hi, n)
        w = np.full(n, self.nodes[1] - self.nodes[0])
        w[0] = w[-1] = 0.5 * w[0]
        self.weights = w


def _forward(oracle, fvals, quad, xs, a=0):
    """d_x^a P_t f(x) = int d_x^a p(x, y) f(y) dy."""
    out = np.empty(len(xs))
    for i, xv in enumerate(xs):
        out[i] = np.sum(oracle.dxdy(a, 0, xv, quad.nodes) * fvals * quad.weights)
    return out


def _adjoint(oracle, gvals, quad, ys, b=0):
    """d_y^b P_t^* g(y) = int d_y^b p(x, y) g(x) dx."""
    out = np.empty(len(ys))
    for i, yv in enumerate(ys):
        out[i] = np.sum(oracle.dxdy(0, b, quad.nodes, yv) * gvals * quad.weights)
    return out


def semigroup_property_check(tag: str, oracle: KernelDensity, params: dict | None = None) -> SemigroupCheck:
    """Evaluate both sides of a semigroup inequality on a test corpus by quadrature.

    Tags: ``A31`` (L1 contraction constant Q), ``A32`` (K_k for psi_k),
    ``A34`` (weighted adjoint L^p bound), ``A36`` (D*), ``A38`` (weighted
    adjoint Sobolev bound, implied universal constant), ``A4`` (constant of
    the psi_{-kappa} weighted sup-norm bound), ``CK`` (Chapman-Kolmogorov
    residual) and ``P_t-psi-moment`` (C with P_t psi_kappa <= C psi_kappabar).
    """
    if tag not in SEMIGROUP_TAGS:
        raise ValueError(f"unknown semigroup check {tag!r}; expected one of {SEMIGROUP_TAGS}")
    p = dict(params or {})
    R = p.get("radius", 12.0)
    xs = np.linspace(-p.get("probe_radius", 6.0), p.get("probe_radius", 6.0), p.get("probes", 121))
    corpus = p.get("corpus") or semigroup_corpus()

    if tag == "A31":
        quad = _Quad(oracle, -R, R)
        xq = quad.nodes
        worst, each = 0.0, {}
        cq = _Quad(oracle, -0.8 * R, 0.8 * R)
        for name, e in corpus:
            if name == "const":
                continue
            f = _lambdas(e, 0)[0]
            pf = _forward(oracle, f(xq), quad, cq.nodes)
            ratio = np.sum(np.abs(pf) * cq.weights) / np.sum(np.abs(f(cq.nodes)) * cq.weights)
            each[name] = float(ratio)
            worst = max(worst, ratio)
        return SemigroupCheck(tag, float(worst), bool(np.isfinite(worst)), {"ratios": each})

    if tag in ("A32", "P_t-psi-moment"):
        k = p.get("k", p.get("kappa", 1.0))
        kbar = p.get("kappa_bar", k) if tag == "P_t-psi-moment" else k
        vals = []
        for xv in xs:
            c, s = float(oracle.center(xv)), oracle.scale()
            quad = _Quad(oracle, c - 14 * s, c + 14 * s)
            num = np.sum(oracle.dxdy(0, 0, xv, quad.nodes) * weight(quad.nodes[:, None], k) * quad.weights)
            vals.append(num / weight(np.array([[xv]]), kbar)[0])
        K = float(np.max(vals))
        return SemigroupCheck(tag, K, bool(np.isfinite(K)), {"k": k, "kappa_bar": kbar, "ratio": np.array(vals)})

    if tag == "CK":
        s, t = p.get("s", 0.3), p.get("t_step", oracle.t)
        ps, pt, pst = oracle.at_time(s), oracle.at_time(t), oracle.at_time(s + t)
        zs = np.linspace(-3, 3, 25)
        worst = 0.0
        for xv in np.linspace(-3, 3, 25):
            c = float(ps.center(xv))
            w = 14 * ps.scale()
            quad = _Quad(ps, c - w, c + w)
            inner = ps.dxdy(0, 0, xv, quad.nodes)
            lhs = np.array([np.sum(inner * pt.dxdy(0, 0, quad.nodes, zv) * quad.weights) for zv in zs])
            worst = max(worst, float(np.max(np.abs(lhs - pst.dxdy(0, 0, xv, zs)))))
        tol = p.get("tol", 1e-6)
        return SemigroupCheck(tag, worst, worst < tol, {"s": s, "t": t})

    if tag == "A36":
        q, rho = p.get("q", 1), p.get("rho", 2.0)
        quad = _Quad(oracle, -R, R)
        xq = quad.nodes
        worst = 0.0
        for name, e in corpus:
            fs = _lambdas(e, q)
            lhs = sum(np.abs(_adjoint(oracle, fs[0](xq), quad, xs, b=k)) for k in range(q + 1))
            rhs = sum(np.abs(_adjoint(oracle, np.abs(fs[k](xq)) ** rho, quad, xs)) ** (1 / rho) for k in range(q + 1))
            ok = rhs > 1e-8 * np.max(rhs)
            worst = max(worst, float(np.max(lhs[ok] / rhs[ok])))
        return SemigroupCheck(tag, worst, bool(np.isfinite(worst)), {"q": q, "rho": rho})

    if tag in ("A34", "A38"):
        k, pexp = p.get("k", 1.0), p.get("p", 2.0)
        rho, q = p.get("rho", 1.5), (p.get("q", 1) if tag == "A38" else 0)
        quad = _Quad(oracle, -R, R)
        xq = quad.nodes
        cq = _Quad(oracle, -0.75 * R, 0.75 * R)
        ys = cq.nodes
        worst = 0.0
        for name, e in corpus:
            if name == "const":
                continue
            fs = _lambdas(e, q)
            g = fs[0](xq) / weight(xq[:, None], k)
            # derivatives of W = P^*(f / psi_k), then Leibniz with psi_k
            W = [_adjoint(oracle, g, quad, ys, b=j) for j in range(q + 1)]
            total = 0.0
            for m in range(q + 1):
                dm = sum(comb(m, j) * weight_derivative(ys[:, None], k, (m - j,)) * W[j] for j in range(m + 1))
                total = total + np.abs(dm)
            lhs = np.sum(total**pexp * cq.weights) ** (1 / pexp)
            rhs = np.sum(sum(np.abs(fs[j](ys)) for j in range(q + 1)) ** pexp * cq.weights) ** (1 / pexp)
            worst = max(worst, lhs / rhs)
        if tag == "A34":
            K = semigroup_property_check("A32", oracle, {"k": k * pexp}).constant
            Q = semigroup_property_check("A31", oracle).constant
            bound = K ** (1 / pexp) * Q ** (1 - 1 / pexp)
            return SemigroupCheck(tag, float(worst), worst <= bound * (1 + 1e-9), {"bound": bound, "K": K, "Q": Q})
        K = semigroup_property_check("A32", oracle, {"k": k * rho * pexp}).constant
        Q = semigroup_property_check("A31", oracle).constant
        D = semigroup_property_check("A36", oracle, {"q": q, "rho": rho}).constant
        scale = K ** (1 / pexp) * Q ** ((pexp - rho) / (rho * pexp)) * D
        C = worst / scale
        return SemigroupCheck(tag, float(C), bool(np.isfinite(C)), {"ratio": worst, "K": K, "Q": Q, "D": D})

    # A4: ||P_t f||_{q,-kappa,inf} <= C ||f||_{q,-kappa,inf}
    q, kappa = p.get("q", 1), p.get("kappa", 1.0)
    worst = 0.0
    for name, e in list(corpus) + [("linear", _xs), ("square", _xs**2)]:
        fs = _lambdas(e, q)
        num = np.zeros(len(xs))
        Pf = []
        for j in range(q + 1):
            col = []
            for xv in xs:
                c, s = float(oracle.center(xv)), oracle.scale()
                quad = _Quad(oracle, c - 14 * s, c + 14 * s)
                col.append(np.sum(oracle.dxdy(j, 0, xv, quad.nodes) * fs[0](quad.nodes) * quad.weights))
            Pf.append(np.array(col))
        den = np.zeros(len(xs))
        for m in range(q + 1):
            num = num + np.abs(sum(comb(m, j) * weight_derivative(xs[:, None], -kappa, (m - j,)) * Pf[j]
                                   for j in range(m + 1)))
            den = den + np.abs(sum(comb(m, j) * weight_derivative(xs[:, None], -kappa, (m - j,)) * fs[j](xs)
                                   for j in range(m + 1)))
        worst = max(worst, float(np.max(num) / np.max(den)))
    return SemigroupCheck(tag, worst, bool(np.isfinite(worst)), {"q": q, "kappa": kappa})
