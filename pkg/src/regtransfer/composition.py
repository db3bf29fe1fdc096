"""Composed transition kernels and the Lindeberg expansion of P_t - P^n_t.

Two computational routes:

* ``compose_kernels`` evaluates the kernel of S_{d1} U_1 S_{d2} ... S_{dm} on an
  (x, y) grid by nested Gauss-Legendre quadrature over the intermediate points,
  written as a chain of weighted matrix products. Each U_i acts on the first
  variable of the next kernel, analytically.
* ``lindeberg_terms`` applies P^n, Delta_n = L - L_n and the target P to
  functions on a periodic spectral grid, where Gaussian semigroups are exact
  for every duration (no small-time kernels to resolve), and integrates over
  the ordered time simplex with tensor Gauss-Legendre.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ._quadrature import composite_gauss_legendre, simplex_rule
from .density_lab import HeatKernel, KernelDensity, OUKernel
from .errors import DivergentIntegralError
from .fields import Grid, SampledField
from .weights import weight, weight_derivative

MAX_LINKS = 3


# ---------------------------------------------------------------------------
# kernel chains


@dataclass(frozen=True)
class ChainOperator:
    """Operator between two semigroup links, acting on functions of z.

    ``identity``; ``shift`` f -> f(. + c); ``first`` f -> a(z) f'; ``second`` f -> c/2 f''.
    """

    kind: str = "identity"
    c: float = 0.0
    coeff: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "shift", "first", "second"):
            raise ValueError(f"unknown operator kind {self.kind!r}")

    def on_kernel(self, k: KernelDensity, z, w, b: int = 0):
        """(U^z p)(z, w) with an extra d_w^b."""
        if self.kind == "identity":
            return k.dxdy(0, b, z, w)
        if self.kind == "shift":
            return k.dxdy(0, b, z + self.c, w)
        if self.kind == "first":
            a = self.coeff(z) if self.coeff is not None else self.c
            return a * k.dxdy(1, b, z, w)
        return 0.5 * self.c * k.dxdy(2, b, z, w)


IDENTITY = ChainOperator()


@dataclass
class KernelChain:
    """S^{(1)}_{d1} U_1 S^{(2)}_{d2} ... U_{m-1} S^{(m)}_{dm}; ``oracles`` are time-free templates."""

    oracles: list
    durations: list
    operators: list = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.oracles, KernelDensity):
            self.oracles = [self.oracles] * len(self.durations)
        self.durations = [float(d) for d in self.durations]
        if not self.operators:
            self.operators = [IDENTITY] * (len(self.durations) - 1)
        if len(self.durations) < 1:
            raise ValueError("a chain needs at least one link")
        if len(self.oracles) != len(self.durations) or len(self.operators) != len(self.durations) - 1:
            raise ValueError("need m oracles, m durations and m - 1 operators")
        if any(d <= 0 for d in self.durations):
            raise ValueError("durations must be positive")

    @property
    def m(self) -> int:
        return len(self.durations)

    @property
    def t(self) -> float:
        return float(sum(self.durations))

    @property
    def pigeonhole(self) -> int:
        """First link with duration >= t/m (one always exists)."""
        return next(i for i, d in enumerate(self.durations) if d >= self.t / self.m * (1 - 1e-12))

    def kernels(self) -> list:
        return [o.at_time(d) for o, d in zip(self.oracles, self.durations)]

    def scaled(self, t: float) -> "KernelChain":
        f = t / self.t
        return replace(self, durations=[d * f for d in self.durations])


@dataclass
class ComposedKernel:
    field: SampledField
    quad_error: float
    pigeonhole: int
    nodes: int

    @property
    def values(self):
        return self.field.values


def _intermediate_rule(chain: KernelChain, grid: Grid, panels: int | None, order: int):
    ks = chain.kernels()
    smax = max(k.scale() for k in ks)
    smin = min(k.scale() for k in ks)
    reach = sum(abs(op.c) for op in chain.operators if op.kind == "shift")
    lo = min(grid.lower) - 12 * smax - reach
    hi = max(grid.upper) + 12 * smax + reach
    if panels is None:
        panels = int(math.ceil((hi - lo) / (0.5 * smin)))
    return lo, hi, panels


def _chain_values(chain, x, y, a, b, lo, hi, panels, order):
    ks = chain.kernels()
    z, w = composite_gauss_legendre(lo, hi, panels, order)
    m = chain.m
    # first kernel from x to z_1, carrying d_x^a
    last_b = b if m == 1 else 0
    M = ks[0].dxdy(a, last_b, x[:, None], (y if m == 1 else z)[None, :])
    for i in range(1, m):
        op = chain.operators[i - 1]
        target = y if i == m - 1 else z
        Ki = op.on_kernel(ks[i], z[:, None], target[None, :], b if i == m - 1 else 0)
        M = (M * w[None, :]) @ Ki
    return M


def compose_kernels(chain: KernelChain, grid: Grid, a: int = 0, b: int = 0,
                    panels: int | None = None, order: int = 16) -> ComposedKernel:
    """d_x^a d_y^b of the composed kernel on a 2D (x, y) grid.

    Intermediate variables are integrated over a box reaching 12 kernel
    scales past the grid; the error estimate compares against half the panels.
    """
    if chain.m > MAX_LINKS:
        raise ValueError(f"at most {MAX_LINKS} links (nested quadrature cost)")
    if grid.d != 2:
        raise ValueError("compose_kernels needs an (x, y) grid")
    x, y = grid.axes
    if chain.m == 1:
        vals = chain.kernels()[0].dxdy(a, b, x[:, None], y[None, :])
        return ComposedKernel(SampledField.from_values(vals, grid), 0.0, 0, 0)
    lo, hi, panels = _intermediate_rule(chain, grid, panels, order)
    fine = _chain_values(chain, x, y, a, b, lo, hi, panels, order)
    coarse = _chain_values(chain, x, y, a, b, lo, hi, max(1, panels // 2), order)
    if not np.all(np.isfinite(fine)):
        raise DivergentIntegralError("composed kernel is not finite on the grid")
    err = float(np.max(np.abs(fine - coarse)))
    return ComposedKernel(SampledField.from_values(fine, grid), err, chain.pigeonhole, panels * order)


# ---------------------------------------------------------------------------
# weighted norm probe along a time ladder


@dataclass
class ProbeResult:
    t: np.ndarray
    M: np.ndarray
    slope: float
    budget: float
    within: bool
    finite: bool

    def rows(self):
        return [(float(t), float(m)) for t, m in zip(self.t, self.M)]


def _weighted_y_norm(chain, grid, beta, q1, kappa, p):
    """||d_x^beta p(x, .)||_{q1,kappa,p} for every x of the grid."""
    y = grid.axes[1]
    derivs = [compose_kernels(chain, grid, a=beta, b=j).values for j in range(q1 + 1)]
    total = 0.0
    for j in range(q1 + 1):
        # d^j (psi_kappa g) by Leibniz
        dj = 0.0
        for i in range(j + 1):
            dj = dj + math.comb(j, i) * weight_derivative(y[:, None], kappa, (i,))[None, :] * derivs[j - i]
        total = total + np.abs(dj)
    hy = grid.spacing[1]
    if np.isinf(p):
        return np.max(total, axis=1)
    return np.trapezoid(total**p, dx=hy, axis=1) ** (1.0 / p)


def composed_bound_probe(chain: KernelChain, q1: int, q2: int, kappa: float, p: float,
                         t_grid=None, chi: float | None = None, grid: Grid | None = None,
                         theta0: float = 0.5, theta1: float = 1.0, a: float = 0.0, b: float = 0.0,
                         d: int = 1) -> ProbeResult:
    """M(t) = max_{beta<=q2} sup_x ||d_x^beta p(x, .)||_{q1,kappa,p} / psi_chi(x) on a time ladder.

    The chain keeps its duration fractions while its total time runs over
    ``t_grid``. The fitted log-log slope is compared to the budget
    theta0 (q1 + q2 + d + 2 theta1) + (m - 1) theta0 (a + b).
    """
    t_grid = np.geomspace(0.05, 1.0, 7) if t_grid is None else np.asarray(t_grid, dtype=float)
    chi = kappa if chi is None else chi
    grid = Grid((-3.0, -14.0), (3.0, 14.0), (25, 1401)) if grid is None else grid
    xw = weight(grid.axes[0][:, None], chi)
    M = []
    for t in t_grid:
        c = chain.scaled(t)
        worst = 0.0
        for beta in range(q2 + 1):
            worst = max(worst, float(np.max(_weighted_y_norm(c, grid, beta, q1, kappa, p) / xw)))
        M.append(worst)
    M = np.array(M)
    finite = bool(np.all(np.isfinite(M)) and np.all(M > 0))
    slope = float(np.polyfit(np.log(t_grid), np.log(M), 1)[0]) if finite else float("nan")
    budget = theta0 * (q1 + q2 + d + 2 * theta1) + (chain.m - 1) * theta0 * (a + b)
    return ProbeResult(t_grid, M, slope, budget, bool(finite and abs(slope) <= budget + 1e-9), finite)


# ---------------------------------------------------------------------------
# spectral Gaussian semigroups and the Lindeberg expansion


@dataclass(frozen=True)
class SpectralGrid:
    """Periodic grid on [-L, L) with N nodes."""

    L: float = 16.0
    N: int = 512

    @property
    def x(self) -> np.ndarray:
        return -self.L + 2 * self.L * np.arange(self.N) / self.N

    @property
    def k(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.N, d=2 * self.L / self.N)

    @property
    def dx(self) -> float:
        return 2 * self.L / self.N

    @property
    def rk(self) -> np.ndarray:
        return 2 * np.pi * np.fft.rfftfreq(self.N, d=2 * self.L / self.N)

    def evaluate_at(self, rcoeffs, pts) -> np.ndarray:
        """Real trigonometric interpolant with rfft coefficients ``rcoeffs`` at ``pts``."""
        c = np.array(rcoeffs, dtype=complex)
        scale = np.full(len(self.rk), 2.0)
        scale[0] = 1.0
        if self.N % 2 == 0:
            scale[-1] = 1.0
        c = c * (scale[:, None] if c.ndim == 2 else scale)
        E = np.exp(1j * np.outer(np.asarray(pts) + self.L, self.rk))
        return (E @ c).real / self.N


@dataclass(frozen=True)
class GaussianSemigroup:
    """dX = -theta X dt + sigma dW; theta = 0 is the heat semigroup."""

    sigma2: float = 1.0
    theta: float = 0.0

    def generator_coefficients(self):
        """(drift slope, diffusion): L = sigma2/2 d^2 + slope * x d."""
        return -self.theta, self.sigma2

    def moments(self, s):
        if self.theta == 0:
            return 1.0, self.sigma2 * s
        return math.exp(-self.theta * s), self.sigma2 * -math.expm1(-2 * self.theta * s) / (2 * self.theta)

    def kernel(self, t: float) -> KernelDensity:
        if self.theta == 0:
            return HeatKernel(t=t, sigma2=self.sigma2)
        return OUKernel(t=t, theta=self.theta, sigma2=self.sigma2)

    def apply(self, g: np.ndarray, s: float, sg: SpectralGrid) -> np.ndarray:
        """(P_s g)(x) = E g(m x + sqrt(v) Z) for g sampled on the spectral grid."""
        if s == 0:
            return g
        m, v = self.moments(s)
        if m == 1.0:
            mult = np.exp(-0.5 * v * sg.k**2)
            c = np.fft.fft(g, axis=0) * (mult[:, None] if g.ndim == 2 else mult)
            return np.fft.ifft(c, axis=0).real
        mult = np.exp(-0.5 * v * sg.rk**2)
        c = np.fft.rfft(g, axis=0) * (mult[:, None] if g.ndim == 2 else mult)
        return sg.evaluate_at(c, m * sg.x)


@dataclass(frozen=True)
class DiffOperator:
    """f -> slope * x f' + diffusion/2 f'' (constant diffusion, linear drift)."""

    slope: float = 0.0
    diffusion: float = 0.0

    @property
    def is_zero(self) -> bool:
        return self.slope == 0 and self.diffusion == 0

    def apply(self, g, sg: SpectralGrid):
        if self.is_zero:
            return np.zeros_like(g)
        ax = 0
        c = np.fft.fft(g, axis=ax)
        k = sg.k if g.ndim == 1 else sg.k[:, None]
        x = sg.x if g.ndim == 1 else sg.x[:, None]
        out = 0.0
        if self.slope:
            out = out + self.slope * x * np.fft.ifft(1j * k * c, axis=ax).real
        if self.diffusion:
            out = out + 0.5 * self.diffusion * np.fft.ifft(-(k**2) * c, axis=ax).real
        return out


@dataclass(frozen=True)
class LindebergPair:
    """Target semigroup P (generator L) and approximation P^n (generator L_n)."""

    target: GaussianSemigroup
    approx: GaussianSemigroup
    name: str = ""
    coupling: float = 0.0

    @property
    def delta(self) -> DiffOperator:
        """Delta_n = L - L_n."""
        s1, d1 = self.target.generator_coefficients()
        s2, d2 = self.approx.generator_coefficients()
        return DiffOperator(s1 - s2, d1 - d2)


def commuting_pair(sigma2: float = 1.0, sigma2_n: float = 0.9) -> LindebergPair:
    """Two heat semigroups; Delta_n = (sigma2 - sigma2_n)/2 d^2 commutes with everything."""
    return LindebergPair(GaussianSemigroup(sigma2), GaussianSemigroup(sigma2_n), "commuting", sigma2 - sigma2_n)


def ou_brownian_pair(theta: float, sigma2: float = 1.0) -> LindebergPair:
    """Brownian target approximated by OU(theta); Delta_n = theta x d."""
    return LindebergPair(GaussianSemigroup(sigma2), GaussianSemigroup(sigma2, theta), "ou-brownian", theta)


@dataclass
class LindebergExpansion:
    pair: LindebergPair
    t: float
    m0: int
    grid: SpectralGrid
    order: int
    terms: list
    f: np.ndarray | None = None

    @property
    def series(self) -> np.ndarray:
        """phi-series: P^n_t f + sum_{m=1}^{m0-1} I^m f."""
        return np.sum(self.terms, axis=0)

    def term_fields(self) -> list[SampledField]:
        """The terms as fields on a 1D grid (kernel columns when built from the identity)."""
        sg = self.grid
        lo, hi = sg.x[0], sg.x[-1]
        if np.ndim(self.terms[0]) == 1:
            g = Grid((lo,), (hi,), (sg.N,))
            return [SampledField.from_values(T, g) for T in self.terms]
        # column j is the density from x_j, so index as (x, y)
        g = Grid((lo, lo), (hi, hi), (sg.N, sg.N))
        return [SampledField.from_values(np.asarray(T).T, g) for T in self.terms]


def _term(pair: LindebergPair, m: int, t: float, g: np.ndarray, sg: SpectralGrid, order: int):
    Pn, D = pair.approx, pair.delta
    if m == 0:
        return Pn.apply(g, t, sg)
    if D.is_zero:
        return np.zeros_like(g)
    nodes, weights = simplex_rule(m, t, order)
    out = np.zeros_like(g, dtype=float)
    for tn, wn in zip(nodes, weights):
        times = np.concatenate([[t], tn])  # t_0 = t > t_1 > ... > t_m
        h = Pn.apply(g, times[-1], sg)
        for i in range(m - 1, -1, -1):
            h = Pn.apply(D.apply(h, sg), times[i] - times[i + 1], sg)
        out += wn * h
    return out


def lindeberg_terms(pair: LindebergPair, t: float, m0: int, f=None, grid: SpectralGrid | None = None,
                    order: int = 16) -> LindebergExpansion:
    """Terms I^0 = P^n_t f and I^m f = int_simplex prod_i (P^n_{t_i - t_{i+1}} Delta_n) P^n_{t_m} f, m < m0.

    ``f`` is a callable, an array on the spectral grid, or None for the
    kernel (columns are the transition densities from each grid node).
    """
    if m0 < 1:
        raise ValueError("m0 >= 1")
    if m0 > MAX_LINKS:
        raise ValueError(f"depth m0 <= {MAX_LINKS}")
    sg = grid or SpectralGrid()
    if f is None:
        g = np.eye(sg.N) / sg.dx
    else:
        g = np.asarray(f(sg.x) if callable(f) else f, dtype=float)
    terms = [_term(pair, m, t, g, sg, order) for m in range(m0)]
    return LindebergExpansion(pair, t, m0, sg, order, terms, None if f is None else g)


def remainder_estimate(pair: LindebergPair, t: float, m0: int, corpus, grid: SpectralGrid | None = None,
                       order: int = 16, normalise: str = "sup") -> dict:
    """sup_x |P_t f - phi-series(f)| per corpus function (divided by ||f||_2 when ``normalise='l2'``)."""
    sg = grid or SpectralGrid()
    names = [name for name, _ in corpus]
    g = np.stack([np.asarray(f(sg.x), dtype=float) for _, f in corpus], axis=1)
    exp = lindeberg_terms(pair, t, m0, g, sg, order)
    err = np.max(np.abs(pair.target.apply(g, t, sg) - exp.series), axis=0)
    if normalise == "l2":
        err = err / np.sqrt(np.sum(g**2, axis=0) * sg.dx)
    return {name: float(e) for name, e in zip(names, err)}


@dataclass
class OrderFit:
    name: str
    m0: int
    couplings: np.ndarray
    remainders: np.ndarray
    order: float


def remainder_order(pair_family: Callable, couplings, t: float, m0: int, corpus,
                    grid: SpectralGrid | None = None, normalise: str = "sup") -> list[OrderFit]:
    """Log-log slope of the remainder in the coupling parameter, per corpus function."""
    couplings = np.asarray(couplings, dtype=float)
    table = [remainder_estimate(pair_family(c), t, m0, corpus, grid, normalise=normalise) for c in couplings]
    fits = []
    for name, _ in corpus:
        r = np.array([row[name] for row in table])
        slope = float(np.polyfit(np.log(couplings), np.log(r), 1)[0])
        fits.append(OrderFit(name, m0, couplings, r, slope))
    return fits


def default_lindeberg_corpus():
    return [
        ("gauss", lambda x: np.exp(-x**2 / 2)),
        ("gauss-cos", lambda x: np.exp(-x**2 / 2) * np.cos(2 * x)),
        ("hermite-gauss", lambda x: (x**2 - 1) * np.exp(-x**2 / 2)),
        ("narrow-bump", lambda x: np.exp(-2 * (x + 0.5) ** 2)),
    ]


def fits_to_csv(fits: list[OrderFit]) -> str:
    buf = io.StringIO()
    buf.write("function,m0,coupling,remainder,order\n")
    for f in fits:
        for c, r in zip(f.couplings, f.remainders):
            buf.write(f"{f.name},{f.m0},{c:.17g},{r:.17g},{f.order:.17g}\n")
    return buf.getvalue()
