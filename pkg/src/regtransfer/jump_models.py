"""Jump generators, their small-jump Gaussian substitutes and the approximation ladder.

A model is a Levy intensity on R (continuous density plus optional atoms), a
jump coefficient c(z, x) in R^d and a drift b(x). For a cutoff radius r the
approximating generator keeps the jumps with |z| > r and replaces the small
ones by the diffusion term 1/2 tr(A_r(x) D^2 f) with A_r = int_{|z|<=r} c c^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Callable

import numpy as np

from ._quadrature import radial_integral
from .errors import QuadratureError, TruncationError
from .fields import SampledField, count_classes
from .weights import weighted_norm

# Taylor expansion replaces f(x+c) - f(x) - <c, grad f> below this jump size
_TAYLOR_RADIUS = 1e-3


@dataclass
class JumpModel:
    """Jump model on R^d driven by scalar marks z.

    ``density(z)`` is the Levy density (vectorised, zero where absent);
    ``atoms`` lists point masses ``(z_k, w_k)``. The jump coefficient is
    ``coeff(z, x)`` with ``z`` of shape (Nz,) and ``x`` of shape (Nx, d),
    returning (Nz, Nx, d); by default c(z, x) = z * modulation(x).
    """

    name: str
    d: int = 1
    density: Callable | None = None
    atoms: tuple[tuple[float, float], ...] = ()
    coeff: Callable | None = None
    modulation: Callable | None = None
    drift: Callable | None = None
    support: float = np.inf
    finite_first_moment: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atoms = tuple((float(z), float(w)) for z, w in self.atoms)
        if any(w < 0 for _, w in self.atoms):
            raise ValueError("atom weights must be nonnegative")

    @property
    def state_dependent(self) -> bool:
        return self.coeff is not None or self.modulation is not None

    def h(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.density is None:
            return np.zeros_like(z)
        out = np.where(np.abs(z) <= self.support, self.density(z), 0.0)
        if np.any(out < 0):
            raise ValueError("Levy density must be nonnegative")
        return out

    def c(self, z, x) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        if self.coeff is not None:
            return np.asarray(self.coeff(z, x), dtype=float)
        m = np.ones_like(x) if self.modulation is None else np.asarray(self.modulation(x), dtype=float)
        return z[:, None, None] * m[None, :, :]

    def c_pairs(self, z, x) -> np.ndarray:
        """c(z_i, x_i) for matched rows, shape (N, d)."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        if self.coeff is None:
            m = np.ones_like(x) if self.modulation is None else np.asarray(self.modulation(x), dtype=float)
            return z[:, None] * m
        return np.stack([self.coeff(z[i:i + 1], x[i:i + 1])[0, 0] for i in range(len(z))]).reshape(-1, self.d)

    def unmodulated(self) -> "JumpModel":
        """Same intensity with c(z, x) = z (drops modulation and coefficient)."""
        return JumpModel(self.name, d=self.d, density=self.density, atoms=self.atoms, support=self.support,
                         finite_first_moment=self.finite_first_moment, params=dict(self.params))

    def b(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        if self.drift is None:
            return np.zeros_like(x)
        return np.asarray(self.drift(x), dtype=float).reshape(x.shape)

    def default_probes(self) -> np.ndarray:
        """Probe grid for suprema over x: 65 nodes on [-pi, pi]^d (d <= 2)."""
        axis = np.linspace(-np.pi, np.pi, 65 if self.d == 1 else 17)
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


# ---------------------------------------------------------------------------
# built-in models


def stable1d(alpha: float) -> JumpModel:
    """Symmetric alpha-stable jumps: h(z) = |z|^{-1-alpha}, c = z."""
    if not 0 < alpha < 2:
        raise ValueError("stable index must lie in (0, 2)")
    return JumpModel(f"stable1d({alpha:g})", density=lambda z: np.abs(z) ** (-1.0 - alpha),
                     finite_first_moment=alpha > 1, params={"alpha": alpha})


def one_sided_stable1d(alpha: float) -> JumpModel:
    """Positive jumps only: h(z) = z^{-1-alpha} for z > 0."""
    if not 0 < alpha < 2:
        raise ValueError("stable index must lie in (0, 2)")

    def dens(z):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(z > 0, np.abs(z) ** (-1.0 - alpha), 0.0)

    return JumpModel(f"one_sided_stable1d({alpha:g})", density=dens,
                     finite_first_moment=alpha > 1, params={"alpha": alpha})


def tempered_stable1d(alpha: float, beta: float) -> JumpModel:
    """h(z) = exp(-beta |z|) |z|^{-1-alpha}, c = z."""
    if not 0 < alpha < 2 or beta <= 0:
        raise ValueError("need 0 < alpha < 2 and beta > 0")
    return JumpModel(f"tempered_stable1d({alpha:g},{beta:g})",
                     density=lambda z: np.exp(-beta * np.abs(z)) * np.abs(z) ** (-1.0 - alpha),
                     params={"alpha": alpha, "beta": beta})


def compound_poisson(atoms) -> JumpModel:
    """Finite jump measure made of point masses ``[(z, weight), ...]``."""
    atoms = tuple((float(z), float(w)) for z, w in atoms)
    return JumpModel("compound_poisson", atoms=atoms, params={"atoms": [list(a) for a in atoms]})


def uniform_jumps(radius: float = 1.0, intensity: float = 1.0) -> JumpModel:
    """Lebesgue intensity ``intensity`` on [-radius, radius]."""
    return JumpModel(f"uniform_jumps({radius:g})", density=lambda z: intensity * np.ones_like(z),
                     support=radius, params={"radius": radius, "intensity": intensity})


def modulated(model: JumpModel, modulation: Callable, name: str | None = None) -> JumpModel:
    """Same intensity with c(z, x) = z * modulation(x)."""
    return JumpModel(name or f"{model.name}*m(x)", d=model.d, density=model.density, atoms=model.atoms,
                     modulation=modulation, drift=model.drift, support=model.support,
                     finite_first_moment=model.finite_first_moment, params=dict(model.params))


BUILTINS = {
    "stable1d": stable1d,
    "one_sided_stable1d": one_sided_stable1d,
    "tempered_stable1d": tempered_stable1d,
    "compound_poisson": compound_poisson,
    "uniform_jumps": uniform_jumps,
}


# ---------------------------------------------------------------------------
# truncated moments


def _as_points(model, x):
    return np.asarray(x, dtype=float).reshape(-1, model.d)


def _small(model, fun, r, **kw):
    """int_{0<|z|<=r} fun(z) h(z) dz plus atoms with |z| <= r."""
    outer = min(r, model.support)
    val, err = 0.0, 0.0
    if model.density is not None and outer > 0:
        val, err = radial_integral(lambda z: _times_h(model, fun, z), 0.0, outer, **kw)
    for z0, w in model.atoms:
        if 0 < abs(z0) <= r:
            val = val + w * fun(np.array([z0]))[0]
    return val, err


def _big(model, fun, r, **kw):
    """int_{|z|>r} fun(z) h(z) dz plus atoms with |z| > r."""
    val, err = 0.0, 0.0
    if model.density is not None and r < model.support:
        val, err = radial_integral(lambda z: _times_h(model, fun, z), r, model.support, **kw)
    for z0, w in model.atoms:
        if abs(z0) > r:
            val = val + w * fun(np.array([z0]))[0]
    return val, err


def _times_h(model, fun, z):
    v = np.asarray(fun(z))
    h = model.h(z)
    return v * h.reshape((-1,) + (1,) * (v.ndim - 1))


def small_jump_covariance(model: JumpModel, r: float, x, return_error: bool = False):
    """A_r(x) = int_{|z|<=r} c c^T dmu, one d x d matrix per point of ``x``.

    A single point returns a single matrix. The singular end at z = 0 is
    handled by graded quadrature; a non-integrable singularity raises
    ``DivergentIntegralError``.
    """
    if r <= 0:
        raise ValueError("cutoff radius must be positive")
    pts = _as_points(model, x)

    def fun(z):
        c = model.c(z, pts)
        return np.einsum("zni,znj->znij", c, c)

    val, err = _small(model, fun, r)
    val = np.broadcast_to(val, (len(pts), model.d, model.d)).copy()
    if np.ndim(x) <= 1 and np.size(x) == model.d:
        val = val[0]
    return (val, err) if return_error else val


def rate_epsilon(model: JumpModel, r: float, probes=None) -> float:
    """sup over probe points of int_{|z|<=r} |c(z, x)|^3 dmu."""
    if r <= 0:
        return 0.0
    pts = model.default_probes() if probes is None else _as_points(model, probes)
    val, _ = _small(model, lambda z: np.linalg.norm(model.c(z, pts), axis=-1) ** 3, r)
    return float(np.max(val))


def ellipticity(A) -> float:
    """Infimum over probe points of the smallest eigenvalue of a symmetric matrix field."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        return float(A)
    if A.ndim == 1:
        return float(np.min(A))
    if A.ndim == 2:
        A = A[None]
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - np.swapaxes(A, -1, -2))) > 1e-12 * scale:
        raise ValueError("matrix field is not symmetric")
    return float(np.min(np.linalg.eigvalsh(A)))


def big_jump_mass(model: JumpModel, r: float) -> float:
    """mu({|z| > r}); raises if infinite."""
    val, _ = _big(model, lambda z: np.ones_like(z), r)
    return float(val)


def big_jump_mean(model: JumpModel, r: float, x) -> np.ndarray:
    """int_{|z|>r} c(z, x) dmu, shape (Nx, d); the compensator drift per unit time."""
    pts = _as_points(model, x)
    if not model.finite_first_moment:
        raise QuadratureError(f"{model.name}: int_{{|z|>r}} |c| dmu is not finite")
    val, _ = _big(model, lambda z: model.c(z, pts), r)
    return np.broadcast_to(val, pts.shape).copy()


# ---------------------------------------------------------------------------
# generators


def _jets(f: SampledField, pts, order):
    return {c: f.evaluate(c, pts) for c, _ in count_classes(f.d, order)}


def _taylor(jets, c, lo, hi):
    """sum over lo <= |beta| <= hi of d^beta f * c^beta / beta!; c has shape (..., Np, d)."""
    total = 0.0
    for counts, val in jets.items():
        m = sum(counts)
        if lo <= m <= hi:
            term = val / np.prod([factorial(k) for k in counts])
            for i, k in enumerate(counts):
                if k:
                    term = term * c[..., i] ** k
            total = total + term
    return total


def _compensated(f, pts, jets, c, subtract_second=False):
    """f(x+c) - f(x) - <c, grad f(x)> (minus the quadratic term when asked)."""
    d = f.d
    shifted = pts[None, :, :] + c
    direct = f.evaluate((), shifted) - _taylor(jets, c, 0, 2 if subtract_second else 1)
    series = _taylor(jets, c, 3 if subtract_second else 2, 4)
    small = np.linalg.norm(c, axis=-1) < _TAYLOR_RADIUS
    return np.where(small, series, direct)


def _gradient_hessian(jets, d, n):
    grad = np.zeros((n, d))
    hess = np.zeros((n, d, d))
    for counts, val in jets.items():
        m = sum(counts)
        idx = [i for i, k in enumerate(counts) for _ in range(k)]
        if m == 1:
            grad[:, idx[0]] = val
        elif m == 2:
            hess[:, idx[0], idx[1]] = val
            hess[:, idx[1], idx[0]] = val
    return grad, hess


def apply_generator(model: JumpModel, variant: str, f: SampledField, x, r: float | None = None,
                    covariance=None) -> np.ndarray:
    """Lf(x) (``variant='full'``) or L_r f(x) (``variant='truncated'``, needs ``r``).

    ``f`` must be an analytic field (derivatives at arbitrary points). For the
    truncated variant ``covariance`` replaces the computed A_r (a d x d matrix
    or one matrix per point).
    """
    if not f.is_analytic:
        raise ValueError("the generator needs an analytic field")
    pts = _as_points(model, x)
    jets = _jets(f, pts, 4)
    grad, hess = _gradient_hessian(jets, model.d, len(pts))
    out = np.einsum("ni,ni->n", model.b(pts), grad)
    integrand = lambda z: _compensated(f, pts, jets, model.c(z, pts))
    if variant == "full":
        split = 1.0 if r is None else r
        small, _ = _small(model, integrand, split)
        big, _ = _big(model, integrand, split)
        out = out + small + big
    elif variant == "truncated":
        if r is None or r <= 0:
            raise ValueError("truncated generator needs a positive cutoff r")
        big, _ = _big(model, integrand, r)
        A = small_jump_covariance(model, r, pts) if covariance is None else covariance
        A = np.broadcast_to(np.asarray(A, dtype=float), (len(pts), model.d, model.d)).reshape(len(pts), model.d, model.d)
        out = out + big + 0.5 * np.einsum("nij,nij->n", A, hess)
    else:
        raise ValueError("variant must be 'full' or 'truncated'")
    return out


def small_jump_remainder(model: JumpModel, f: SampledField, x, r: float) -> np.ndarray:
    """(L - L_r) f(x) = int_{|z|<=r} [f(x+c) - f - <c, grad f> - 1/2 <D^2 f c, c>] dmu."""
    pts = _as_points(model, x)
    jets = _jets(f, pts, 4)
    val, _ = _small(model, lambda z: _compensated(f, pts, jets, model.c(z, pts), True), r)
    return np.broadcast_to(val, (len(pts),)).copy()


@dataclass
class DeltaProbe:
    sup: float
    budget: float
    ratio: float


def delta_probe(model: JumpModel, r: float, f: SampledField, probes=None) -> DeltaProbe:
    """Measured sup |Lf - L_r f| against the Taylor budget eps(r) * ||f||_{3,inf}."""
    pts = model.default_probes() if probes is None else _as_points(model, probes)
    sup = float(np.max(np.abs(small_jump_remainder(model, f, pts, r))))
    eps = rate_epsilon(model, r, pts)
    try:
        budget = eps * weighted_norm(f, 3, 0.0, np.inf)
    except TruncationError:
        # unbounded f: the Taylor budget is infinite
        budget = np.inf
    return DeltaProbe(sup, budget, sup / budget if 0 < budget < np.inf else 0.0)


# ---------------------------------------------------------------------------
# ladder and balance


@dataclass
class ApproximationProfile:
    level: int
    r: float
    eps: float
    lam: float
    Lambda: float = 1.0
    A: np.ndarray | None = None


def build_ladder(model: JumpModel, levels, r0: float = 1.0, Lambda=1.0, probes=None) -> list[ApproximationProfile]:
    """Profiles at cutoffs r_n = r0 * 2^{-n}."""
    pts = model.default_probes() if probes is None else _as_points(model, probes)
    out = []
    for n in levels:
        r = r0 * 2.0 ** (-n)
        A = small_jump_covariance(model, r, pts).reshape(len(pts), model.d, model.d)
        lam_n = Lambda(n) if callable(Lambda) else Lambda
        out.append(ApproximationProfile(int(n), r, rate_epsilon(model, r, pts), ellipticity(A), float(lam_n), A))
    _check_ladder(out)
    return out


def ladder_from_arrays(eps, lam, Lambda=None, r=None, levels=None) -> list[ApproximationProfile]:
    eps = np.asarray(eps, dtype=float)
    lam = np.asarray(lam, dtype=float)
    n = len(eps)
    Lambda = np.ones(n) if Lambda is None else np.asarray(Lambda, dtype=float)
    levels = np.arange(n) if levels is None else np.asarray(levels)
    r = 2.0 ** -levels.astype(float) if r is None else np.asarray(r, dtype=float)
    return [ApproximationProfile(int(levels[i]), float(r[i]), float(eps[i]), float(lam[i]), float(Lambda[i]))
            for i in range(n)]


def _check_ladder(ladder):
    for p, q in zip(ladder[:-1], ladder[1:]):
        if not q.r < p.r:
            raise ValueError("cutoff radii must decrease strictly along the ladder")


def ladder_gamma(ladder) -> float:
    """Smallest gamma >= 1 with lam_n <= g lam_{n+1}, Lambda_{n+1} <= g Lambda_n, eps_n <= g eps_{n+1}."""
    g = 1.0
    for p, q in zip(ladder[:-1], ladder[1:]):
        g = max(g, p.lam / q.lam, q.Lambda / p.Lambda)
        if q.eps > 0:
            g = max(g, p.eps / q.eps)
    return g


@dataclass
class BalanceReport:
    phi: np.ndarray
    delta: float
    theta0: float
    verdict: str
    slope: float
    slope_se: float
    tail_sup: np.ndarray
    gamma: float
    growth_ok: bool
    levels: np.ndarray


def balance_functional(ladder, theta0: float, a: float, b: float, delta: float) -> np.ndarray:
    lam = np.array([p.lam for p in ladder])
    if np.any(lam <= 0):
        raise ValueError("ellipticity lambda_n must be positive")
    eps = np.array([p.eps for p in ladder])
    Lam = np.array([p.Lambda for p in ladder])
    return eps * Lam * lam ** (-theta0 * (a + b + delta))


def _fit_slope(levels, values):
    x = np.asarray(levels, dtype=float)
    y = np.asarray(values, dtype=float)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = len(x) - 2
    sxx = np.sum((x - x.mean()) ** 2)
    se = float(np.sqrt(np.sum(resid**2) / dof / sxx)) if dof > 0 and sxx > 0 else 0.0
    return float(coef[0]), se


def balance_report(ladder, theta0: float, a: float = 3.0, b: float = 0.0, delta: float = 0.1,
                   z: float = 2.0, tol: float = 1e-9) -> BalanceReport:
    """Phi_n(delta) along the ladder, its log2-slope per level and the boundedness verdict.

    Bounded when slope + z*se <= tol, unbounded when slope - z*se > tol,
    inconclusive otherwise. Levels with Phi_n = 0 (no jumps to substitute) count
    as bounded.
    """
    if len(ladder) < 3:
        raise ValueError("balance report needs at least three levels")
    levels = np.array([p.level for p in ladder])
    phi = balance_functional(ladder, theta0, a, b, delta)
    gamma = ladder_gamma(ladder)
    growth = bool(np.all(phi[:-1] <= gamma ** (1 + theta0 * (a + b + delta)) * phi[1:] * (1 + 1e-12)))
    tail = np.maximum.accumulate(phi[::-1])[::-1]
    if np.all(phi == 0):
        return BalanceReport(phi, delta, theta0, "bounded", 0.0, 0.0, tail, gamma, True, levels)
    if np.any(phi <= 0):
        raise ValueError("Phi_n must be positive for a log-slope fit")
    slope, se = _fit_slope(levels, np.log2(phi))
    if slope + z * se <= tol:
        verdict = "bounded"
    elif slope - z * se > tol:
        verdict = "unbounded"
    else:
        verdict = "inconclusive"
    return BalanceReport(phi, delta, theta0, verdict, slope, se, tail, gamma, growth, levels)


def max_balanced_delta(ladder, theta0: float, a: float = 3.0, b: float = 0.0) -> float:
    """Largest delta with nonpositive fitted Phi_n(delta) slope (<= 0 means none)."""
    levels = np.array([p.level for p in ladder])
    s_el, _ = _fit_slope(levels, np.log2([p.eps * p.Lambda for p in ladder]))
    s_lam, _ = _fit_slope(levels, np.log2([p.lam for p in ladder]))
    if s_lam >= 0:
        return np.inf if s_el < 0 else -np.inf
    return s_el / (theta0 * s_lam) - (a + b)
