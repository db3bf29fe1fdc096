"""Interpolation functional and the arithmetic of the regularity criterion.

A measure mu approximated by measures mu_n with smooth densities f_n has a
Sobolev density as soon as the distances d_k(mu, mu_n) decay faster than the
norms of f_n blow up. Everything here is reported modulo the universal
interpolation constant C*, carried as a factor 1.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DivergentBoundError, ScheduleError

B_TERM_FLOOR = 1e-15
B_MAX_TERMS = 10_000


def conjugate(p: float) -> float:
    if p <= 1:
        raise ValueError("p must exceed 1")
    return 1.0 if math.isinf(p) else p / (p - 1.0)


@dataclass
class InterpolationBudget:
    k: float
    q: float
    h: float
    p: float
    theta: np.ndarray
    D: int = 2
    Theta: float | None = None

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("h must be at least 1")
        self.p_star = conjugate(self.p)
        th = np.asarray(self.theta, dtype=float)
        if th.ndim != 1 or len(th) < 2:
            raise ValueError("theta needs at least two entries")
        if np.any(th < 1) or np.any(np.diff(th) <= 0):
            raise ValueError("theta must be >= 1 and strictly increasing")
        self.theta = th
        measured = float(np.max(th[1:] / th[:-1]))
        if self.Theta is None:
            self.Theta = measured
        elif measured > self.Theta * (1 + 1e-12):
            raise ValueError(f"theta(n+1) <= Theta theta(n) fails: ratio {measured:.6g} > {self.Theta:.6g}")

    @property
    def exponent(self) -> float:
        """k + q + D/p*."""
        return self.k + self.q + self.D / self.p_star

    @property
    def rho(self) -> float:
        return self.exponent / (2 * self.h)


@dataclass
class PiValue:
    dk_sum: float
    norm_sum: float
    dk_tail: float
    norm_tail: float

    @property
    def value(self) -> float:
        """Upper bound for the full series (partial sums plus tails)."""
        return self.dk_sum + self.dk_tail + self.norm_sum + self.norm_tail

    @property
    def sobolev_bound(self) -> str:
        return f"C* x {self.value:.6g}"


def _geometric_tail(last_term: float, ratio: float | None, what: str) -> float:
    if ratio is None or last_term == 0:
        return 0.0
    if ratio >= 1:
        raise DivergentBoundError(f"{what} series does not converge: weighted term ratio {ratio:.4g} >= 1")
    return last_term * ratio / (1 - ratio)


def pi_functional(dk_seq, norm_seq, k, q, h, p, D, dk_ratio=None, norm_ratio=None) -> PiValue:
    """sum 2^{n(k+q+D/p*)} d_k(n) + sum 2^{-2nh} ||f_n||, n = 0..N-1.

    ``dk_ratio`` and ``norm_ratio`` are geometric tail models for the raw
    sequences (x_{n+1} <= ratio x_n beyond the data); None means the data is
    the whole sequence.
    """
    d = np.asarray(dk_seq, dtype=float)
    f = np.asarray(norm_seq, dtype=float)
    if d.shape != f.shape or d.ndim != 1:
        raise ValueError("dk_seq and norm_seq must be 1D of equal length")
    if np.any(d < 0) or np.any(f < 0) or not (np.all(np.isfinite(d)) and np.all(np.isfinite(f))):
        raise ValueError("sequences must be finite and nonnegative")
    e = k + q + D / conjugate(p)
    n = np.arange(len(d), dtype=float)
    dk_terms = 2.0 ** (n * e) * d
    norm_terms = 2.0 ** (-2 * h * n) * f
    dk_tail = _geometric_tail(dk_terms[-1] if len(d) else 0.0,
                              None if dk_ratio is None else 2.0**e * dk_ratio, "distance")
    norm_tail = _geometric_tail(norm_terms[-1] if len(f) else 0.0,
                                None if norm_ratio is None else 2.0 ** (-2 * h) * norm_ratio, "norm")
    return PiValue(float(dk_terms.sum()), float(norm_terms.sum()), dk_tail, norm_tail)


def l_delta(delta: float, mode: str = "eventual") -> int:
    """Smallest l with 2^{l delta/(1+delta)} >= l.

    ``literal`` takes the plain minimum (always 1). ``eventual`` requires the
    inequality for every m >= l, which is what the schedule bound needs.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    c = delta / (1 + delta)
    ok = lambda m: m * c >= math.log2(m)
    if mode == "literal":
        return 1
    if mode != "eventual":
        raise ValueError(f"unknown mode {mode!r}")
    # m c - log2 m decreases up to m0 = 1/(c ln 2) and increases after it
    m = max(1, math.ceil(1 / (c * math.log(2))))
    while not ok(m):
        m += 1
    while m > 1 and ok(m - 1):
        m -= 1
    return m


def schedule_target(l: int, h: float) -> float:
    return 2.0 ** (2 * h * l) / l**2


@dataclass
class RegBound:
    n_of_l: dict
    l_star: int
    l_delta: int
    n_star: int
    A: float = float("nan")
    B: float = float("nan")
    B_remainder: float = float("nan")
    C: float = float("nan")
    total: float = float("nan")
    checks: dict = field(default_factory=dict)

    def schedule_rows(self, theta) -> list[tuple]:
        rows = []
        for l, n in sorted(self.n_of_l.items()):
            lhs = theta[n - 1] if n > 0 else float("nan")
            rows.append((l, n, float(lhs), float(theta[n])))
        return rows

    def schedule_csv(self, theta) -> str:
        buf = io.StringIO()
        buf.write("l,n_l,lhs,rhs\n")
        for l, n, lhs, rhs in self.schedule_rows(theta):
            buf.write(f"{l},{n},{lhs:.17g},{rhs:.17g}\n")
        return buf.getvalue()

    def bound_csv(self) -> str:
        return f"A,B,C_hn,total\n{self.A:.17g},{self.B:.17g},{self.C:.17g},{self.total:.17g}\n"


def reg_schedule(budget: InterpolationBudget, n_star: int, delta: float = 0.1,
                 l_mode: str = "eventual", l_max: int | None = None) -> RegBound:
    """Tables n(l) = min{n : theta(n) >= 2^{2hl}/l^2}, l* and l(delta), with the chain checks."""
    th = budget.theta
    h = budget.h
    if not 0 <= n_star < len(th):
        raise ScheduleError(f"n* = {n_star} outside the theta sequence (length {len(th)})")
    l_star = 1
    while schedule_target(l_star, h) < th[n_star]:
        l_star += 1
    if l_max is None:
        l_max = l_star
        while schedule_target(l_max + 1, h) <= th[-1]:
            l_max += 1
    table = {}
    for l in range(1, l_max + 1):
        T = schedule_target(l, h)
        hit = np.nonzero(th >= T)[0]
        if len(hit) == 0:
            raise ScheduleError(f"theta sequence exhausted: no n with theta(n) >= {T:.6g} (l = {l})")
        n = int(hit[0])
        table[l] = n
        upper_ok = T <= th[n]
        # the Theta link holds by construction of Theta; allow its rounding only
        lower_ok = n == 0 or (th[n - 1] < T and th[n] <= budget.Theta * th[n - 1] * (1 + 1e-15))
        assert upper_ok and lower_ok, f"schedule chain theta(n(l)-1) < target <= theta(n(l)) fails at l = {l}"
    assert table[l_star] >= n_star, "n(l*) < n*"
    ld = l_delta(delta, l_mode)
    eps_d = h * delta / (1 + delta)
    lhs14 = 2 * (h - eps_d) * l_star
    rhs14 = 2 * h * ld + math.log2(th[n_star])
    checks = {"reg13": True, "n_l_star_ge_n_star": True, "reg14": lhs14 <= rhs14,
              "reg14_log2_lhs": lhs14, "reg14_log2_rhs": rhs14}
    if l_mode == "eventual":
        assert checks["reg14"], "l* bound 2^{2(h-eps)l*} <= 2^{2h l(delta)} theta(n*) fails"
    return RegBound(table, l_star, ld, n_star, checks=checks)


def a_term(mass: float, l_of_delta: int, delta: float, exponent: float) -> float:
    """|mu| 2^{l(delta)(1+delta)(q+k+D/p*)}."""
    return float(mass * 2.0 ** (l_of_delta * (1 + delta) * exponent))


def b_term(epsilon: float, exponent: float) -> tuple[float, float]:
    """sum_{l>=1} l^{2(exponent+eps)} / 2^{2 eps l} and a bound on the neglected tail.

    Summed until the terms decay geometrically and drop below 1e-15, or
    10^4 terms; the remainder uses the (decreasing) term ratio at the cut.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pw = 2 * (exponent + epsilon)
    log_term = lambda l: pw * math.log(l) - 2 * epsilon * l * math.log(2)
    ratio = lambda l: math.exp(log_term(l + 1) - log_term(l))
    terms = []
    for l in range(1, B_MAX_TERMS + 1):
        t = math.exp(log_term(l))
        terms.append(t)
        if ratio(l) < 1 and t < B_TERM_FLOOR:
            break
    total = math.fsum(terms)
    r = ratio(l)
    if r >= 1:
        raise DivergentBoundError("B(epsilon) terms still growing at the truncation point")
    return total, terms[-1] * r / (1 - r)


def c_term(budget: InterpolationBudget, dk_bounds, n_star: int, epsilon: float, tail_points: int = 4) -> float:
    """sup_{n>=n*} d_k(n) theta(n)^{rho_h + eps} over the supplied levels.

    The sup over all n is finite only if the weighted sequence stops growing;
    a positive least-squares log-slope over the last levels is reported as a
    divergent bound.
    """
    d = np.asarray(dk_bounds, dtype=float)
    if len(d) != len(budget.theta):
        raise ValueError("dk_bounds must align with theta")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("dk_bounds must be finite and nonnegative")
    g = d[n_star:] * budget.theta[n_star:] ** (budget.rho + epsilon)
    if not np.all(np.isfinite(g)):
        raise DivergentBoundError("weighted distance overflows")
    if np.all(g == 0):
        return 0.0
    pos = g > 0
    if np.count_nonzero(pos) >= 2:
        idx = np.nonzero(pos)[0][-tail_points:]
        if len(idx) >= 2:
            slope = np.polyfit(idx.astype(float), np.log2(g[idx]), 1)[0]
            if slope > 1e-9:
                raise DivergentBoundError(
                    f"d_k(n) theta(n)^(rho+eps) grows (log2-slope {slope:.4g} per level); the sup is infinite")
    return float(g.max())


def reg_bound(budget: InterpolationBudget, mu_mass: float, dk_bounds, n_star: int = 0,
              delta: float = 0.1, epsilon: float = 0.1, l_mode: str = "eventual") -> RegBound:
    """Theta + A theta(n*)^{rho(1+delta)} + B C, modulo C*."""
    res = reg_schedule(budget, n_star, delta, l_mode)
    e = budget.exponent
    res.A = a_term(mu_mass, res.l_delta, delta, e)
    res.B, res.B_remainder = b_term(epsilon, e)
    res.C = c_term(budget, dk_bounds, n_star, epsilon)
    res.total = float(budget.Theta + res.A * budget.theta[n_star] ** (budget.rho * (1 + delta))
                      + (res.B + res.B_remainder) * res.C)
    return res


def _rational(v) -> Fraction:
    # shortest decimal repr, so 0.1 means 1/10 rather than its binary neighbour
    return Fraction(repr(float(v))) if isinstance(v, float) else Fraction(v)


def compute_m0(q: float, d: float, p_star: float, delta_star: float) -> int:
    """1 + floor((q + 2d/p*)/delta*), evaluated in exact rational arithmetic."""
    if delta_star <= 0:
        raise ValueError("delta* must be positive")
    if math.isinf(delta_star):
        return 1
    if math.isinf(p_star):
        x = Fraction(_rational(q)) / _rational(delta_star)
    else:
        x = (_rational(q) + 2 * _rational(d) / _rational(p_star)) / _rational(delta_star)
    return 1 + math.floor(x)


@dataclass(frozen=True)
class ImprovedExponent:
    theta1: float
    exponent: float


def improve_exponent(mode: str, theta0: float, q: float, D: float, p_star: float,
                     delta_or_epsilon: float) -> ImprovedExponent:
    """Blow-up exponent theta0 (q + theta1) with the improved theta1.

    ``lemma_reg``: theta1 = D/p* + delta. ``corollary``: theta1 = 2D + eps.
    """
    if theta0 <= 0:
        raise ValueError("theta0 must be positive")
    if mode == "lemma_reg":
        t1 = D / p_star + delta_or_epsilon
    elif mode == "corollary":
        t1 = 2 * D + delta_or_epsilon
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ImprovedExponent(float(t1), float(theta0 * (q + t1)))


# ---------------------------------------------------------------------------
# end-to-end: ladder -> theta(n), d(n) -> bound


@dataclass
class PipelineResult:
    finite: bool
    verdict: str
    m0: int
    h: int
    rho: float
    theta: np.ndarray
    dk: np.ndarray
    bound: RegBound | None
    reason: str = ""


def choose_h(m0: int, q: float, d: int, p_star: float, a: float, b: float, delta_star: float,
             theta1: float, h_max: int = 10_000) -> int:
    """Smallest integer h >= 1 with omega_2(h) > 0 (the remainder beats the blow-up)."""
    k = (a + b) * m0
    for h in range(1, h_max + 1):
        rho = (k + q + 2 * d / p_star) / (2 * h)
        omega2 = (a + b + delta_star) * m0 - rho * (q + 2 * h + d + 2 * theta1)
        if omega2 > 0:
            return h
    raise ValueError("no admissible h: delta* m0 must exceed q + 2d/p*")


def transfer_pipeline(ladder, theta0: float, a: float = 3.0, b: float = 0.0, delta_star: float = 1.0,
                      q: int = 0, d: int = 1, p: float = 2.0, theta1: float = 1.0, t: float = 1.0,
                      h: int | None = None, n_star: int = 0, delta: float = 0.1,
                      epsilon: float = 0.1, mass: float = 1.0) -> PipelineResult:
    """Feed ladder-derived theta(n) and d(n) into the bound.

    theta(n) = t^{-theta0 xi1} lambda_n^{-theta0 omega1} Phi_n(0)^{m0} with
    omega1 = q + 2h + d + 2 theta1 and xi1 = omega1 + (a+b) m0, normalised so
    theta(0) = 1; d(n) = (Lambda_n eps_n)^{m0}. Measures live on R^d x R^d,
    so the dimension entering rho_h is 2d.
    """
    from .jump_models import balance_functional, balance_report

    p_star = conjugate(p)
    m0 = compute_m0(q, d, p_star, delta_star)
    if h is None:
        h = choose_h(m0, q, d, p_star, a, b, delta_star, theta1)
    rep = balance_report(ladder, theta0, a, b, delta_star)
    lam = np.array([pt.lam for pt in ladder])
    el = np.array([pt.eps * pt.Lambda for pt in ladder])
    phi0 = balance_functional(ladder, theta0, a, b, 0.0)
    omega1 = q + 2 * h + d + 2 * theta1
    xi1 = omega1 + (a + b) * m0
    log_raw = (-theta0 * xi1 * np.log(t) - theta0 * omega1 * np.log(lam) + m0 * np.log(phi0))
    theta = np.exp(log_raw - log_raw[0])
    dk = el**m0
    budget_kw = dict(k=(a + b) * m0, q=q, h=h, p=p, D=2 * d)
    try:
        budget = InterpolationBudget(theta=theta, **budget_kw)
    except ValueError as exc:
        return PipelineResult(False, rep.verdict, m0, h, float("nan"), theta, dk, None, str(exc))
    try:
        res = reg_bound(budget, mass, dk, n_star, delta, epsilon)
    except DivergentBoundError as exc:
        return PipelineResult(False, rep.verdict, m0, h, budget.rho, theta, dk, None, str(exc))
    return PipelineResult(bool(np.isfinite(res.total)), rep.verdict, m0, h, budget.rho, theta, dk, res)


def ladder_matrix():
    """Two balanced and two unbalanced ladders with their theta0 (name, ladder, theta0)."""
    from .jump_models import build_ladder, ladder_from_arrays, stable1d

    theta0, a, b = 0.5, 3.0, 0.0
    lam = 2.0 ** -np.arange(12.0)
    return [
        ("stable1.5-theta0.5", build_ladder(stable1d(1.5), range(12)), 0.5),
        ("synthetic-balanced", ladder_from_arrays(lam ** (theta0 * (a + b + 2.0)), lam), theta0),
        ("stable1.5-theta2", build_ladder(stable1d(1.5), range(12)), 2.0),
        ("synthetic-unbalanced", ladder_from_arrays(lam ** (theta0 * (a + b)), lam), theta0),
    ]
