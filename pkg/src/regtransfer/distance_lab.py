"""Lower bounds for the smooth dual distances d_k by explicit test functions.

d_k(mu, nu) = sup |E_mu f - E_nu f| over ||f||_{k,inf} <= 1, where the norm is
the sup of the sum of all derivatives up to order k. A finite dictionary of
functions with certified norms gives a lower bound; for two densities the
exact d_0 (total variation, int |p - q|) is available by quadrature.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np
from scipy.special import eval_hermitenorm

from ._quadrature import composite_gauss_legendre
from .density_lab import KernelDensity
from .fields import Grid, SampledField
from .simulator import SampleCloud

MAX_ORDER = 4
SWEEP_MARGIN = 1e-3


@lru_cache(maxsize=None)
def _profile_sups(kind: str) -> tuple[float, ...]:
    """sup_z |g^{(j)}(z)| for j = 0..MAX_ORDER of a unit-scale profile.

    Found by a dense sweep; the relative margin covers the sweep resolution
    (the maxima are smooth and far from the sweep ends).
    """
    z = np.linspace(-12.0, 12.0, 480001)
    out = []
    for j in range(MAX_ORDER + 1):
        if kind == "gauss":
            vals = eval_hermitenorm(j, z) * np.exp(-0.5 * z * z)
        elif kind == "tanh":
            vals = _tanh_derivative(z, j)
        else:
            raise ValueError(kind)
        out.append(float(np.max(np.abs(vals))) * (1 + SWEEP_MARGIN))
    if kind == "tanh":
        out[0] = 1.0
    return tuple(out)


def _tanh_derivative(z, j):
    # d/dz of polynomials in T = tanh z, using T' = 1 - T^2
    T = np.tanh(z)
    coeffs = np.array([0.0, 1.0])
    for _ in range(j):
        c = np.polynomial.polynomial.polyder(coeffs)
        coeffs = np.polynomial.polynomial.polymul(c, [1.0, 0.0, -1.0])
    return np.polynomial.polynomial.polyval(T, coeffs)


@dataclass(frozen=True)
class TestFunction:
    """Ridge function y -> g((w . y - c) / s) with a certified derivative budget.

    ``sups[j]`` bounds sup_y of the sum over ordered index tuples of length j
    of |d^alpha f|, so ``norm(k) = sum_{j<=k} sups[j]`` bounds ||f||_{k,inf}.
    """

    __test__ = False

    kind: str
    center: float
    width: float
    direction: tuple = (1.0,)
    phase: float = 0.0

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        u = y @ np.asarray(self.direction)
        if self.kind == "trig":
            return np.cos(self.width * u + self.phase)
        z = (u - self.center) / self.width
        if self.kind == "gauss":
            return np.exp(-0.5 * z * z)
        return np.tanh(z)

    @property
    def sups(self) -> tuple[float, ...]:
        w1 = float(np.sum(np.abs(self.direction)))
        if self.kind == "trig":
            return tuple((self.width * w1) ** j for j in range(MAX_ORDER + 1))
        base = _profile_sups(self.kind)
        return tuple(c * (w1 / self.width) ** j for j, c in enumerate(base))

    def norm(self, k: int) -> float:
        if not 0 <= k <= MAX_ORDER:
            raise ValueError(f"k must lie in 0..{MAX_ORDER}")
        return float(sum(self.sups[: k + 1]))

    def label(self) -> str:
        if self.kind == "trig":
            return f"trig(freq={self.width:g},phase={self.phase:.4g},dir={self.direction})"
        return f"{self.kind}(c={self.center:g},s={self.width:g},dir={self.direction})"


@dataclass
class TestFunctionDictionary:
    __test__ = False

    members: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    @classmethod
    def default(cls, d: int = 1, steps: bool = True) -> "TestFunctionDictionary":
        """64 Gaussians, 32 trig waves and (optionally) 26 tanh steps per direction.

        Directions are the coordinate axes, plus the normalised diagonal when d > 1.
        """
        dirs = [tuple(float(v) for v in np.eye(d)[i]) for i in range(d)]
        if d > 1:
            dirs.append((1.0 / d,) * d)
        members = []
        for w in dirs:
            for c, s in product(np.linspace(-4, 4, 16), (0.25, 0.5, 1.0, 2.0)):
                members.append(TestFunction("gauss", float(c), s, w))
            for freq, ph in product((0.5, 1.0, 2.0, 4.0), np.arange(8) * np.pi / 4):
                members.append(TestFunction("trig", 0.0, freq, w, float(ph)))
            if steps:
                for c, s in product(np.linspace(-3, 3, 13), (0.1, 0.5)):
                    members.append(TestFunction("tanh", float(c), s, w))
        return cls(members)

    def certify(self, k: int, grid: Grid | None = None) -> float:
        """Largest swept ||f||_{k,inf} / norm(k) over members (<= 1 when certified).

        Derivatives are taken from the closed forms on a dense 1D sweep along
        each member's direction.
        """
        u = np.linspace(-30, 30, 120001) if grid is None else grid.axes[0]
        worst = 0.0
        for f in self.members:
            w1 = float(np.sum(np.abs(f.direction)))
            total = np.zeros_like(u)
            for j in range(k + 1):
                total += np.abs(_ridge_derivative(f, u, j)) * w1**j
            worst = max(worst, float(np.max(total)) / f.norm(k))
        return worst


def _ridge_derivative(f: TestFunction, u, j):
    if f.kind == "trig":
        return f.width**j * np.cos(f.width * u + f.phase + j * np.pi / 2)
    z = (u - f.center) / f.width
    if f.kind == "gauss":
        return (-1) ** j * eval_hermitenorm(j, z) * np.exp(-0.5 * z * z) / f.width**j
    return _tanh_derivative(z, j) / f.width**j


def _expectations(measure, members) -> np.ndarray:
    """E_mu f for every member: a Monte Carlo mean or a quadrature."""
    if isinstance(measure, SampleCloud):
        pts = measure.endpoints
        return np.array([np.mean(f(pts)) for f in members])
    if isinstance(measure, KernelDensity):
        c, s = float(measure.center(measure.x)), measure.scale()
        y, w = composite_gauss_legendre(c - 14 * s, c + 14 * s, 400, 12)
        pw = measure.pdf(y) * w
        return np.array([float(np.dot(f(y), pw)) for f in members])
    pts = np.asarray(measure, dtype=float)
    if pts.ndim in (1, 2) and len(pts):
        return np.array([np.mean(f(pts)) for f in members])
    raise TypeError("measure must be a SampleCloud, a KernelDensity or an array of samples")


@dataclass
class DistanceBound:
    k: int
    lower: float
    argmax: str
    oracle_upper: float | None = None


def dk_lower(mu, nu, k: int, dictionary: TestFunctionDictionary | None = None) -> DistanceBound:
    """max over the dictionary of |E_mu f - E_nu f| / ||f||_{k,inf}."""
    if dictionary is None:
        dictionary = TestFunctionDictionary.default(_dim(mu))
    if len(dictionary) == 0:
        raise ValueError("empty test-function dictionary")
    diff = np.abs(_expectations(mu, dictionary.members) - _expectations(nu, dictionary.members))
    norms = np.array([f.norm(k) for f in dictionary.members])
    ratios = diff / norms
    i = int(np.argmax(ratios))
    upper = None
    if isinstance(mu, KernelDensity) and isinstance(nu, KernelDensity):
        upper = dk_oracle_tv(mu, nu)
    return DistanceBound(k, float(ratios[i]), dictionary.members[i].label(), upper)


def _dim(measure) -> int:
    if isinstance(measure, SampleCloud):
        return measure.d
    if isinstance(measure, KernelDensity):
        return 1
    a = np.asarray(measure)
    return 1 if a.ndim == 1 else a.shape[1]


def _common_grid(p: KernelDensity, q: KernelDensity, n: int = 40001) -> Grid:
    lo = min(float(m.center(m.x)) - 14 * m.scale() for m in (p, q))
    hi = max(float(m.center(m.x)) + 14 * m.scale() for m in (p, q))
    return Grid((lo,), (hi,), (n,))


def dk_oracle_tv(p, q, grid: Grid | None = None) -> float:
    """int |p - q| by trapezoid on a shared grid.

    ``p`` and ``q`` are KernelDensity objects (evaluated on ``grid``, or on a
    grid covering both when omitted) or SampledFields on the same grid.
    """
    if isinstance(p, SampledField) or isinstance(q, SampledField):
        if not (isinstance(p, SampledField) and isinstance(q, SampledField)):
            raise ValueError("mix of sampled and analytic densities; evaluate both on one grid")
        if p.grid != q.grid:
            raise ValueError("densities live on different grids")
        return p.grid.integrate(np.abs(p.values - q.values))
    if grid is None:
        grid = _common_grid(p, q)
    y = grid.axes[0]
    return grid.integrate(np.abs(p.pdf(y) - q.pdf(y)))


def distance_table(mu, nu, ks=(0, 1, 2), dictionary=None) -> list[DistanceBound]:
    """Lower bounds for each k; the upper bound d_k <= d_0 uses the oracle when available."""
    dictionary = dictionary or TestFunctionDictionary.default(_dim(mu))
    rows = [dk_lower(mu, nu, k, dictionary) for k in ks]
    for r in rows:
        if r.oracle_upper is None:
            r.oracle_upper = float("nan")
    return rows


def rows_to_csv(rows: list[DistanceBound]) -> str:
    buf = io.StringIO()
    buf.write("k,lower,oracle_upper\n")
    for r in rows:
        up = r.oracle_upper if r.oracle_upper is not None else float("nan")
        buf.write(f"{r.k},{r.lower:.17g},{up:.17g}\n")
    return buf.getvalue()
