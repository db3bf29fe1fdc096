"""Monte Carlo clouds for the small-jump substituted process and the Poisson-perturbed semigroup.

Each path draws from streams addressed by (seed, path index, step, channel),
so results do not depend on how paths are split across workers.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtri
from scipy.stats import poisson

from . import _rng
from ._quadrature import gauss_legendre, radial_integral
from .errors import QuadratureError
from .jump_models import ApproximationProfile, JumpModel, big_jump_mass, big_jump_mean, small_jump_covariance

COMPENSATION_MODES = ("auto", "compensated", "none")


@dataclass
class SimConfig:
    """Time horizon ``t``, Euler step ``dt``, ``N`` paths and a 64-bit ``seed``.

    ``compensation`` is ``auto`` (add the big-jump compensator drift when the
    model flags a finite first moment), ``compensated`` (require it) or
    ``none``. ``chunk`` fixes the work unit; ``workers`` only sets parallelism.
    """

    t: float = 1.0
    dt: float = 0.01
    N: int = 10_000
    seed: int = 0
    compensation: str = "auto"
    knots: int = 4096
    workers: int = 1
    chunk: int = 8192

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.t < 0:
            raise ValueError("time horizon must be nonnegative")
        ratio = self.t / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"t/dt = {ratio!r} is not an integer")
        if self.compensation not in COMPENSATION_MODES:
            raise ValueError(f"compensation must be one of {COMPENSATION_MODES}")
        if self.workers < 1 or self.chunk < 1:
            raise ValueError("workers and chunk must be positive")

    @property
    def steps(self) -> int:
        return int(round(self.t / self.dt))


@dataclass
class SampleCloud:
    endpoints: np.ndarray
    x0: np.ndarray
    t: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.endpoints = np.asarray(self.endpoints, dtype=float)
        if self.endpoints.ndim == 1:
            self.endpoints = self.endpoints[:, None]
        if not np.all(np.isfinite(self.endpoints)):
            raise ValueError("cloud contains non-finite endpoints")

    @property
    def N(self) -> int:
        return len(self.endpoints)

    @property
    def d(self) -> int:
        return self.endpoints.shape[1]

    def to_csv(self, path=None) -> str:
        """``path_index,x1..xd`` rows, ``%.17g`` floats, LF endings."""
        buf = io.StringIO()
        buf.write("path_index," + ",".join(f"x{i + 1}" for i in range(self.d)) + "\n")
        for i, row in enumerate(self.endpoints):
            buf.write(f"{i}," + ",".join(f"{v:.17g}" for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="\n") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# base samplers for the perturbed semigroup


@dataclass
class BrownianBase:
    """Exact Brownian transition with variance ``sigma2`` per unit time."""

    sigma2: float = 1.0
    d: int = 1

    def step(self, x, dt, z):
        return x + np.sqrt(self.sigma2 * dt)[..., None] * z


@dataclass
class OUBase:
    """Exact transition of dX = -theta X dt + sigma dW."""

    theta: float = 1.0
    sigma2: float = 1.0
    d: int = 1

    def step(self, x, dt, z):
        decay = np.exp(-self.theta * dt)[..., None]
        var = self.sigma2 * (-np.expm1(-2 * self.theta * dt)) / (2 * self.theta)
        return x * decay + np.sqrt(var)[..., None] * z


def normal_marks(scale: float = 1.0, d: int = 1) -> Callable:
    """Mark sampler for N(0, scale^2 I_d) marks from uniforms of shape (M, d)."""
    return lambda u: scale * ndtri(u)


@dataclass
class PerturbationSpec:
    """Rate ``rate`` Poisson jumps applying ``x -> phi(z, x)`` with marks ``z = marks(u)``.

    ``marks`` maps uniforms of shape (M, mark_dim) to marks of the same
    leading shape; ``phi(z, x)`` acts row-wise. ``base`` moves the cloud in
    between jump times.
    """

    rate: float
    phi: Callable
    marks: Callable = field(default_factory=normal_marks)
    base: object = field(default_factory=BrownianBase)
    mark_dim: int = 1
    phi_derivative: Callable | None = None

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("Poisson rate must be nonnegative")


# ---------------------------------------------------------------------------
# big-jump mark law


class BigJumpSampler:
    """Inverse-CDF sampler for the normalised restriction of the intensity to |z| > r.

    Each side of the continuous part is tabulated on ``knots`` geometric nodes
    and inverted by monotone cubic interpolation; atoms are sampled exactly.
    """

    def __init__(self, model: JumpModel, r: float, knots: int = 4096, tail_rtol: float = 1e-12):
        self.model = model
        self.r = r
        self.mass = big_jump_mass(model, r)
        self.segments = []  # (kind, mass, payload)
        for sign in (-1.0, 1.0):
            table = self._side(sign, knots, tail_rtol)
            if table is not None:
                self.segments.append(("cont", table[0], (sign, table[1])))
        for z0, w in model.atoms:
            if abs(z0) > r and w > 0:
                self.segments.append(("atom", w, z0))
        masses = np.array([s[1] for s in self.segments])
        self.cum = np.concatenate([[0.0], np.cumsum(masses)])

    def _side(self, sign, knots, tail_rtol):
        m = self.model
        if m.density is None or self.r >= m.support:
            return None
        side = lambda z: m.h(sign * np.abs(z)) * (z > 0)
        total, _ = radial_integral(side, self.r, m.support)
        total = float(total)
        if total <= 0:
            return None
        top = m.support
        if np.isinf(top):
            top = 2.0 * self.r
            while top < self.r * 2.0**60:
                rest, _ = radial_integral(side, top, np.inf)
                if float(rest) <= tail_rtol * total:
                    break
                top *= 2.0
        z = self.r * (top / self.r) ** np.linspace(0.0, 1.0, knots)
        u, w = np.polynomial.legendre.leggauss(8)
        mid = 0.5 * (z[1:] + z[:-1])
        half = 0.5 * np.diff(z)
        nodes = mid[:, None] + half[:, None] * u
        pieces = np.sum(side(nodes.ravel()).reshape(nodes.shape) * w, axis=1) * half
        cdf = np.concatenate([[0.0], np.cumsum(pieces)])
        cdf /= cdf[-1]
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        return total, PchipInterpolator(cdf[keep], z[keep])

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Marks for uniforms ``u`` in (0, 1)."""
        u = np.asarray(u, dtype=float)
        v = u * self.cum[-1]
        seg = np.clip(np.searchsorted(self.cum, v, side="right") - 1, 0, len(self.segments) - 1)
        out = np.empty_like(u)
        for k, (kind, mass, payload) in enumerate(self.segments):
            sel = seg == k
            if not np.any(sel):
                continue
            if kind == "atom":
                out[sel] = payload
            else:
                sign, inv = payload
                frac = np.clip((v[sel] - self.cum[k]) / mass, 0.0, 1.0)
                out[sel] = sign * inv(frac)
        return out


# ---------------------------------------------------------------------------
# covariance and compensator fields


def _fixed_rule(model, lo, hi, order=12, panels=48):
    """Tensor GL nodes/weights (both signs, weights include h) on lo < |z| <= hi."""
    if lo == 0:
        edges = hi * 2.0 ** -np.arange(panels + 1.0)[::-1]
        edges[0] = 0.0
    else:
        top = min(hi, lo * 2.0**panels)
        edges = lo * (top / lo) ** np.linspace(0, 1, panels + 1)
    zs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        x, w = gauss_legendre(a, b, order)
        zs.append(np.concatenate([x, -x]))
        ws.append(np.concatenate([w, w]))
    z = np.concatenate(zs)
    w = np.concatenate(ws) * model.h(z)
    atoms = [(z0, w0) for z0, w0 in model.atoms if lo < abs(z0) <= hi or (lo == 0 and 0 < abs(z0) <= hi)]
    if atoms:
        z = np.concatenate([z, [a[0] for a in atoms]])
        w = np.concatenate([w, [a[1] for a in atoms]])
    return z, w


def _sqrt_psd(A, floor):
    vals, vecs = np.linalg.eigh(A)
    vals = np.maximum(vals, floor)
    return vecs * np.sqrt(vals)[..., None, :]


class _Dynamics:
    """Per-point drift, diffusion root and compensator for one cutoff radius."""

    def __init__(self, model, r, x0, cfg, covariance=None, lam=None):
        self.model = model
        self.r = r
        d = model.d
        self.const_root = None
        self.cov_fn = None
        floor = 1e-12 * (lam if lam else 0.0)
        self.floor = floor
        if covariance is not None:
            if callable(covariance):
                self.cov_fn = covariance
            else:
                A = np.broadcast_to(np.asarray(covariance, dtype=float), (d, d))
                self.const_root = _sqrt_psd(A, floor)
        elif r is None or r <= 0:
            self.const_root = np.zeros((d, d))
        elif model.coeff is None:
            A0 = small_jump_covariance(model.unmodulated(), r, np.zeros(d))
            A0 = np.asarray(A0, dtype=float).reshape(d, d)
            if model.modulation is None:
                self.const_root = _sqrt_psd(A0, floor)
            else:
                self.cov_fn = lambda x: np.einsum("ni,nj->nij", model.modulation(x), model.modulation(x)) * A0
        else:
            z, w = _fixed_rule(model, 0.0, r)
            self.cov_fn = lambda x: np.einsum("z,zni,znj->nij", w, model.c(z, x), model.c(z, x))

        self.big = None
        self.comp = None
        if r is not None and r > 0:
            mass = big_jump_mass(model, r)
            if not np.isfinite(mass):
                raise QuadratureError("big-jump intensity is infinite")
            if mass > 0:
                self.big = BigJumpSampler(model, r, cfg.knots)
            mode = cfg.compensation
            compensate = mode == "compensated" or (mode == "auto" and model.finite_first_moment)
            if mode == "compensated" and not model.finite_first_moment:
                raise QuadratureError(f"{model.name}: big-jump compensator is not integrable")
            if compensate and mass > 0:
                if model.coeff is None:
                    m0 = big_jump_mean(model.unmodulated(), r, np.zeros(d))[0]
                    if model.modulation is None:
                        self.comp = lambda x, m0=m0: np.broadcast_to(m0, x.shape)
                    else:
                        self.comp = lambda x, m0=m0: model.modulation(x) * m0
                else:
                    z, w = _fixed_rule(model, r, model.support if np.isfinite(model.support) else r * 2.0**48)
                    self.comp = lambda x: np.einsum("z,zni->ni", w, model.c(z, x))

    def diffuse(self, x, g):
        if self.const_root is not None:
            return g @ self.const_root.T
        root = _sqrt_psd(self.cov_fn(x), self.floor)
        return np.einsum("nij,nj->ni", root, g)


def _run_chunks(N, cfg, fn):
    starts = list(range(0, N, cfg.chunk))
    jobs = [np.arange(s, min(N, s + cfg.chunk)) for s in starts]
    if cfg.workers == 1 or len(jobs) == 1:
        parts = [fn(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(fn, jobs))
    return np.concatenate(parts, axis=0)


def _poisson_counts(u, mean):
    return poisson.ppf(u, mean).astype(np.int64)


def simulate_approx_paths(model: JumpModel, profile, x0, cfg: SimConfig, covariance=None) -> SampleCloud:
    """Euler scheme for the generator with small jumps replaced by a Gaussian term.

    ``profile`` is an ApproximationProfile or a level n (cutoff 2^-n). Per
    step: drift, Gaussian increment with covariance A_r(x) dt, Poisson many
    big jumps c(Z, x) with Z drawn from the normalised big-jump law, and the
    compensator drift when enabled. ``covariance`` overrides A_r (a constant
    matrix or a callable on points).
    """
    if isinstance(profile, ApproximationProfile):
        level, r, lam = profile.level, profile.r, profile.lam
    elif profile is None:
        level, r, lam = None, None, None
    else:
        level, r, lam = int(profile), 2.0 ** -int(profile), None
    d = model.d
    x0 = np.asarray(x0, dtype=float).reshape(d)
    dyn = _Dynamics(model, r, x0, cfg, covariance, lam)
    steps, dt = cfg.steps, cfg.dt
    rate = dyn.big.mass * dt if dyn.big is not None else 0.0

    def run(paths):
        x = np.tile(x0, (len(paths), 1))
        for s in range(steps):
            inc = model.b(x) * dt
            g = _rng.normals(cfg.seed, paths, s, _rng.GAUSS, d)
            inc = inc + np.sqrt(dt) * dyn.diffuse(x, g)
            if dyn.comp is not None:
                inc = inc - dyn.comp(x) * dt
            if dyn.big is not None:
                counts = _poisson_counts(_rng.uniforms(cfg.seed, paths, s, _rng.POISSON)[:, 0], rate)
                kmax = int(counts.max())
                if kmax:
                    u = _rng.uniform_block(cfg.seed, paths, s, _rng.MARK, kmax)
                    for j in range(kmax):
                        hit = np.nonzero(counts > j)[0]
                        inc[hit] += model.c_pairs(dyn.big.sample(u[hit, j]), x[hit])
            x = x + inc
        return x

    ends = _run_chunks(cfg.N, cfg, run)
    prov = {"kind": "approx", "model": model.name, "level": level, "r": r, "seed": int(cfg.seed)}
    return SampleCloud(ends, x0, cfg.t, prov)


def simulate_perturbed(spec: PerturbationSpec, x0, cfg: SimConfig) -> SampleCloud:
    """Base semigroup interleaved with jump maps ``x -> phi(Z_k, x)`` at Poisson times on [0, t].

    Per path the number of jumps, the ordered jump times and the marks come
    from separate channels; the base sampler moves the path exactly between
    consecutive times and the map is applied at each jump time.
    """
    base = spec.base
    d = getattr(base, "d", 1)
    x0 = np.asarray(x0, dtype=float).reshape(d)
    t = cfg.t

    def run(paths):
        n = len(paths)
        x = np.tile(x0, (n, 1))
        if spec.rate > 0 and t > 0:
            counts = _poisson_counts(_rng.uniforms(cfg.seed, paths, 0, _rng.POISSON)[:, 0], spec.rate * t)
        else:
            counts = np.zeros(n, dtype=np.int64)
        kmax = int(counts.max()) if n else 0
        if kmax:
            times = _rng.uniform_block(cfg.seed, paths, 0, _rng.TIMES, kmax) * t
            times[np.arange(kmax)[None, :] >= counts[:, None]] = np.inf
            times.sort(axis=1)
        else:
            times = np.full((n, 0), np.inf)
        now = np.zeros(n)
        for k in range(kmax + 1):
            nxt = np.minimum(times[:, k], t) if k < kmax else np.full(n, t)
            z = _rng.normals(cfg.seed, paths, k, _rng.BASE, d)
            dt = nxt - now
            x = base.step(x, dt, z)
            now = nxt
            if k < kmax:
                hit = np.nonzero(counts > k)[0]
                if len(hit):
                    u = _rng.uniform_block(cfg.seed, paths[hit], k, _rng.MARK, spec.mark_dim)
                    x[hit] = spec.phi(spec.marks(u), x[hit])
        return x

    ends = _run_chunks(cfg.N, cfg, run)
    prov = {"kind": "perturbed", "rate": spec.rate, "seed": int(cfg.seed)}
    return SampleCloud(ends, x0, cfg.t, prov)
