"""Quadrature rules shared by the modules."""

from functools import lru_cache

import numpy as np

from .errors import DivergentIntegralError, QuadratureError


@lru_cache(maxsize=64)
def _leggauss(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def gauss_legendre(a: float, b: float, order: int):
    x, w = _leggauss(order)
    half = 0.5 * (b - a)
    return 0.5 * (a + b) + half * x, half * w


def composite_gauss_legendre(a: float, b: float, panels: int, order: int):
    """Nodes and weights of a composite rule with equal panels on [a, b]."""
    edges = np.linspace(a, b, panels + 1)
    x, w = _leggauss(order)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _panel(fun, a, b, order, max_len):
    pieces = max(1, int(np.ceil((b - a) / max_len))) if max_len else 1
    edges = np.linspace(a, b, pieces + 1)
    x, w = _leggauss(order)
    z = (0.5 * (edges[1:] + edges[:-1])[:, None] + 0.5 * np.diff(edges)[:, None] * x).ravel()
    wz = (0.5 * np.diff(edges)[:, None] * w).ravel()
    zz = np.concatenate([z, -z])
    vals = np.asarray(fun(zz))
    ww = np.concatenate([wz, wz])
    return np.tensordot(ww, vals, axes=(0, 0))


def radial_integral(fun, inner: float, outer: float, *, order: int = 24,
                    rtol: float = 1e-11, atol: float = 1e-300,
                    max_panels: int = 400, min_panels: int = 4,
                    max_len: float = 0.5, resolve_radius: float = 64.0):
    """Integrate ``fun`` over ``{inner < |z| <= outer}`` on the real line.

    Panels are graded geometrically (ratio 2) towards whichever end is open:
    towards z = 0 when ``inner == 0`` and towards infinity when ``outer`` is
    infinite. Both signs of z are evaluated together, so odd integrands cancel
    exactly. The tail beyond the last panel is added by geometric (Richardson)
    extrapolation of the last two panel contributions.

    Returns ``(value, error_estimate)``; ``fun`` maps an array of z to an
    array whose leading axis runs over z.
    """
    if inner < 0 or outer <= inner:
        raise ValueError("need 0 <= inner < outer")
    if inner == 0 and np.isinf(outer):
        raise ValueError("split the integral at a finite radius first")

    if inner == 0:
        edges = _inward_edges(outer)
    elif np.isinf(outer):
        edges = _outward_edges(inner)
    else:
        # bounded annulus: geometric panels from inner to outer, no tail
        n = max(1, int(np.ceil(np.log2(outer / inner))))
        e = inner * 2.0 ** np.arange(n + 1)
        e[-1] = outer
        total = 0.0
        for a, b in zip(e[:-1], e[1:]):
            total = total + _panel(fun, a, b, order, max_len if b <= resolve_radius else None)
        return total, 0.0

    total = 0.0
    prev = None
    prev_ratio = None
    for k, (a, b) in enumerate(edges):
        if k >= max_panels:
            raise QuadratureError(f"no convergence after {max_panels} graded panels")
        s = np.asarray(_panel(fun, a, b, order, max_len if b <= resolve_radius else None), dtype=float)
        total = total + s
        if prev is not None:
            tail, done, divergent, ratio = _geometric_tail(prev, s, total, rtol, atol, prev_ratio)
            if divergent and k > 40:
                raise DivergentIntegralError(
                    f"graded panel contributions do not decay (|z| between {a:.3g} and {b:.3g})")
            if done and k + 1 >= min_panels:
                return total + tail, np.max(np.abs(tail)) * 1e-6 + rtol * np.max(np.abs(total))
            prev_ratio = ratio
        prev = s


def _inward_edges(r):
    k = 0
    while True:
        yield r * 2.0 ** -(k + 1), r * 2.0 ** -k
        k += 1


def _outward_edges(r):
    k = 0
    while True:
        yield r * 2.0 ** k, r * 2.0 ** (k + 1)
        k += 1


def _geometric_tail(prev, cur, total, rtol, atol, prev_ratio):
    """Extrapolated remainder after the current panel.

    Accepts when the remainder is below tolerance, or when the panel ratios
    have settled (pure power-law regime, where the geometric tail is exact).
    """
    prev = np.atleast_1d(prev).ravel()
    cur_a = np.atleast_1d(cur).ravel()
    scale = np.max(np.abs(np.atleast_1d(total)))
    tol = rtol * scale + atol
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(prev != 0, cur_a / prev, 0.0)
    negligible = np.abs(cur_a) <= tol * 1e-3
    decaying = (np.abs(ratio) < 1.0 - 1e-9) | negligible
    if not np.all(decaying):
        growing = np.any((np.abs(ratio) >= 1.0) & ~negligible)
        return 0.0, False, growing, ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = np.where(negligible, 0.0, cur_a * ratio / (1.0 - ratio))
    settled = prev_ratio is not None and np.all(
        negligible | (np.abs(ratio - prev_ratio) <= 1e-9 * np.maximum(np.abs(ratio), 1e-300)))
    done = np.all(np.abs(tail) <= tol) or settled
    tail = tail.reshape(np.shape(cur)) if np.ndim(cur) else float(tail[0])
    return tail, done, False, ratio


def simplex_rule(m: int, t: float, order: int = 16):
    """Tensor Gauss-Legendre on the ordered simplex t > t_1 > ... > t_m > 0.

    Uses the collapsed map t_1 = t u_1, t_{i+1} = t_i u_{i+1}. Returns nodes of
    shape ``(K, m)`` and weights of shape ``(K,)``.
    """
    if m < 1:
        raise ValueError("m >= 1")
    u, w = gauss_legendre(0.0, 1.0, order)
    grids = np.meshgrid(*([u] * m), indexing="ij")
    wgrids = np.meshgrid(*([w] * m), indexing="ij")
    U = np.stack([g.ravel() for g in grids], axis=-1)
    W = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    nodes = t * np.cumprod(U, axis=1)
    jac = t**m * np.ones(len(W))
    for i in range(m - 1):
        jac *= U[:, i] ** (m - 1 - i)
    return nodes, W * jac
