"""Vectorized numerical kernels: monotone cubic tables, Gauss quadrature, line searches.

Every routine works on whole batches of independent problems at once (one per
path/time row), which is how the flow and utility constructions call them.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson derivative estimates along the last axis of ``y``.

    ``x`` is a shared strictly increasing abscissa of length n; ``y`` has
    shape (..., n). The resulting Hermite cubic is monotone wherever the data
    are, so a strictly increasing table yields a strictly increasing
    interpolant.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.diff(x)
    delta = np.diff(y, axis=-1) / h
    d = np.empty_like(y)
    if x.size == 2:
        d[..., 0] = delta[..., 0]
        d[..., 1] = delta[..., 0]
        return d
    w1 = 2.0 * h[1:] + h[:-1]
    w2 = h[1:] + 2.0 * h[:-1]
    dl = delta[..., :-1]
    dr = delta[..., 1:]
    same = (dl * dr) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        harmonic = (w1 + w2) / (w1 / dl + w2 / dr)
    d[..., 1:-1] = np.where(same, harmonic, 0.0)
    d[..., 0] = _edge_slope(h[0], h[1], delta[..., 0], delta[..., 1])
    d[..., -1] = _edge_slope(h[-1], h[-2], delta[..., -1], delta[..., -2])
    return d


def _edge_slope(h0, h1, m0, m1):
    d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
    d = np.where(np.sign(d) != np.sign(m0), 0.0, d)
    clip = (np.sign(m0) != np.sign(m1)) & (np.abs(d) > 3.0 * np.abs(m0))
    return np.where(clip, 3.0 * m0, d)


class MonotoneTable:
    """Batch of strictly increasing monotone-cubic interpolants on a shared grid.

    Row ``r`` interpolates the points ``(x, y[r])``. Queries take a ``rows``
    index array broadcast against the query points, so one call can evaluate
    different rows at different abscissae.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = np.ascontiguousarray(x, dtype=float)
        self.y = np.ascontiguousarray(np.atleast_2d(y), dtype=float)
        if self.x.ndim != 1 or self.x.size < 2:
            raise ValueError("abscissa must be one-dimensional with at least two nodes")
        if self.y.shape[-1] != self.x.size:
            raise ValueError("table width does not match the abscissa")
        self.h = np.diff(self.x)
        self.d = pchip_slopes(self.x, self.y)

    @property
    def n_rows(self) -> int:
        return self.y.shape[0]

    def cell_of(self, s: np.ndarray) -> np.ndarray:
        k = np.searchsorted(self.x, s, side="right") - 1
        return np.clip(k, 0, self.x.size - 2)

    def _coefficients(self, rows, k):
        h = self.h[k]
        return (
            self.y[rows, k],
            self.y[rows, k + 1],
            self.d[rows, k] * h,
            self.d[rows, k + 1] * h,
            h,
        )

    def value(self, rows, s, derivative: bool = False, cell=None):
        """Interpolated value (and d/ds if requested) of ``rows`` at ``s``.

        ``cell`` may give the known interval index (broadcastable to ``s``);
        coefficients are then gathered at the broadcast shape of rows/cell
        only, which is much cheaper for quadrature inside one cell.
        """
        rows = np.asarray(rows, dtype=np.intp)
        s = np.asarray(s, dtype=float)
        k = self.cell_of(s) if cell is None else np.asarray(cell, dtype=np.intp)
        y0, y1, d0, d1, h = self._coefficients(rows, k)
        # Hermite cubic in power basis, evaluated by Horner's rule
        c2 = 3.0 * (y1 - y0) - 2.0 * d0 - d1
        c3 = 2.0 * (y0 - y1) + d0 + d1
        t = (s - self.x[k]) / h
        v = ((c3 * t + c2) * t + d0) * t + y0
        if not derivative:
            return v
        dv = ((3.0 * c3 * t + 2.0 * c2) * t + d0) / h
        return v, dv

    def invert(self, rows, target, tol: float = 4e-16, max_iter: int = 100):
        """Solve ``value(rows, s) == target`` for s.

        Returns ``(s, inside)``; ``inside`` flags targets within the row's
        tabulated range. Outside targets are clamped to the nearest end so the
        caller decides whether that is an error.
        """
        rows, target = np.broadcast_arrays(
            np.asarray(rows, dtype=np.intp), np.asarray(target, dtype=float)
        )
        first = self.y[rows, 0]
        last = self.y[rows, -1]
        inside = (target >= first) & (target <= last)
        tt = np.clip(target, first, last)

        lo = np.zeros(tt.shape, dtype=np.intp)
        hi = np.full(tt.shape, self.x.size - 1, dtype=np.intp)
        while True:
            active = (hi - lo) > 1
            if not active.any():
                break
            mid = (lo + hi) // 2
            go = self.y[rows, mid] <= tt
            lo = np.where(active & go, mid, lo)
            hi = np.where(active & ~go, mid, hi)
        k = lo

        y0, y1, d0, d1, h = (np.ravel(c) for c in np.broadcast_arrays(*self._coefficients(rows, k)))
        tt_f = np.ravel(tt)
        span = y1 - y0
        t = np.clip((tt_f - y0) / span, 0.0, 1.0)
        a = np.zeros_like(t)
        b = np.ones_like(t)
        scale = np.abs(y0) + np.abs(span)
        idx = np.arange(t.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            for _ in range(max_iter):
                if idx.size == 0:
                    break
                ti, c0, c1, e0, e1 = t[idx], y0[idx], y1[idx], d0[idx], d1[idx]
                t2 = ti * ti
                t3 = t2 * ti
                p = (2 * t3 - 3 * t2 + 1) * c0 + (t3 - 2 * t2 + ti) * e0 + (3 * t2 - 2 * t3) * c1 + (t3 - t2) * e1
                dp = (6 * t2 - 6 * ti) * (c0 - c1) + (3 * t2 - 4 * ti + 1) * e0 + (3 * t2 - 2 * ti) * e1
                f = p - tt_f[idx]
                ai = np.where(f < 0, ti, a[idx])
                bi = np.where(f > 0, ti, b[idx])
                step = ti - f / dp
                bad = ~((step >= ai) & (step <= bi)) | ~np.isfinite(step)
                new = np.where(bad, 0.5 * (ai + bi), step)
                hit = np.abs(f) <= tol * scale[idx]
                t[idx] = np.where(hit, ti, new)
                a[idx], b[idx] = ai, bi
                done = hit | (np.abs(new - ti) <= 1e-16) | ((bi - ai) <= 1e-16)
                idx = idx[~done]
        t = t.reshape(tt.shape)
        return self.x[k] + t * h.reshape(tt.shape), inside


@lru_cache(maxsize=None)
def gauss_legendre(n: int):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def _gauss(f, lo, hi, owner, n):
    nodes, weights = gauss_legendre(n)
    half = 0.5 * (hi - lo)
    z = lo[:, None] + half[:, None] * (nodes + 1.0)
    vals = f(z, owner)
    return half * (vals @ weights), np.abs(half) * (np.abs(vals) @ weights)


def adaptive_gauss(f, a, b, rtol: float = 1e-12, atol: float = 0.0, max_depth: int = 30, orders=(5, 10)):
    """Adaptive composite Gauss-Legendre over a batch of intervals.

    ``f(z, owner)`` receives points of shape (m, k) and the index of the
    original interval each row belongs to. Intervals whose low/high order
    estimates disagree beyond tolerance are bisected. Returns (integrals,
    error estimates), one per input interval.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    total = np.zeros(a.size)
    error = np.zeros(a.size)
    owner = np.arange(a.size)
    live = b != a
    lo, hi, owner = a[live], b[live], owner[live]
    n_lo, n_hi = orders
    for depth in range(max_depth):
        if lo.size == 0:
            break
        q_lo, _ = _gauss(f, lo, hi, owner, n_lo)
        q_hi, mag = _gauss(f, lo, hi, owner, n_hi)
        err = np.abs(q_hi - q_lo)
        # the roundoff floor keeps tolerances near machine precision from bisecting forever
        ok = err <= np.maximum(np.maximum(atol, rtol * np.abs(q_hi)), 50 * np.finfo(float).eps * mag)
        if depth == max_depth - 1:
            ok[:] = True
        np.add.at(total, owner[ok], q_hi[ok])
        np.add.at(error, owner[ok], err[ok])
        keep = ~ok
        mid = 0.5 * (lo[keep] + hi[keep])
        lo, hi, owner = (
            np.concatenate([lo[keep], mid]),
            np.concatenate([mid, hi[keep]]),
            np.concatenate([owner[keep], owner[keep]]),
        )
    return total, error


def golden_section_max(f, lo, hi, iters: int = 90):
    """Maximize a batch of unimodal functions elementwise on ``[lo, hi]``.

    ``f`` maps an array of points (same shape as ``lo``) to values.
    Returns (argmax, max).
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc = f(c)
    fd = f(d)
    for _ in range(iters):
        left = fc >= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c_new = np.where(left, hi - _GOLDEN * (hi - lo), d)
        d_new = np.where(left, c, lo + _GOLDEN * (hi - lo))
        probe = np.where(left, c_new, d_new)
        fp = f(probe)
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = c_new, d_new
    best = fc >= fd
    return np.where(best, c, d), np.where(best, fc, fd)


def bisect_decreasing(f, target, lo, hi, iters: int = 200, rtol: float = 1e-15):
    """Solve ``f(x) = target`` for a batch of strictly decreasing functions.

    Bisection in log-space on ``[lo, hi]`` (both positive).
    """
    llo = np.log(np.broadcast_to(np.asarray(lo, dtype=float), np.shape(target))).copy()
    lhi = np.log(np.broadcast_to(np.asarray(hi, dtype=float), np.shape(target))).copy()
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        above = f(np.exp(mid)) > target
        llo = np.where(above, mid, llo)
        lhi = np.where(above, lhi, mid)
        if np.all(lhi - llo <= rtol):
            break
    return np.exp(0.5 * (llo + lhi))
