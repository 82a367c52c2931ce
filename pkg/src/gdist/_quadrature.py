"""Adaptive Gauss-Legendre quadrature used by the distribution and transform code.

Integrals over probability levels ``p in (0, 1)`` are carried out in the
probit variable ``z = Phi^{-1}(p)``; the body ``|z| <= Phi^{-1}(1 - eps)`` is
integrated adaptively and the two tails are added panel by panel until they
stop contributing.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from .errors import NonIntegrable

EPS_CLIP = 1e-10
GL_NODES = 16
MAX_DEPTH = 40
MAX_PANELS = 20000
Z_LIMIT = 38.5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=None)
def gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _panel_sums(func, a, b, n):
    x, w = gauss_legendre(n)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    pts = mid[:, None] + half[:, None] * x[None, :]
    vals = np.asarray(func(pts.ravel()), dtype=float).reshape(pts.shape)
    return (vals @ w) * half


def adaptive_gl(func, edges, rtol=1e-12, atol=0.0, n=GL_NODES, max_depth=MAX_DEPTH):
    """Integrate a vectorized ``func`` over consecutive intervals ``edges``.

    Each panel is accepted once an ``n``-point rule and the two-panel ``n``-point
    rule agree to tolerance. Raises :class:`NonIntegrable` when refinement fails
    to settle or the integrand produces non-finite values.
    """
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1], edges[1:]
    keep = b > a
    a, b = a[keep], b[keep]
    if a.size == 0:
        return 0.0
    total_width = float(np.sum(b - a))
    coarse = _panel_sums(func, a, b, n)
    if not np.all(np.isfinite(coarse)):
        raise NonIntegrable("integrand is not finite on the integration range")
    scale = float(np.sum(np.abs(coarse)))
    accepted: list[tuple[float, float]] = []
    for depth in range(max_depth):
        mid = 0.5 * (a + b)
        left = _panel_sums(func, a, mid, n)
        right = _panel_sums(func, mid, b, n)
        fine = left + right
        if not np.all(np.isfinite(fine)):
            raise NonIntegrable("integrand is not finite on the integration range")
        err = np.abs(fine - coarse)
        tol = np.maximum(rtol * np.maximum(np.abs(fine), scale * (b - a) / total_width),
                         atol * (b - a) / total_width)
        ok = err <= tol
        accepted.extend(zip(a[ok].tolist(), fine[ok].tolist()))
        if np.all(ok):
            break
        bad = ~ok
        a = np.concatenate([a[bad], mid[bad]])
        b = np.concatenate([mid[bad], b[bad]])
        coarse = np.concatenate([left[bad], right[bad]])
        if a.size > MAX_PANELS:
            raise NonIntegrable("quadrature refinement exceeded the panel budget",
                                unresolved_panels=int(a.size))
        order = np.argsort(a, kind="stable")
        a, b, coarse = a[order], b[order], coarse[order]
        # Panels below float resolution cannot be split further.
        if np.any(b - a <= 4 * np.spacing(np.maximum(np.abs(a), np.abs(b)))):
            raise NonIntegrable("adaptive refinement collapsed to machine resolution")
    else:
        raise NonIntegrable(
            "quadrature did not converge across refinement levels",
            unresolved_panels=int(a.size),
        )
    accepted.sort()
    return math.fsum(v for _, v in accepted)


def normal_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


def _tail(func, start, direction, body_scale, rtol):
    """Sum unit-width tail panels until two consecutive ones are negligible."""
    total = []
    quiet = 0
    z = start
    while abs(z) < Z_LIMIT:
        nxt = z + direction
        lo, hi = (z, nxt) if direction > 0 else (nxt, z)
        val = adaptive_gl(func, [lo, hi], rtol=rtol)
        if not math.isfinite(val):
            raise NonIntegrable("tail contribution is not finite")
        total.append(val)
        if abs(val) <= 1e-17 * max(body_scale, 1e-300) or val == 0.0:
            quiet += 1
            if quiet >= 2:
                return math.fsum(total)
        else:
            quiet = 0
        z = nxt
    last = total[-1] if total else 0.0
    if abs(last) > 1e-14 * max(body_scale, 1e-300):
        raise NonIntegrable("tail contributions do not decay", last_panel=last)
    return math.fsum(total)


def integrate_probit(g, breaks=(), eps=EPS_CLIP, rtol=1e-12, panel=0.5, tails=True):
    """Compute ``int_0^1 G(p) dp`` written as ``int g(z) phi(z) dz`` with ``p = Phi(z)``.

    ``g`` is vectorized in ``z``; ``breaks`` are z-locations of known
    discontinuities. The body is ``|z| <= Phi^{-1}(1 - eps)``; with ``tails`` the
    remaining mass is added by tail panels out to ``|z| = 38.5``.
    """
    zc = float(-ndtri(eps))

    def integrand(z):
        return g(z) * normal_pdf(z)

    pts = set(np.linspace(-zc, zc, int(math.ceil(2 * zc / panel)) + 1).tolist())
    for bz in breaks:
        if -zc < bz < zc:
            pts.add(float(bz))
    edges = np.array(sorted(pts))
    body = adaptive_gl(integrand, edges, rtol=rtol)
    if not tails:
        return body
    tail_breaks = sorted(float(b) for b in breaks if abs(b) >= zc)
    if tail_breaks:
        # Discontinuities in the tails are rare; integrate them exactly by panels.
        right = [b for b in tail_breaks if b > 0]
        left = [b for b in tail_breaks if b < 0]
        hi = adaptive_gl(integrand, [zc, *right, Z_LIMIT], rtol=rtol)
        lo = adaptive_gl(integrand, [-Z_LIMIT, *left, -zc], rtol=rtol)
        return math.fsum([lo, body, hi])
    scale = abs(body) + 1e-300
    hi = _tail(integrand, zc, 1.0, scale, rtol)
    lo = _tail(integrand, -zc, -1.0, scale, rtol)
    return math.fsum([lo, body, hi])
