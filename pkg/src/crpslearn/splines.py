"""Knot placement, B-spline bases, general P-spline penalties and hat matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np
from scipy import linalg
from scipy.special import betainc

# Poisson mass left out of the non-central beta series
_SERIES_TAIL = 1e-12
_SERIES_MAX_TERMS = 500
# relative floor on knot spans when building smoothers from tuned knot placements
_MIN_SPAN = 1e-6


@dataclass(frozen=True)
class KnotSpec:
    """Parameters of the knot placement.

    ``J`` inner knots, spline degree ``deg``; ``mu``/``sigma`` locate and
    scale the beta distribution the central knots are drawn from, ``c`` is
    its non-centrality (negative values mirror the placement) and ``tau``
    stretches the exterior knots.
    """

    J: int
    deg: int = 1
    mu: float = 0.5
    sigma: float = 1.0
    c: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.deg < 0:
            raise ValueError("deg must be >= 0")
        if not 0 < self.mu < 1:
            raise ValueError("mu must lie in (0, 1)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not math.isfinite(self.c):
            raise ValueError("c must be finite")

    @property
    def order(self) -> int:
        return self.deg + 1


@dataclass(frozen=True)
class BasisSpec:
    """Reduction basis for one axis of the weight surface.

    ``identity`` keeps one weight per grid point, ``constant`` a single
    weight for the whole axis, ``spline`` a B-spline basis with the given
    knot parameters (``n_knots=None`` uses the grid length).
    """

    kind: Literal["identity", "constant", "spline"] = "identity"
    n_knots: int | None = None
    deg: int = 1
    mu: float = 0.5
    sigma: float = 1.0
    c: float = 0.0
    tau: float = 1.0


@dataclass(frozen=True)
class SmoothSpec:
    """Penalised smoothing of the weights along one axis.

    ``lam == 0`` switches smoothing off (identity hat matrix). ``alpha``
    mixes the first (``alpha=1``) and second difference penalties.
    """

    lam: float = 0.0
    alpha: float = 1.0
    deg: int = 3
    n_knots: int | None = None
    mu: float = 0.5
    sigma: float = 1.0
    c: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be finite and nonnegative")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


def noncentral_beta_cdf(x, a: float, b: float, c: float = 0.0):
    """CDF of the non-central beta distribution.

    Poisson mixture of regularized incomplete beta functions
    ``sum_j e^{-c/2} (c/2)^j / j! * I_x(a + j, b)``, truncated once the
    accumulated Poisson weight exceeds ``1 - 1e-12`` (at most 500 terms).
    """
    if not (a > 0 and b > 0):
        raise ValueError("shape parameters must be positive")
    if not c >= 0:
        raise ValueError("non-centrality must be nonnegative")
    x = np.asarray(x, float)
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise ValueError("x must lie in [0, 1]")
    if c == 0:
        out = betainc(a, b, x)
        return out[()] if out.ndim == 0 else out
    lam = c / 2
    weight = math.exp(-lam)
    total = np.zeros_like(x)
    cum = 0.0
    for j in range(_SERIES_MAX_TERMS):
        total += weight * betainc(a + j, b, x)
        cum += weight
        if cum > 1 - _SERIES_TAIL:
            break
        weight *= lam / (j + 1)
    # exact at the end points, where truncation would leave 1 - 1e-12
    total = np.where(x == 0, 0.0, np.where(x == 1, 1.0, total))
    return total[()] if total.ndim == 0 else total


def make_knots(spec: KnotSpec) -> np.ndarray:
    """Knot sequence: ``deg`` exterior knots, ``J + 3`` central knots, ``deg`` exterior knots.

    The central block maps ``(0, 1, ..., J+2)/(J+2)`` through the
    non-central beta CDF with ``a = 2 sigma (1 - mu)`` and ``b = 2 sigma mu``;
    negative ``c`` mirrors it. With ``mu=0.5, sigma=1, c=0, tau=1`` the knots
    are equidistant.
    """
    J, deg = spec.J, spec.deg
    x = np.arange(J + 3) / (J + 2)
    a = 2 * spec.sigma * (1 - spec.mu)
    b = 2 * spec.sigma * spec.mu
    central = noncentral_beta_cdf(x, a, b, abs(spec.c))
    if spec.c < 0:
        central = (1 - central)[::-1]
    tau = abs(spec.tau)
    left = tau * (central[1] - central[0]) * np.arange(-deg, 0)
    # 1-based knots_c[J+2] - knots_c[J+1]
    right = tau * (central[J + 1] - central[J]) * np.arange(1, deg + 1) + 1
    return np.concatenate([left, central, right])


def bspline_basis(grid, knots, deg: int) -> np.ndarray:
    """Cox-de Boor evaluation of all B-splines of degree ``deg`` at ``grid``.

    Returns a ``(len(grid), len(knots) - deg - 1)`` matrix. Grid points must
    lie in ``[knots[deg], knots[-deg-1]]``; the right end point belongs to the
    last nondegenerate interval.
    """
    grid = np.atleast_1d(np.asarray(grid, float))
    t = np.asarray(knots, float)
    if np.any(np.diff(t) < 0):
        raise ValueError("knots must be nondecreasing")
    n_basis = t.size - deg - 1
    if n_basis < 1:
        raise ValueError("not enough knots for the requested degree")
    lo, hi = t[deg], t[t.size - deg - 1]
    for x in grid:
        if not lo - 1e-12 <= x <= hi + 1e-12:
            raise ValueError(f"grid point {x!r} lies outside the basis support [{lo}, {hi}]")

    # degree 0: half-open intervals, closed at the right end of the support
    n0 = t.size - 1
    B = ((grid[:, None] >= t[None, :-1]) & (grid[:, None] < t[None, 1:])).astype(float)
    last = max(i for i in range(deg, t.size - deg - 1) if t[i + 1] > t[i])
    B[grid >= hi, :] = 0.0
    B[grid >= hi, last] = 1.0

    for k in range(1, deg + 1):
        nb = n0 - k
        out = np.zeros((grid.size, nb))
        for i in range(nb):
            d1 = t[i + k] - t[i]
            d2 = t[i + k + 1] - t[i + 1]
            if d1 > 0:
                out[:, i] += (grid - t[i]) / d1 * B[:, i]
            if d2 > 0:
                out[:, i] += (t[i + k + 1] - grid) / d2 * B[:, i + 1]
        B = out
    return B[:, :n_basis]


def difference_matrix_standard(n: int, q: int) -> np.ndarray:
    """``q``-th order difference operator on ``n`` coefficients."""
    return np.diff(np.eye(n), n=q, axis=0)


def _weight_diagonal(t: np.ndarray, o: int, j: int, min_span: float = 0.0) -> np.ndarray:
    J = t.size - 2 * o
    i = np.arange(J + o - j)
    w = (t[i + o] - t[i + j]) / (o - j)
    if min_span > 0:
        w = np.maximum(w, min_span * w.mean())
    return w


def difference_matrix_general(knots, o: int, q: int, min_span: float = 0.0) -> np.ndarray:
    """Knot-weighted difference matrix for non-equidistant B-splines.

    ``W_q^{-1} Delta W_{q-1}^{-1} Delta ... W_1^{-1} Delta`` where ``W_j`` is
    diagonal with entries ``(t_{i+o} - t_{i+j}) / (o - j)``. Coincident knots
    make a weight vanish; ``min_span > 0`` floors the weights at that
    fraction of their mean instead of raising.
    """
    t = np.asarray(knots, float)
    if q < 1:
        raise ValueError("difference order must be >= 1")
    if q >= o:
        raise ValueError(f"difference order q={q} requires spline order o > q (got o={o})")
    n = t.size - o
    if n <= q:
        raise ValueError("too few knots for the requested difference order")
    D = np.eye(n)
    for j in range(1, q + 1):
        w = _weight_diagonal(t, o, j, min_span)
        if np.any(w <= 0):
            raise ValueError("coincident knots give a zero weight in the difference matrix")
        D = (np.diff(np.eye(n - j + 1), axis=0) / w[:, None]) @ D
    return D


def penalty_matrix(dmat, knots, o: int, q: int, min_span: float = 0.0) -> np.ndarray:
    """Penalty ``D'D`` rescaled by ``(tr(W_q) / (J + o - q))^(2q)``.

    The rescaling makes lambda values comparable between equidistant and
    non-equidistant knots; for equidistant knots the result equals the
    standard P-spline penalty.
    """
    t = np.asarray(knots, float)
    w = _weight_diagonal(t, o, q, min_span)
    scale = (w.sum() / w.size) ** (2 * q)
    dmat = np.asarray(dmat, float)
    return scale * (dmat.T @ dmat)


def hat_matrix(B, lam: float = 0.0, alpha: float = 1.0, P1=None, P2=None) -> np.ndarray:
    """``B (B'B + lam (alpha P1 + (1 - alpha) P2))^{-1} B'``."""
    B = np.asarray(B, float)
    if B.shape[1] == 1:
        # single column: penalties vanish, plain averaging projection
        return B @ B.T / float(B[:, 0] @ B[:, 0])
    A = B.T @ B
    if lam > 0:
        pen = np.zeros_like(A)
        if alpha > 0:
            if P1 is None:
                raise ValueError("first difference penalty required for alpha > 0")
            pen += alpha * np.asarray(P1)
        if alpha < 1:
            if P2 is None:
                raise ValueError("second difference penalty required for alpha < 1")
            pen += (1 - alpha) * np.asarray(P2)
        A = A + lam * pen
    try:
        factor = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        if lam == 0:
            raise ValueError(
                "B'B is singular (rank-deficient basis); use a positive lambda"
            ) from None
        raise ValueError("penalised normal equations are singular") from None
    H = B @ linalg.cho_solve(factor, B.T)
    return (H + H.T) / 2


def reduction_basis(grid01, spec: BasisSpec) -> np.ndarray | None:
    """Basis matrix used to reduce the regret; ``None`` stands for the identity."""
    n = len(grid01)
    if spec.kind == "identity":
        return None
    if spec.kind == "constant":
        return np.ones((n, 1))
    if spec.kind == "spline":
        ks = KnotSpec(spec.n_knots or n, spec.deg, spec.mu, spec.sigma, spec.c, spec.tau)
        return bspline_basis(grid01, make_knots(ks), spec.deg)
    raise ValueError(f"unknown basis kind {spec.kind!r}")


@lru_cache(maxsize=4096)
def _smoothing_hat_cached(grid_key: tuple, spec: SmoothSpec) -> np.ndarray:
    grid = np.array(grid_key)
    n = grid.size
    ks = KnotSpec(spec.n_knots or n, spec.deg, spec.mu, spec.sigma, spec.c, spec.tau)
    knots = make_knots(ks)
    B = bspline_basis(grid, knots, spec.deg)
    o = spec.deg + 1
    if B.shape[1] == 1:
        H = hat_matrix(B)
    else:
        # least squares on the stacked system [B; sqrt(lam) L] squares the
        # condition number less than the normal equations do
        rows = [B]
        for q, share in ((1, spec.alpha), (2, 1 - spec.alpha)):
            if share > 0:
                dmat = difference_matrix_general(knots, o, q, _MIN_SPAN)
                w = _weight_diagonal(knots, o, q, _MIN_SPAN)
                scale = w.mean() ** (2 * q)
                rows.append(np.sqrt(spec.lam * share * scale) * dmat)
        M = np.vstack(rows)
        H = B @ linalg.pinv(M)[:, : n]
        H = (H + H.T) / 2
    H.setflags(write=False)
    return H


def smoothing_hat(grid01, spec: SmoothSpec) -> np.ndarray | None:
    """Hat matrix for penalised smoothing along one axis; ``None`` means no smoothing."""
    grid01 = np.asarray(grid01, float)
    if spec.lam == 0 or grid01.size == 1:
        return None
    return _smoothing_hat_cached(tuple(grid01.tolist()), spec)
