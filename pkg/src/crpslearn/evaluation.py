"""Scores and statistical tests for combined quantile forecasts.

CRPS tables over an evaluation window, the Diebold-Mariano test with the
small-sample adjustment, Kupiec and Christoffersen coverage tests,
quantile-crossing counts and an expert correlation diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import xlogy

from .core import ProbGrid, crps_from_quantiles

SIGNIFICANCE_LEVELS = (0.1, 0.05, 0.01, 0.001)
_CODES = (".", "*", "**", "***")
# central interval level -> (lower, upper) probability
INTERVALS = {0.5: (0.25, 0.75), 0.9: (0.05, 0.95)}
_PROB_TOL = 1e-9


def _window(T: int, window) -> slice:
    if window is None:
        return slice(0, T)
    if isinstance(window, slice):
        return window
    if isinstance(window, (int, np.integer)):
        return slice(int(window), T)
    start, stop = window
    return slice(start, stop)


@dataclass(frozen=True)
class ScoreTable:
    """Per-(t, d) CRPS over the evaluation window."""

    crps: np.ndarray
    window: slice

    @property
    def aggregate(self) -> float:
        return float(self.crps.mean())

    @property
    def per_marginal(self) -> np.ndarray:
        return self.crps.mean(axis=0)

    @property
    def daily(self) -> np.ndarray:
        """L1 norm across marginals, the daily loss used by the DM test."""
        return self.crps.sum(axis=1)


def score_model(predictions, obs, pgrid: ProbGrid | None = None, window=None,
                scale2: bool = False) -> ScoreTable:
    """CRPS per ``(t, d)``; ``window`` is a slice, a burn-in length or ``(start, stop)``."""
    preds = np.asarray(predictions, float)
    y = np.asarray(getattr(obs, "values", obs), float)
    if preds.ndim != 3 or preds.shape[:2] != y.shape:
        raise ValueError(f"predictions {preds.shape} do not match observations {y.shape}")
    win = _window(y.shape[0], window)
    p, yy = preds[win], y[win]
    if p.shape[0] == 0:
        raise ValueError("evaluation window is empty")
    return ScoreTable(crps_from_quantiles(p, yy, pgrid, scale2=scale2), win)


@dataclass(frozen=True)
class DMResult:
    statistic: float
    p_value: float
    degenerate: bool = False

    @property
    def code(self) -> str:
        return significance_code(self.p_value)


def dm_test(model_losses, ref_losses, alternative: str = "two-sided") -> DMResult:
    """Diebold-Mariano test with the small-sample adjustment at horizon one.

    The daily loss differential is ``||L_ref||_1 - ||L_model||_1`` (summed over
    marginals when the inputs are ``(t, d)``), so a positive statistic means
    the model beats the reference. ``alternative="greater"`` tests exactly that
    one-sided hypothesis, ``"less"`` the opposite. P-values use the t
    distribution with ``T - 1`` degrees of freedom.
    """
    lm = np.asarray(model_losses, float)
    lr = np.asarray(ref_losses, float)
    if lm.shape != lr.shape:
        raise ValueError("loss arrays must have equal shapes")
    if lm.ndim == 2:
        lm, lr = np.abs(lm).sum(axis=1), np.abs(lr).sum(axis=1)
    elif lm.ndim != 1:
        raise ValueError("losses must be (t,) or (t, d)")
    T = lm.size
    if T < 2:
        raise ValueError("need at least two days")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    delta = lr - lm
    mean = delta.mean()
    gamma0 = np.mean((delta - mean) ** 2)
    if gamma0 <= 1e-15 * max(1.0, mean * mean):
        if mean == 0:
            return DMResult(0.0, 1.0, True)
        stat = np.inf if mean > 0 else -np.inf
        if alternative == "two-sided":
            p = 0.0
        else:
            p = 0.0 if (stat > 0) == (alternative == "greater") else 1.0
        return DMResult(stat, p, True)
    h = 1
    harvey = np.sqrt((T + 1 - 2 * h + h * (h - 1) / T) / T)
    stat = harvey * mean / np.sqrt(gamma0 / T)
    dist = stats.t(T - 1)
    if alternative == "two-sided":
        p = 2 * dist.sf(abs(stat))
    elif alternative == "greater":
        p = dist.sf(stat)
    else:
        p = dist.cdf(stat)
    return DMResult(float(stat), float(p))


def _bernoulli_loglik(x, n, prob):
    """``x log prob + (n - x) log(1 - prob)`` with ``0 log 0 = 0``."""
    return xlogy(x, prob) + xlogy(n - x, 1 - prob)


def kupiec_test(violations: int, n: int, level: float) -> tuple[float, float]:
    """Unconditional coverage likelihood ratio and its chi-square(1) p-value.

    ``level`` is the nominal miss rate.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x, n = int(violations), int(n)
    if n < 1 or not 0 <= x <= n:
        raise ValueError("need 0 <= violations <= n and n >= 1")
    lr = -2 * (_bernoulli_loglik(x, n, level) - _bernoulli_loglik(x, n, x / n))
    lr = float(lr) if lr > 0 else 0.0
    return lr, float(stats.chi2.sf(lr, 1))


@dataclass(frozen=True)
class ChristoffersenResult:
    lr_uc: float
    lr_ind: float
    lr_cc: float
    p_value: float
    p_ind: float
    degenerate: bool = False


def christoffersen_test(violation_series, level: float) -> ChristoffersenResult:
    """Conditional coverage test: unconditional coverage plus first-order independence.

    ``LR_ind`` compares a two-state Markov chain fitted to the violation
    indicator against an i.i.d. Bernoulli fit on the same transitions;
    ``LR_cc = LR_uc + LR_ind`` is referred to chi-square(2). A series without
    transitions out of one of the states has a degenerate ``LR_ind`` and is
    flagged.
    """
    v = np.asarray(violation_series)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("need a one-dimensional series of length >= 2")
    if not np.all((v == 0) | (v == 1)):
        raise ValueError("violation series must be binary")
    v = v.astype(int)
    lr_uc, _ = kupiec_test(int(v.sum()), v.size, level)
    prev, cur = v[:-1], v[1:]
    n00 = int(np.sum((prev == 0) & (cur == 0)))
    n01 = int(np.sum((prev == 0) & (cur == 1)))
    n10 = int(np.sum((prev == 1) & (cur == 0)))
    n11 = int(np.sum((prev == 1) & (cur == 1)))
    degenerate = (n00 + n01 == 0) or (n10 + n11 == 0)
    pi01 = n01 / (n00 + n01) if n00 + n01 else 0.0
    pi11 = n11 / (n10 + n11) if n10 + n11 else 0.0
    pi = (n01 + n11) / (v.size - 1)
    restricted = _bernoulli_loglik(n01 + n11, v.size - 1, pi)
    markov = _bernoulli_loglik(n01, n00 + n01, pi01) + _bernoulli_loglik(n11, n10 + n11, pi11)
    lr_ind = float(-2 * (restricted - markov))
    lr_ind = lr_ind if lr_ind > 0 else 0.0
    lr_cc = lr_uc + lr_ind
    return ChristoffersenResult(
        lr_uc, lr_ind, lr_cc,
        float(stats.chi2.sf(lr_cc, 2)), float(stats.chi2.sf(lr_ind, 1)), degenerate,
    )


def quantile_at(predictions, probs, p: float) -> np.ndarray:
    """Forecast quantile at level ``p``; linear interpolation between grid points.

    Raises ``ValueError`` when ``p`` lies outside the grid.
    """
    preds = np.asarray(predictions, float)
    probs = np.asarray(getattr(probs, "probs", probs), float)
    hit = np.flatnonzero(np.abs(probs - p) < _PROB_TOL)
    if hit.size:
        return preds[..., int(hit[0])]
    if not probs[0] < p < probs[-1]:
        raise ValueError(f"probability {p} lies outside the grid [{probs[0]}, {probs[-1]}]")
    i = int(np.searchsorted(probs, p))
    w = (p - probs[i - 1]) / (probs[i] - probs[i - 1])
    return (1 - w) * preds[..., i - 1] + w * preds[..., i]


def interval_violations(predictions, obs, pgrid: ProbGrid, level: float) -> np.ndarray:
    """Boolean ``(t, d)``: observation outside the central ``level`` interval."""
    if level not in INTERVALS:
        raise ValueError(f"no interval convention for level {level}")
    preds = np.asarray(predictions, float)
    y = np.asarray(getattr(obs, "values", obs), float)
    lo, hi = (quantile_at(preds, pgrid, p) for p in INTERVALS[level])
    return (y < lo) | (y > hi)


@dataclass(frozen=True)
class CoverageResult:
    """Per-marginal coverage test of one central interval."""

    level: float
    violations: np.ndarray
    n: int
    statistic: np.ndarray
    p_value: np.ndarray
    rejected: dict = field(default_factory=dict)


def coverage_test(predictions, obs, pgrid: ProbGrid, level: float, window=None,
                  method: str = "kupiec") -> CoverageResult:
    """Kupiec (or Christoffersen, ``method="christoffersen"``) test per marginal."""
    preds = np.asarray(predictions, float)
    y = np.asarray(getattr(obs, "values", obs), float)
    win = _window(y.shape[0], window)
    viol = interval_violations(preds[win], y[win], pgrid, level)
    n, D = viol.shape
    if n == 0:
        raise ValueError("evaluation window is empty")
    miss = 1 - level
    stat = np.empty(D)
    pval = np.empty(D)
    for d in range(D):
        if method == "kupiec":
            stat[d], pval[d] = kupiec_test(int(viol[:, d].sum()), n, miss)
        elif method == "christoffersen":
            res = christoffersen_test(viol[:, d], miss)
            stat[d], pval[d] = res.lr_cc, res.p_value
        else:
            raise ValueError(f"unknown coverage test {method!r}")
    rejected = {a: pval < a for a in SIGNIFICANCE_LEVELS}
    return CoverageResult(level, viol.sum(axis=0), n, stat, pval, rejected)


def crossing_days(predictions) -> tuple[int, np.ndarray]:
    """Days on which some marginal has a strictly decreasing quantile pair."""
    preds = np.asarray(predictions, float)
    if preds.ndim != 3:
        raise ValueError("predictions must be (t, d, p)")
    mask = np.any(np.diff(preds, axis=-1) < 0, axis=(1, 2))
    return int(mask.sum()), mask


@dataclass(frozen=True)
class CorrelationResult:
    matrix: np.ndarray
    undefined: np.ndarray  # True where an expert had zero variance


def _median_forecast(values: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Median per ``(t, d, k)``, interpolated linearly along the probability axis."""
    moved = np.moveaxis(values, 2, -1)
    if probs[0] < 0.5 < probs[-1] or np.any(np.abs(probs - 0.5) < _PROB_TOL):
        return quantile_at(moved, probs, 0.5)
    # grid entirely on one side: nearest level
    return moved[..., 0] if probs[0] > 0.5 else moved[..., -1]


def pearson_corr_matrix(panel, pgrid: ProbGrid | None = None) -> CorrelationResult:
    """K x K Pearson correlation of the experts' median forecasts over all ``(t, d)``."""
    values = np.asarray(getattr(panel, "values", panel), float)
    if values.ndim != 4 or values.shape[0] < 2:
        raise ValueError("need a (t, d, p, k) panel with at least two days")
    probs = (np.asarray(getattr(pgrid, "probs", pgrid), float) if pgrid is not None
             else np.asarray(ProbGrid.equidistant(values.shape[2]).probs))
    med = _median_forecast(values, probs).reshape(-1, values.shape[3])
    centred = med - med.mean(axis=0)
    norm = np.sqrt((centred ** 2).sum(axis=0))
    flat = norm <= 1e-14 * max(1.0, float(np.abs(med).max()))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (centred.T @ centred) / np.outer(norm, norm)
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    undefined = flat[:, None] | flat[None, :]
    corr[undefined] = np.nan
    return CorrelationResult(corr, undefined)


def significance_code(p: float) -> str:
    """``.``, ``*``, ``**`` or ``***`` at 0.1, 0.05, 0.01 and 0.001; empty otherwise."""
    code = ""
    for level, c in zip(SIGNIFICANCE_LEVELS, _CODES):
        if p < level:
            code = c
    return code


def score_summary(models: dict, obs, pgrid: ProbGrid, reference: str, window=None) -> list[dict]:
    """One row per model with CRPS and DM statistic against ``reference``.

    ``models`` maps a name to ``(predictions, spec, scheme)``.
    """
    if reference not in models:
        raise ValueError(f"reference model {reference!r} not among the models")
    tables = {name: score_model(m[0], obs, pgrid, window) for name, m in models.items()}
    ref = tables[reference]
    rows = []
    for name, (_, spec, scheme) in models.items():
        tab = tables[name]
        if name == reference:
            dm = DMResult(0.0, 1.0, True)
        else:
            dm = dm_test(tab.crps, ref.crps)
        rows.append({
            "model": name, "spec": spec, "scheme": scheme, "crps": tab.aggregate,
            "dm_stat": dm.statistic, "dm_p": dm.p_value, "signif": dm.code,
        })
    return rows
