"""Synthetic forecast-combination scenarios with a known data-generating law.

Observations follow ``Y[t, d] = m[t, d] + s[d] * Z`` where ``m`` is an AR(1)
level plus a fixed daily shape and ``Z`` is drawn from the noise law. Every
expert knows ``m`` and ``s`` but reports distorted quantiles
``m + s * (bias + dispersion * F^{-1}(p))``. Breaks change an expert's
distortion from a given time onwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import ExpertPanel, MarginalGrid, ObservationSeries, ProbGrid

_QUAD_POINTS = 4000


@dataclass(frozen=True)
class ExpertProfile:
    """Distortion of one expert; ``bias`` may be a scalar or one value per marginal."""

    bias: float | tuple = 0.0
    dispersion: float | tuple = 1.0


@dataclass(frozen=True)
class Break:
    """From ``time`` on, ``expert`` uses the given distortion (``None`` keeps the old value)."""

    time: int
    expert: int
    bias: float | tuple | None = None
    dispersion: float | tuple | None = None


@dataclass(frozen=True)
class ScenarioSpec:
    T: int = 600
    D: int = 4
    P: int = 9
    K: int = 3
    experts: tuple = (
        ExpertProfile(0.0, 1.0),
        ExpertProfile(0.6, 1.0),
        ExpertProfile(1.0, 1.4),
    )
    breaks: tuple = ()
    noise: str = "normal"
    df: float = 5.0
    level_ar: float = 0.8
    level_sd: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.K < 1 or len(self.experts) != self.K:
            raise ValueError("need exactly K >= 1 expert profiles")
        if min(self.T, self.D, self.P) < 1:
            raise ValueError("T, D and P must be positive")
        for b in self.breaks:
            if not 0 <= b.time < self.T:
                raise ValueError(f"break time {b.time} outside the horizon")
            if not 0 <= b.expert < self.K:
                raise ValueError(f"break refers to unknown expert {b.expert}")
        if self.noise not in ("normal", "student_t", "laplace"):
            raise ValueError(f"unknown noise law {self.noise!r}")


@dataclass(frozen=True)
class ScenarioOracle:
    """Ground truth: true quantiles, expected pinball losses and best expert per cell."""

    true_quantiles: np.ndarray  # (T, D, P)
    expected_loss: np.ndarray  # (T, D, P, K)
    best_expert: np.ndarray  # (T, D, P)
    marginal_scale: np.ndarray  # (D,)


@dataclass(frozen=True)
class Scenario:
    panel: ExpertPanel
    obs: ObservationSeries
    pgrid: ProbGrid
    dgrid: MarginalGrid
    oracle: ScenarioOracle = field(repr=False)


def _law(spec: ScenarioSpec):
    if spec.noise == "normal":
        return stats.norm()
    if spec.noise == "student_t":
        return stats.t(spec.df)
    return stats.laplace()


def _per_marginal(value, D: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, float), (D,))
    return arr.copy()


def _distortions(spec: ScenarioSpec):
    """Phase boundaries and per-phase ``(K, D)`` bias and dispersion arrays."""
    bias = np.stack([_per_marginal(e.bias, spec.D) for e in spec.experts])
    disp = np.stack([_per_marginal(e.dispersion, spec.D) for e in spec.experts])
    times = [0]
    phases = [(bias.copy(), disp.copy())]
    for b in sorted(spec.breaks, key=lambda b: b.time):
        if b.bias is not None:
            bias[b.expert] = _per_marginal(b.bias, spec.D)
        if b.dispersion is not None:
            disp[b.expert] = _per_marginal(b.dispersion, spec.D)
        if b.time == times[-1]:
            phases[-1] = (bias.copy(), disp.copy())
        else:
            times.append(b.time)
            phases.append((bias.copy(), disp.copy()))
    return times, phases


def expected_pinball(law, probs, offsets) -> np.ndarray:
    """``E rho_p(Z - q)`` for standardised ``Z``, by midpoint quadrature over quantiles."""
    u = (np.arange(_QUAD_POINTS) + 0.5) / _QUAD_POINTS
    z = law.ppf(u)
    probs = np.asarray(probs, float)[..., None]
    diff = z - np.asarray(offsets, float)[..., None]
    return np.mean(diff * (probs - (diff < 0)), axis=-1)


def generate_scenario(spec: ScenarioSpec = ScenarioSpec(), seed: int = 0) -> Scenario:
    """Draw a panel and observations; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    law = _law(spec)
    T, D, P, K = spec.T, spec.D, spec.P, spec.K
    pgrid = ProbGrid.equidistant(P)
    dgrid = MarginalGrid.range(D)
    zp = law.ppf(pgrid.probs)

    level = np.empty(T)
    prev = 0.0
    shocks = rng.normal(0.0, spec.level_sd, T)
    for t in range(T):
        prev = spec.level_ar * prev + shocks[t]
        level[t] = prev
    shape = 2.0 * np.sin(2 * np.pi * np.arange(D) / max(D, 1))
    m = level[:, None] + shape[None, :]
    s = spec.scale * (1.0 + 0.5 * np.cos(2 * np.pi * np.arange(D) / max(D, 1)))
    y = m + s[None, :] * law.rvs(size=(T, D), random_state=rng)

    true_q = m[:, :, None] + s[None, :, None] * zp[None, None, :]
    times, phases = _distortions(spec)
    bounds = times[1:] + [T]
    values = np.empty((T, D, P, K))
    exp_loss = np.empty((T, D, P, K))
    for start, stop, (bias, disp) in zip(times, bounds, phases):
        # offsets in standardised units, shape (D, P, K)
        off = bias.T[:, None, :] + disp.T[:, None, :] * zp[None, :, None]
        values[start:stop] = m[start:stop, :, None, None] + s[None, :, None, None] * off[None]
        loss = s[:, None, None] * expected_pinball(law, pgrid.probs[None, :, None], off)
        exp_loss[start:stop] = loss[None]
    best = np.argmin(exp_loss, axis=-1)
    oracle = ScenarioOracle(true_q, exp_loss, best, s)
    names = tuple(f"expert{k}" for k in range(K))
    return Scenario(ExpertPanel(values, names), ObservationSeries(y), pgrid, dgrid, oracle)


def stationary_spec(T: int = 2000, D: int = 4, P: int = 9) -> ScenarioSpec:
    """Expert 0 is exact; the others are biased in the same direction."""
    return ScenarioSpec(T=T, D=D, P=P, K=3)


def break_spec(T: int = 600, D: int = 4, P: int = 9, at: int | None = None) -> ScenarioSpec:
    """Two good experts swap roles at ``at`` (default mid-stream); a third stays poor."""
    at = T // 2 if at is None else at
    experts = (ExpertProfile(0.0, 1.0), ExpertProfile(1.5, 1.0), ExpertProfile(1.0, 1.4))
    breaks = (Break(at, 0, bias=1.5), Break(at, 1, bias=0.0))
    return ScenarioSpec(T=T, D=D, P=P, K=3, experts=experts, breaks=breaks)
