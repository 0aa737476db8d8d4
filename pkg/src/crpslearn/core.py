"""Grids, forecast panels and quantile losses.

Everything here is pure. Containers validate themselves on construction and
their arrays are marked read-only so they can be shared between learners.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a panel/observation bundle is inconsistent.

    ``problems`` lists every violation that was found, not only the first.
    """

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


@dataclass(frozen=True)
class ProbGrid:
    """Strictly increasing probabilities in the open unit interval."""

    probs: np.ndarray = field(default_factory=lambda: np.round(np.arange(1, 100) / 100, 2))

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probability grid must be a nonempty 1-d sequence")
        if np.any(probs <= 0) or np.any(probs >= 1):
            raise ValueError("probabilities must lie in (0, 1)")
        if np.any(np.diff(probs) <= 0):
            raise ValueError("probabilities must be strictly increasing")
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return self.probs.size

    @classmethod
    def equidistant(cls, n: int) -> "ProbGrid":
        """``n`` equidistant probabilities ``1/(n+1), ..., n/(n+1)``."""
        return cls(np.arange(1, n + 1) / (n + 1))


@dataclass(frozen=True)
class MarginalGrid:
    """Ordered coordinates of the marginals (e.g. hours of the day)."""

    marginals: np.ndarray

    def __post_init__(self):
        m = _frozen(self.marginals)
        if m.ndim != 1 or m.size == 0:
            raise ValueError("marginal grid must be a nonempty 1-d sequence")
        if np.any(np.diff(m) <= 0):
            raise ValueError("marginal coordinates must be strictly increasing")
        object.__setattr__(self, "marginals", m)

    def __len__(self) -> int:
        return self.marginals.size

    @classmethod
    def range(cls, n: int) -> "MarginalGrid":
        return cls(np.arange(1, n + 1, dtype=float))

    def unit_coordinates(self) -> np.ndarray:
        """Coordinates rescaled onto [0, 1]; a single marginal maps to 0.5."""
        m = self.marginals
        if m.size == 1:
            return np.array([0.5])
        return (m - m[0]) / (m[-1] - m[0])


@dataclass(frozen=True)
class ExpertPanel:
    """Expert quantile forecasts indexed ``(time, marginal, probability, expert)``."""

    values: np.ndarray
    expert_names: tuple = ()

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 4:
            raise ValueError(f"expert panel must be 4-d (t, d, p, k), got shape {v.shape}")
        names = tuple(self.expert_names) or tuple(f"expert{k}" for k in range(v.shape[3]))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "expert_names", names)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class ObservationSeries:
    """Realisations indexed ``(time, marginal)``."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise ValueError(f"observations must be 2-d (t, d), got shape {v.shape}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class WeightField:
    """Combination weights ``(marginal, probability, expert)`` at one time step."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3:
            raise ValueError("weight field must be 3-d (d, p, k)")
        if not np.allclose(v.sum(axis=-1), 1.0, rtol=0, atol=1e-10):
            raise ValueError("weights must sum to one over experts")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Bundle:
    panel: ExpertPanel
    obs: ObservationSeries
    pgrid: ProbGrid
    dgrid: MarginalGrid
    times: tuple | None = None  # optional labels of the time axis

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.panel.shape


def quantile_loss(p, pred, y):
    """Pinball loss ``rho_p(y - pred)``; works elementwise on arrays."""
    p, pred, y = np.asarray(p, float), np.asarray(pred, float), np.asarray(y, float)
    _check_finite(p, pred, y)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    z = y - pred
    out = z * (p - (z < 0))
    return out[()] if out.ndim == 0 else out


def quantile_loss_subgradient(p, pred, y):
    """Subgradient of the pinball loss in ``pred``: ``1{pred > y} - p``.

    At ``pred == y`` the indicator is taken as 0.
    """
    p, pred, y = np.asarray(p, float), np.asarray(pred, float), np.asarray(y, float)
    _check_finite(p, pred, y)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    out = (pred > y).astype(float) - p
    return out[()] if out.ndim == 0 else out


def crps_from_quantiles(preds, y, probs=None, scale2: bool = False, axis: int = -1):
    """Grid approximation of the CRPS from quantile forecasts.

    Parameters
    ----------
    preds : array_like
        Quantile forecasts; the probability axis is ``axis``.
    y : array_like
        Observation(s), broadcastable against ``preds`` with ``axis`` removed.
    probs : array_like or ProbGrid, optional
        Probability grid aligned with ``preds``. Defaults to the percentile grid.
    scale2 : bool
        Multiply by 2 (textbook scaling). Off by default so scores are the
        plain average of the quantile losses.
    """
    preds = np.asarray(preds, float)
    if probs is None:
        probs = ProbGrid().probs
    elif isinstance(probs, ProbGrid):
        probs = probs.probs
    probs = np.asarray(probs, float)
    preds = np.moveaxis(preds, axis, -1)
    if preds.shape[-1] != probs.size:
        raise ValueError(
            f"forecast has {preds.shape[-1]} quantiles but the grid has {probs.size}"
        )
    y = np.asarray(y, float)[..., None]
    score = quantile_loss(probs, preds, y).mean(axis=-1)
    return 2 * score if scale2 else score


def sort_quantiles(preds, axis: int = -1) -> np.ndarray:
    """Monotone rearrangement of quantile forecasts along ``axis``."""
    preds = np.asarray(preds, float)
    _check_finite(preds)
    return np.sort(preds, axis=axis)


def validate_panel(panel, obs, pgrid: ProbGrid, dgrid: MarginalGrid) -> Bundle:
    """Check shapes and finiteness; collect every violation before raising."""
    problems = []
    pv = np.asarray(getattr(panel, "values", panel), float)
    ov = np.asarray(getattr(obs, "values", obs), float)
    if pv.ndim != 4:
        raise ValidationError([f"expert panel must be 4-d (t, d, p, k), got shape {pv.shape}"])
    if ov.ndim != 2:
        raise ValidationError([f"observations must be 2-d (t, d), got shape {ov.shape}"])
    T, D, P, K = pv.shape
    if ov.shape[0] != T:
        problems.append(f"time axis mismatch: panel has T={T}, observations have T={ov.shape[0]}")
    if ov.shape[1] != D:
        problems.append(f"marginal axis mismatch: panel has D={D}, observations have D={ov.shape[1]}")
    if len(dgrid) != D:
        problems.append(f"marginal axis mismatch: panel has D={D}, marginal grid has {len(dgrid)}")
    if len(pgrid) != P:
        problems.append(f"probability axis mismatch: panel has P={P}, probability grid has {len(pgrid)}")
    names = getattr(panel, "expert_names", None)
    if names is not None and len(names) != K:
        problems.append(f"expert axis mismatch: panel has K={K}, {len(names)} expert names")
    for idx in np.argwhere(~np.isfinite(pv)):
        t, d, p, k = (int(i) for i in idx)
        problems.append(f"non-finite expert value at (t={t}, d={d}, p={p}, k={k})")
    for idx in np.argwhere(~np.isfinite(ov)):
        t, d = (int(i) for i in idx)
        problems.append(f"non-finite observation at (t={t}, d={d})")
    if problems:
        raise ValidationError(problems)
    if not isinstance(panel, ExpertPanel):
        panel = ExpertPanel(pv)
    if not isinstance(obs, ObservationSeries):
        obs = ObservationSeries(ov)
    return Bundle(panel, obs, pgrid, dgrid)
