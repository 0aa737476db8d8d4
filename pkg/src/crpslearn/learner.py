"""Online aggregation of quantile forecasts.

The update functions broadcast over any leading axes of the state arrays.
A :class:`Learner` runs one configuration; a :class:`LearnerBatch` stacks
many configurations that share their reduction bases along a leading
candidate axis so that they advance in a single vectorised step.

State arrays have shape ``(..., Dr, Pr, K)`` (reduced cells) and the weight
field ``(..., D, P, K)``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import MarginalGrid, ProbGrid
from .splines import BasisSpec, SmoothSpec, reduction_basis, smoothing_hat

logger = logging.getLogger(__name__)

SCHEMES = ("boa", "ewa", "ml-poly", "ftl")
SNAPSHOT_VERSION = 1

_TINY = 1e-300
_SUM_FLOOR = 1e-12


class NonFiniteStateError(FloatingPointError):
    """The learner state became non-finite; ``state`` holds the offending state."""

    def __init__(self, message: str, state: "LearnerState"):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters of one aggregation run.

    ``theta`` forgets hidden state, ``phi`` is the fixed share, ``nu`` and
    ``kappa`` the soft and hard thresholds, ``gamma`` multiplies the learning
    rate. Reduction bases and smoothing are configured per axis.
    """

    scheme: str = "boa"
    theta: float = 0.0
    phi: float = 0.0
    nu: float = 0.0
    kappa: float = 0.0
    gamma: float = 1.0
    basis_pr: BasisSpec = BasisSpec()
    basis_mv: BasisSpec = BasisSpec()
    smooth_pr: SmoothSpec = SmoothSpec()
    smooth_mv: SmoothSpec = SmoothSpec()
    ewa_eta: float = 1.0
    eta_ceiling: float = 1e6
    sort: bool = True
    scale2: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")
        if not 0 <= self.phi <= 1:
            raise ValueError("phi must lie in [0, 1]")
        if self.nu < 0 or self.kappa < 0:
            raise ValueError("thresholds must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        for key, typ in (("basis_pr", BasisSpec), ("basis_mv", BasisSpec),
                         ("smooth_pr", SmoothSpec), ("smooth_mv", SmoothSpec)):
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        return cls(**d)


@dataclass
class LearnerState:
    beta: np.ndarray
    beta0: np.ndarray
    R: np.ndarray
    V: np.ndarray
    E: np.ndarray
    eta: np.ndarray
    w: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class Operators:
    """Precomputed matrices for one learner (or a batch sharing reduction bases).

    ``None`` stands for an identity matrix. Hat matrices may carry a leading
    candidate axis.
    """

    Bmv: np.ndarray | None
    Bpr: np.ndarray | None
    Hmv: np.ndarray | None
    Hpr: np.ndarray | None
    probs: np.ndarray
    # hat @ basis, applied when expanding reduced weights
    Lmv: np.ndarray | None = field(default=None, repr=False)
    Lpr: np.ndarray | None = field(default=None, repr=False)


def _compose(H, B):
    if H is None:
        return B
    if B is None:
        return H
    return H @ B


def build_operators(dgrid: MarginalGrid, pgrid: ProbGrid, config: LearnerConfig) -> Operators:
    dunit = dgrid.unit_coordinates()
    Bmv = reduction_basis(dunit, config.basis_mv)
    Bpr = reduction_basis(pgrid.probs, config.basis_pr)
    Hmv = smoothing_hat(dunit, config.smooth_mv)
    Hpr = smoothing_hat(pgrid.probs, config.smooth_pr)
    return Operators(Bmv, Bpr, Hmv, Hpr, pgrid.probs, _compose(Hmv, Bmv), _compose(Hpr, Bpr))


def _pinv_project(w0: np.ndarray, Bmv, Bpr) -> np.ndarray:
    out = w0
    if Bmv is not None:
        out = np.einsum("ad,dpk->apk", np.linalg.pinv(Bmv), out)
    if Bpr is not None:
        out = np.einsum("bp,dpk->dbk", np.linalg.pinv(Bpr), out)
    return out


def init_state(K: int, dgrid: MarginalGrid, pgrid: ProbGrid, config: LearnerConfig,
               ops: Operators | None = None) -> LearnerState:
    """Uniform weights, zero regret statistics and the projected prior ``beta0``."""
    if ops is None:
        ops = build_operators(dgrid, pgrid, config)
    D, P = len(dgrid), len(pgrid)
    w0 = np.full((D, P, K), 1.0 / K)
    beta0 = _pinv_project(w0, ops.Bmv, ops.Bpr)
    zeros = np.zeros_like(beta0)
    return LearnerState(beta=beta0.copy(), beta0=beta0, R=zeros.copy(), V=zeros.copy(),
                        E=zeros.copy(), eta=zeros.copy(), w=w0, t=0)


def raw_combination(w, experts) -> np.ndarray:
    """Pointwise inner product over experts, before any rearrangement."""
    return np.einsum("...dpk,dpk->...dp", w, experts)


def combine(w, experts, sort: bool = True) -> np.ndarray:
    """Combine expert quantiles with weights ``w`` and sort each marginal."""
    w = np.asarray(getattr(w, "values", w), float)
    experts = np.asarray(experts, float)
    if w.shape[-3:] != experts.shape:
        raise ValueError(f"weight shape {w.shape} does not match experts {experts.shape}")
    out = raw_combination(w, experts)
    return np.sort(out, axis=-1) if sort else out


def instantaneous_regret(combined, experts, y, probs, scale2: bool = False) -> np.ndarray:
    """Linearised regret ``g * (combined - expert)`` per cell and expert.

    ``g`` is the pinball-loss subgradient at the combination, so the
    weighted regret of the combination itself is zero.
    """
    combined = np.asarray(combined, float)
    experts = np.asarray(experts, float)
    y = np.asarray(y, float)
    if not (np.all(np.isfinite(combined)) and np.all(np.isfinite(experts)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input to the regret")
    g = (combined > y[:, None]).astype(float) - np.asarray(probs, float)
    if scale2:
        g = 2 * g
    return g[..., None] * (combined[..., None] - experts)


def reduce_regret(r_full, Bmv=None, Bpr=None) -> np.ndarray:
    """Project the regret surface onto the reduced bases, scaled by ``Dr Pr / (D P)``."""
    r = np.asarray(r_full, float)
    if Bmv is None and Bpr is None:
        return r
    D, P = r.shape[-3], r.shape[-2]
    Dr = D if Bmv is None else Bmv.shape[1]
    Pr = P if Bpr is None else Bpr.shape[1]
    if Bmv is not None:
        if Bmv.shape[0] != D:
            raise ValueError("marginal basis does not match the regret")
        r = np.einsum("da,...dpk->...apk", Bmv, r)
    if Bpr is not None:
        if Bpr.shape[0] != P:
            raise ValueError("probability basis does not match the regret")
        r = np.einsum("pb,...dpk->...dbk", Bpr, r)
    return r * (Dr * Pr) / (D * P)


def softmax(x, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def boa_learning_rate(V, E, beta0, gamma=1.0, eta_ceiling=1e6) -> np.ndarray:
    """``gamma * min(sqrt(-log(beta0) / V), 1 / (2E))`` with guards for empty history.

    A cell-expert without any regret yet takes the largest finite rate of its
    cell, or ``eta_ceiling * gamma`` when the whole cell is still empty.
    """
    b0 = np.clip(beta0, 1e-12, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(V > 0, np.sqrt(-np.log(b0) / np.where(V > 0, V, 1.0)), np.inf)
        b = np.where(E > 0, 0.5 / np.where(E > 0, E, 1.0), np.inf)
    eta = gamma * np.minimum(a, b)
    empty = ~np.isfinite(eta)
    if empty.any():
        finite = np.where(empty, -np.inf, eta).max(axis=-1, keepdims=True)
        fill = np.where(np.isfinite(finite), finite, gamma * eta_ceiling * np.ones_like(finite))
        eta = np.where(empty, fill, eta)
    return np.maximum(eta, _TINY)


def boa_update(state: LearnerState, r_red, theta=0.0, gamma=1.0, eta_ceiling=1e6) -> LearnerState:
    """One Bernstein online aggregation step on the reduced cells."""
    r = np.asarray(r_red, float)
    keep = 1 - np.asarray(theta, float)
    V = keep * state.V + r**2
    E = np.maximum(keep * state.E, np.abs(r))
    eta = boa_learning_rate(V, E, state.beta0, gamma, eta_ceiling)
    R = keep * state.R + r * (1 - eta * r) / 2 + E * (2 * eta * r > 1)
    beta = state.beta.shape[-1] * state.beta0 * softmax(eta * R + np.log(eta))
    return dataclasses.replace(state, beta=beta, V=V, E=E, eta=eta, R=R)


def ewa_update(weights, losses, eta) -> np.ndarray:
    """Multiplicative weights: ``w_k exp(-eta l_k)``, renormalised over the last axis."""
    weights = np.asarray(weights, float)
    x = -np.asarray(eta, float) * np.asarray(losses, float)
    x = x - np.max(x, axis=-1, keepdims=True)
    out = weights * np.exp(x)
    return out / out.sum(axis=-1, keepdims=True)


def ewa_regret_update(state: LearnerState, r_red, theta=0.0, eta=1.0) -> LearnerState:
    """EWA in cumulative-regret form, which admits forgetting.

    With ``theta = 0`` this equals iterating :func:`ewa_update` on the
    linearised losses, since those differ from ``-r`` by a per-cell constant.
    """
    keep = 1 - np.asarray(theta, float)
    R = keep * state.R + r_red
    eta = np.broadcast_to(np.asarray(eta, float), R.shape)
    beta = R.shape[-1] * state.beta0 * softmax(eta * R)
    return dataclasses.replace(state, beta=beta, R=R, eta=np.array(eta))


def mlpoly_update(state: LearnerState, r_red, theta=0.0) -> LearnerState:
    """Polynomially weighted averages with per-expert rates ``1 / (1 + sum r^2)``."""
    keep = 1 - np.asarray(theta, float)
    R = keep * state.R + r_red
    V = keep * state.V + np.asarray(r_red) ** 2
    eta = 1.0 / (1.0 + V)
    num = eta * np.maximum(R, 0.0)
    total = num.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(total > 0, num / np.where(total > 0, total, 1.0), 1.0 / R.shape[-1])
    beta = R.shape[-1] * state.beta0 * share
    return dataclasses.replace(state, beta=beta, R=R, V=V, eta=eta)


def ftl_select(cumulative_losses) -> np.ndarray:
    """One-hot weight on the smallest cumulative loss (ties: lowest index)."""
    L = np.asarray(cumulative_losses, float)
    idx = np.argmin(L, axis=-1)
    out = np.zeros_like(L)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def ftl_update(state: LearnerState, r_red, theta=0.0) -> LearnerState:
    keep = 1 - np.asarray(theta, float)
    R = keep * state.R + r_red
    # linearised cumulative loss differs from -R by a per-cell constant
    return dataclasses.replace(state, beta=ftl_select(-R), R=R)


# the uniform fallback is reported once at warning level, later at debug level
_empty_warned = False


def apply_shrinkage(beta, phi=0.0, kappa=0.0, nu=0.0) -> np.ndarray:
    """Soft threshold, hard threshold, renormalise, then fixed share.

    Renormalisation only happens where a threshold is active; cells whose
    weights are thresholded away entirely fall back to uniform.
    """
    beta = np.asarray(beta, float)
    K = beta.shape[-1]
    phi, kappa, nu = (np.asarray(v, float) for v in (phi, kappa, nu))
    thresholded = (nu > 0) | (kappa > 0)
    if np.any(thresholded):
        x = np.sign(beta) * np.maximum(np.abs(beta) - nu, 0.0)
        x = x * (np.abs(x) > kappa)
        total = x.sum(axis=-1, keepdims=True)
        empty = total <= _SUM_FLOOR
        if np.any(empty & thresholded):
            global _empty_warned
            level = logging.DEBUG if _empty_warned else logging.WARNING
            _empty_warned = True
            logger.log(level, "thresholding removed all weight in %d cells; using uniform weights",
                       int(np.sum(np.broadcast_to(empty & thresholded, total.shape))))
        with np.errstate(invalid="ignore", divide="ignore"):
            x = np.where(empty, 1.0 / K, x / np.where(empty, 1.0, total))
        beta = np.where(thresholded, x, beta)
    if np.any(phi > 0):
        beta = phi / K + (1 - phi) * beta
    return beta


def _apply_left(L, X):
    # L: (..., D, Dr) or (D, Dr); X: (..., Dr, P, K)
    return np.einsum("...ia,...apk->...ipk", L, X)


def _apply_right(L, X):
    return np.einsum("...jb,...dbk->...djk", L, X)


def expand_weights(beta, Bmv=None, Bpr=None, Hmv=None, Hpr=None) -> np.ndarray:
    """Map reduced weights back onto the full grid, smooth, and renormalise per cell."""
    w = expand_reduced(beta, _compose(Hmv, Bmv), _compose(Hpr, Bpr))
    return normalize_weights(w)


def expand_reduced(beta, Lmv, Lpr) -> np.ndarray:
    w = np.asarray(beta, float)
    if Lmv is not None:
        w = _apply_left(Lmv, w)
    if Lpr is not None:
        w = _apply_right(Lpr, w)
    return w


def normalize_weights(w) -> np.ndarray:
    K = w.shape[-1]
    total = w.sum(axis=-1, keepdims=True)
    ok = total > _SUM_FLOOR
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ok, w / np.where(ok, total, 1.0), 1.0 / K)


@dataclass
class _Params:
    theta: np.ndarray | float
    phi: np.ndarray | float
    nu: np.ndarray | float
    kappa: np.ndarray | float
    gamma: np.ndarray | float
    ewa_eta: np.ndarray | float
    eta_ceiling: np.ndarray | float


def _params_of(configs: Sequence[LearnerConfig], batched: bool) -> _Params:
    def col(name):
        vals = np.array([getattr(c, name) for c in configs], float)
        return vals.reshape(-1, 1, 1, 1) if batched else float(vals[0])

    return _Params(*(col(n) for n in ("theta", "phi", "nu", "kappa", "gamma", "ewa_eta", "eta_ceiling")))


def advance(state: LearnerState, experts_t, y_t, ops: Operators, prm: _Params,
            scheme: str, sort: bool = True, scale2: bool = False):
    """Predict with the current weights, then learn from ``y_t``.

    Returns ``(prediction, raw_prediction, new_state)``; ``raw_prediction`` is
    the combination before sorting.
    """
    raw = raw_combination(state.w, experts_t)
    pred = np.sort(raw, axis=-1) if sort else raw
    r_full = instantaneous_regret(raw, experts_t, y_t, ops.probs, scale2)
    r_red = reduce_regret(r_full, ops.Bmv, ops.Bpr)
    if scheme == "boa":
        state = boa_update(state, r_red, prm.theta, prm.gamma, prm.eta_ceiling)
    elif scheme == "ewa":
        state = ewa_regret_update(state, r_red, prm.theta, prm.gamma * prm.ewa_eta)
    elif scheme == "ml-poly":
        state = mlpoly_update(state, r_red, prm.theta)
    elif scheme == "ftl":
        state = ftl_update(state, r_red, prm.theta)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    beta = apply_shrinkage(state.beta, prm.phi, prm.kappa, prm.nu)
    w = normalize_weights(expand_reduced(beta, ops.Lmv, ops.Lpr))
    state = dataclasses.replace(state, beta=beta, w=w, t=state.t + 1)
    if not all(np.all(np.isfinite(a)) for a in (beta, w, state.R, state.V, state.E)):
        raise NonFiniteStateError(f"non-finite learner state after step {state.t}", state)
    return pred, raw, state


def step(state: LearnerState, experts_t, y_t, config: LearnerConfig, ops: Operators):
    """One online iteration for a single configuration: ``(prediction, new_state)``."""
    pred, _, state = advance(state, np.asarray(experts_t, float), np.asarray(y_t, float), ops,
                             _params_of([config], False), config.scheme, config.sort, config.scale2)
    return pred, state


class Learner:
    """Single-configuration online learner.

    >>> learner = Learner(LearnerConfig(), MarginalGrid.range(2), ProbGrid.equidistant(3), K=2)
    >>> learner.step(experts_t, y_t)          # doctest: +SKIP
    """

    def __init__(self, config: LearnerConfig, dgrid: MarginalGrid, pgrid: ProbGrid, K: int):
        self.config = config
        self.dgrid, self.pgrid, self.K = dgrid, pgrid, K
        self.ops = build_operators(dgrid, pgrid, config)
        self.state = init_state(K, dgrid, pgrid, config, self.ops)
        self._prm = _params_of([config], False)
        self.last_raw: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        return self.state.w

    def step(self, experts_t, y_t) -> np.ndarray:
        pred, raw, self.state = advance(self.state, np.asarray(experts_t, float),
                                        np.asarray(y_t, float), self.ops, self._prm,
                                        self.config.scheme, self.config.sort, self.config.scale2)
        self.last_raw = raw
        return pred

    def run(self, experts, obs, record_weights: bool = False):
        """Feed a whole panel; returns predictions ``(T, D, P)`` and optionally weights ``(T, D, P, K)``.

        The weights recorded at ``t`` are the ones used to form prediction ``t``.
        """
        experts = np.asarray(getattr(experts, "values", experts), float)
        obs = np.asarray(getattr(obs, "values", obs), float)
        T = experts.shape[0]
        preds = np.empty(experts.shape[:3])
        weights = np.empty(experts.shape) if record_weights else None
        for t in range(T):
            if record_weights:
                weights[t] = self.state.w
            preds[t] = self.step(experts[t], obs[t])
        return (preds, weights) if record_weights else preds

    def snapshot(self) -> bytes:
        return save_state(self.state, self.config)

    def restore(self, blob: bytes) -> None:
        state, config = load_state(blob)
        if config != self.config:
            raise ValueError("snapshot was taken with a different configuration")
        self.state = state


def _batch_key(config: LearnerConfig) -> tuple:
    return (config.scheme, config.basis_pr, config.basis_mv, config.sort, config.scale2)


def _stack_hats(hats: list, n: int) -> np.ndarray | None:
    if all(h is None for h in hats):
        return None
    first = next(h for h in hats if h is not None)
    if all(h is first for h in hats):
        return first
    eye = np.eye(n)
    return np.stack([eye if h is None else h for h in hats])


class LearnerBatch:
    """Many configurations advanced together along a leading candidate axis.

    All configurations must share scheme, reduction bases and sorting; the
    smoothing and scalar hyperparameters may differ.
    """

    def __init__(self, configs: Sequence[LearnerConfig], dgrid: MarginalGrid,
                 pgrid: ProbGrid, K: int):
        configs = list(configs)
        if not configs:
            raise ValueError("empty batch")
        keys = {_batch_key(c) for c in configs}
        if len(keys) != 1:
            raise ValueError("configurations in a batch must share scheme, bases and sorting")
        self.configs = configs
        self.dgrid, self.pgrid, self.K = dgrid, pgrid, K
        c0 = configs[0]
        dunit = dgrid.unit_coordinates()
        Bmv = reduction_basis(dunit, c0.basis_mv)
        Bpr = reduction_basis(pgrid.probs, c0.basis_pr)
        Hmv = _stack_hats([smoothing_hat(dunit, c.smooth_mv) for c in configs], len(dgrid))
        Hpr = _stack_hats([smoothing_hat(pgrid.probs, c.smooth_pr) for c in configs], len(pgrid))
        self.ops = Operators(Bmv, Bpr, Hmv, Hpr, pgrid.probs, _compose(Hmv, Bmv), _compose(Hpr, Bpr))
        single = init_state(K, dgrid, pgrid, c0, self.ops)
        C = len(configs)
        tile = lambda a: np.broadcast_to(a, (C,) + a.shape).copy()
        self.state = LearnerState(beta=tile(single.beta), beta0=single.beta0, R=tile(single.R),
                                  V=tile(single.V), E=tile(single.E), eta=tile(single.eta),
                                  w=tile(single.w), t=0)
        self._prm = _params_of(configs, True)

    def __len__(self) -> int:
        return len(self.configs)

    def step(self, experts_t, y_t) -> np.ndarray:
        """Advance every candidate; returns predictions ``(C, D, P)``."""
        c0 = self.configs[0]
        pred, _, self.state = advance(self.state, np.asarray(experts_t, float),
                                      np.asarray(y_t, float), self.ops, self._prm,
                                      c0.scheme, c0.sort, c0.scale2)
        return pred


def save_state(state: LearnerState, config: LearnerConfig | None = None,
               extra: dict | None = None) -> bytes:
    """Serialise a state to ``.npz`` bytes (see README for the layout).

    ``extra`` is any JSON-serialisable metadata stored alongside.
    """
    buf = io.BytesIO()
    meta = {"format": "crpslearn-state", "version": SNAPSHOT_VERSION, "t": int(state.t),
            "config": config.to_dict() if config is not None else None, "extra": extra or {}}
    np.savez(buf, beta=state.beta, beta0=state.beta0, R=state.R, V=state.V, E=state.E,
             eta=state.eta, w=state.w, meta=np.array(json.dumps(meta)))
    return buf.getvalue()


def load_state(blob: bytes):
    """Inverse of :func:`save_state`; returns ``(state, config_or_None)``."""
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "crpslearn-state":
            raise ValueError("not a learner snapshot")
        if meta["version"] != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {meta['version']}")
        state = LearnerState(beta=z["beta"], beta0=z["beta0"], R=z["R"], V=z["V"], E=z["E"],
                             eta=z["eta"], w=z["w"], t=meta["t"])
    config = LearnerConfig.from_dict(meta["config"]) if meta["config"] else None
    return state, config


def snapshot_metadata(blob: bytes) -> dict:
    """The JSON metadata of a snapshot (format, version, t, config, extra)."""
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
    if meta.get("format") != "crpslearn-state":
        raise ValueError("not a learner snapshot")
    return meta
