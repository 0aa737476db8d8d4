"""Sampling-online hyperparameter selection.

A population of candidate configurations is run side by side; at every step
the forecast of the candidate with the lowest cumulative past CRPS is
emitted. Candidates are independent, so they are grouped into vectorised
:class:`~crpslearn.learner.LearnerBatch` objects and optionally advanced on
a thread pool.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import MarginalGrid, ProbGrid, crps_from_quantiles
from .learner import LearnerBatch, LearnerConfig, LearnerState, _batch_key
from .splines import SmoothSpec

TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "pow2": lambda x: np.power(2.0, x),
    "cubic_loc": lambda x: x**3 / 2.1 + 0.5,
    "cubic_scale": lambda x: x**3 / 1.1 + 1,
    "cubic": lambda x: x**3,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class ParamAxis:
    name: str
    raw_range: tuple[float, float]
    n_values: int = 16
    transform: str = "identity"
    clip: tuple[float, float] | None = None

    def values(self) -> np.ndarray:
        x = np.linspace(self.raw_range[0], self.raw_range[1], self.n_values)
        v = TRANSFORMS[self.transform](x)
        if self.clip is not None:
            v = np.clip(v, *self.clip)
        return v


# name -> (raw range, transform); theta is clipped to its admissible range
DEFAULT_AXES: tuple[ParamAxis, ...] = (
    ParamAxis("theta", (-12, 2), transform="pow2", clip=(0.0, 1.0)),
    ParamAxis("phi", (-15, 0), transform="pow2"),
    ParamAxis("nu", (-15, 0), transform="pow2"),
    ParamAxis("kappa", (-15, 0), transform="pow2"),
    ParamAxis("gamma", (-1, 1), transform="pow2"),
    ParamAxis("lambda_pr", (-5, 15), transform="pow2"),
    ParamAxis("lambda_mv", (-5, 15), transform="pow2"),
    ParamAxis("mu_pr", (-1, 1), transform="cubic_loc"),
    ParamAxis("sigma_pr", (-1, 1), transform="cubic_scale"),
    ParamAxis("c_pr", (-3, 3), transform="cubic"),
    ParamAxis("tau_pr", (-1, 1), transform="cubic_scale"),
    ParamAxis("mu_mv", (-1, 1), transform="cubic_loc"),
    ParamAxis("sigma_mv", (-1, 1), transform="cubic_scale"),
    ParamAxis("c_mv", (-3, 3), transform="cubic"),
    ParamAxis("tau_mv", (-1, 1), transform="cubic_scale"),
)

PARAM_NAMES = tuple(a.name for a in DEFAULT_AXES)

SPECS: dict[str, tuple[str, ...]] = {
    "full": PARAM_NAMES,
    "smooth-forget": ("theta", "lambda_pr", "lambda_mv"),
    "smooth": ("lambda_pr", "lambda_mv"),
    "forget": ("theta",),
}

_SPEC_ALIASES = {"smooth.forget": "smooth-forget", "smooth_forget": "smooth-forget"}

DEFAULT_PARAMS = {
    "theta": 0.0, "phi": 0.0, "nu": 0.0, "kappa": 0.0, "gamma": 1.0,
    "lambda_pr": 0.0, "lambda_mv": 0.0,
    "mu_pr": 0.5, "sigma_pr": 1.0, "c_pr": 0.0, "tau_pr": 1.0,
    "mu_mv": 0.5, "sigma_mv": 1.0, "c_mv": 0.0, "tau_mv": 1.0,
}


def normalize_spec_name(name: str) -> str:
    key = name.lower()
    return _SPEC_ALIASES.get(key, key)


def config_from_params(params: dict, base: LearnerConfig = LearnerConfig()) -> LearnerConfig:
    """Turn a flat hyperparameter row into a learner configuration."""
    p = {**DEFAULT_PARAMS, **params}

    def smooth(old: SmoothSpec, axis: str) -> SmoothSpec:
        return dataclasses.replace(old, lam=float(p[f"lambda_{axis}"]), mu=float(p[f"mu_{axis}"]),
                                   sigma=float(p[f"sigma_{axis}"]), c=float(p[f"c_{axis}"]),
                                   tau=float(p[f"tau_{axis}"]))

    return dataclasses.replace(
        base, theta=float(p["theta"]), phi=float(p["phi"]), nu=float(p["nu"]),
        kappa=float(p["kappa"]), gamma=float(p["gamma"]),
        smooth_pr=smooth(base.smooth_pr, "pr"), smooth_mv=smooth(base.smooth_mv, "mv"),
    )


@dataclass
class CandidateSet:
    """Candidate configurations and their running scores."""

    params: list[dict]
    candidates: list[LearnerConfig]
    cumulative_score: np.ndarray = None
    active_index: int = 0
    perf_forget: float = 0.0
    max_samples: int = 2500

    def __post_init__(self):
        if len(self.candidates) != len(self.params):
            raise ValueError("params and candidates differ in length")
        if not self.candidates:
            raise ValueError("no candidates")
        if len(self.candidates) > self.max_samples:
            raise ValueError(f"{len(self.candidates)} candidates exceed max_samples={self.max_samples}")
        if self.cumulative_score is None:
            self.cumulative_score = np.zeros(len(self.candidates))
        if not 0 <= self.perf_forget <= 1:
            raise ValueError("perf_forget must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.candidates)

    @classmethod
    def from_params(cls, params: Sequence[dict], base: LearnerConfig = LearnerConfig(),
                    **kwargs) -> "CandidateSet":
        params = [dict(p) for p in params]
        return cls(params, [config_from_params(p, base) for p in params], **kwargs)


def build_grid(spec_name: str, axes: Sequence[ParamAxis] = DEFAULT_AXES, max_samples: int = 2500,
               seed: int = 0, base: LearnerConfig = LearnerConfig(),
               perf_forget: float = 0.0) -> CandidateSet:
    """Cartesian grid over the axes a specification varies, subsampled to ``max_samples``.

    Subsampling is uniform without replacement and deterministic given
    ``seed``; sampled grid points are kept in grid order.
    """
    spec = normalize_spec_name(spec_name)
    if spec not in SPECS:
        raise ValueError(f"unknown tuning specification {spec_name!r}")
    by_name = {a.name: a for a in axes}
    varying = [by_name[n] for n in SPECS[spec] if n in by_name]
    if not varying:
        raise ValueError("no axes to vary")
    values = [a.values() for a in varying]
    sizes = [len(v) for v in values]
    total = math.prod(sizes)
    if total <= max_samples:
        index_rows = list(itertools.product(*(range(s) for s in sizes)))
    else:
        rng = np.random.default_rng(seed)
        if total < 10**7:
            flat = np.sort(rng.choice(total, size=max_samples, replace=False))
        else:
            chosen: set[int] = set()
            while len(chosen) < max_samples:
                draw = rng.integers(0, total, size=max_samples - len(chosen), dtype=np.int64)
                chosen.update(int(v) for v in draw)
            flat = np.array(sorted(chosen), dtype=np.int64)
        index_rows = [_unravel(int(f), sizes) for f in flat]
    params = []
    for row in index_rows:
        p = dict(DEFAULT_PARAMS)
        for axis, vals, i in zip(varying, values, row):
            p[axis.name] = float(vals[int(i)])
        params.append(p)
    return CandidateSet.from_params(params, base, perf_forget=perf_forget, max_samples=max_samples)


def _unravel(flat: int, sizes: Sequence[int]) -> tuple[int, ...]:
    out = []
    for s in reversed(sizes):
        flat, r = divmod(flat, s)
        out.append(r)
    return tuple(reversed(out))


def select_best(cset: CandidateSet) -> int:
    """Index of the lowest cumulative score; ties go to the lowest index."""
    return int(np.argmin(cset.cumulative_score))


@dataclass
class TuneRecord:
    active: list[int] = field(default_factory=list)


class SamplingOnlineTuner:
    """Runs all candidates and follows the best one so far.

    The prediction at step ``t`` comes from the candidate selected with
    scores up to ``t - 1``; the first ``score_skip`` steps do not enter the
    scores.
    """

    def __init__(self, cset: CandidateSet, dgrid: MarginalGrid, pgrid: ProbGrid, K: int,
                 workers: int = 1, chunk_size: int = 512, score_skip: int = 0):
        self.cset = cset
        self.pgrid = pgrid
        self.score_skip = score_skip
        groups: dict[tuple, list[int]] = {}
        for i, c in enumerate(cset.candidates):
            groups.setdefault(_batch_key(c), []).append(i)
        self.batches: list[tuple[np.ndarray, LearnerBatch]] = []
        for idx in groups.values():
            for start in range(0, len(idx), chunk_size):
                part = np.array(idx[start:start + chunk_size])
                self.batches.append(
                    (part, LearnerBatch([cset.candidates[i] for i in part], dgrid, pgrid, K)))
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 and len(self.batches) > 1 else None
        self.t = 0
        self.history = TuneRecord()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def candidate_state(self, index: int | None = None) -> LearnerState:
        """Copy of one candidate's learner state (the active one by default)."""
        index = self.cset.active_index if index is None else index
        for part, batch in self.batches:
            hit = np.nonzero(part == index)[0]
            if hit.size:
                i, st = hit[0], batch.state
                return LearnerState(beta=st.beta[i].copy(), beta0=st.beta0.copy(), R=st.R[i].copy(),
                                    V=st.V[i].copy(), E=st.E[i].copy(), eta=st.eta[i].copy(),
                                    w=st.w[i].copy(), t=st.t)
        raise IndexError(index)

    def current_weights(self, index: int | None = None) -> np.ndarray:
        """Weight field ``(D, P, K)`` that candidate ``index`` will use next."""
        index = self.cset.active_index if index is None else index
        for part, batch in self.batches:
            hit = np.nonzero(part == index)[0]
            if hit.size:
                return batch.state.w[hit[0]]
        raise IndexError(index)

    def step(self, experts_t, y_t):
        """Emit the active candidate's forecast, then advance and rescore every candidate.

        Returns ``(prediction, all_predictions)`` where ``all_predictions`` has
        shape ``(C, D, P)``.
        """
        experts_t = np.asarray(experts_t, float)
        y_t = np.asarray(y_t, float)
        C = len(self.cset)
        all_preds = np.empty((C,) + experts_t.shape[:2])
        if self._pool is None:
            results = [b.step(experts_t, y_t) for _, b in self.batches]
        else:
            results = list(self._pool.map(lambda pb: pb[1].step(experts_t, y_t), self.batches))
        for (part, _), pred in zip(self.batches, results):
            all_preds[part] = pred
        active = self.cset.active_index
        self.history.active.append(active)
        prediction = all_preds[active]
        if self.t >= self.score_skip:
            crps = crps_from_quantiles(all_preds, y_t[None, :], self.pgrid).mean(axis=-1)
            self.cset.cumulative_score = (1 - self.cset.perf_forget) * self.cset.cumulative_score + crps
        self.cset.active_index = select_best(self.cset)
        self.t += 1
        return prediction, all_preds

    def run(self, experts, obs, record_weights: bool = False):
        """Process a panel; returns predictions ``(T, D, P)`` and, optionally, the active weights."""
        experts = np.asarray(getattr(experts, "values", experts), float)
        obs = np.asarray(getattr(obs, "values", obs), float)
        preds = np.empty(experts.shape[:3])
        weights = np.empty(experts.shape) if record_weights else None
        for t in range(experts.shape[0]):
            if record_weights:
                weights[t] = self.current_weights()
            preds[t], _ = self.step(experts[t], obs[t])
        return (preds, weights) if record_weights else preds


def tune_step(tuner: SamplingOnlineTuner, experts_t, y_t) -> np.ndarray:
    """Functional alias for :meth:`SamplingOnlineTuner.step`; returns the emitted forecast."""
    return tuner.step(experts_t, y_t)[0]


def export_candidates(cset: CandidateSet, path) -> None:
    """Write one row per candidate with a header of parameter names."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PARAM_NAMES)
        for p in cset.params:
            writer.writerow([repr(float(p[n])) for n in PARAM_NAMES])


def import_candidates(path, base: LearnerConfig = LearnerConfig(), **kwargs) -> CandidateSet:
    """Read a candidate list; missing columns take their default values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        unknown = set(reader.fieldnames or ()) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown hyperparameter columns: {sorted(unknown)}")
        rows = []
        for line, row in enumerate(reader, start=2):
            try:
                rows.append({**DEFAULT_PARAMS, **{k: float(v) for k, v in row.items()}})
            except (TypeError, ValueError):
                raise ValueError(f"line {line}: non-numeric hyperparameter value") from None
    return CandidateSet.from_params(rows, base, **kwargs)
