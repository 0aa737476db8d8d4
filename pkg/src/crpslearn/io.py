"""Long-format CSV ingestion and output.

Experts file columns: ``time, marginal, probability, expert, value``.
Observations file columns: ``time, marginal, value``. One row per cell, a
header row, comma separated, ``.`` as decimal mark. Floats are written with
the shortest representation that reads back exactly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pandas as pd

from .core import Bundle, ExpertPanel, MarginalGrid, ObservationSeries, ProbGrid, validate_panel

EXPERT_COLUMNS = ("time", "marginal", "probability", "expert", "value")
OBS_COLUMNS = ("time", "marginal", "value")
FORECAST_COLUMNS = ("time", "marginal", "probability", "value")
WEIGHT_COLUMNS = ("time", "marginal", "probability", "expert", "weight")


class IngestError(ValueError):
    """Malformed input file; the message names the file and offending line."""


def _line(row_index: int) -> int:
    # header is line 1
    return int(row_index) + 2


def _read(path, columns, numeric) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise IngestError(f"{path}: {exc}") from None
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise IngestError(f"{path}: missing column(s) {', '.join(missing)}; expected {', '.join(columns)}")
    df = df[list(columns)].copy()
    for col in columns:
        df[col] = df[col].str.strip()
        empty = df.index[df[col] == ""]
        if len(empty):
            raise IngestError(f"{path}, line {_line(empty[0])}: empty {col!r}")
    for col in numeric:
        try:
            # exact decimal-to-binary conversion, unlike pandas' fast parser
            df[col] = np.asarray(df[col].to_numpy(), dtype=float)
        except ValueError:
            bad = df.index[pd.to_numeric(df[col], errors="coerce").isna()]
            i = bad[0] if len(bad) else df.index[0]
            raise IngestError(f"{path}, line {_line(i)}: {col} {df.at[i, col]!r} is not a number") from None
    keys = [c for c in columns if c != columns[-1]]
    dup = df.index[df.duplicated(keys, keep="first")]
    if len(dup):
        i = dup[0]
        first = df.index[(df[keys] == df.loc[i, keys]).all(axis=1)][0]
        desc = ", ".join(f"{k}={df.at[i, k]}" for k in keys)
        raise IngestError(
            f"{path}, line {_line(i)}: duplicate key ({desc}), first seen on line {_line(first)}"
        )
    return df


def _time_labels(values: pd.Series) -> list:
    """Distinct time labels, numerically ordered when they are all numbers."""
    uniq = list(dict.fromkeys(values))
    num = pd.to_numeric(pd.Series(uniq), errors="coerce")
    if not num.isna().any():
        order = np.argsort(num.to_numpy(), kind="stable")
    else:
        order = np.argsort(np.array(uniq, dtype=object).astype(str), kind="stable")
    return [uniq[i] for i in order]


def _rectangular(df, path, axes: dict, value_col: str) -> np.ndarray:
    """Scatter rows into a dense array; raise naming the first empty cell."""
    shape = tuple(len(v) for v in axes.values())
    out = np.full(shape, np.nan)
    filled = np.zeros(shape, bool)
    idx = tuple(
        df[name].map({v: i for i, v in enumerate(labels)}).to_numpy()
        for name, labels in axes.items()
    )
    out[idx] = df[value_col].to_numpy()
    filled[idx] = True
    if not filled.all():
        hole = tuple(int(i) for i in np.argwhere(~filled)[0])
        desc = ", ".join(f"{name}={labels[i]}" for (name, labels), i in zip(axes.items(), hole))
        raise IngestError(f"{path}: panel is not rectangular; no row for ({desc})")
    return out


def read_experts(path):
    """Parse an experts file into ``(values, times, marginals, probs, names)``."""
    df = _read(path, EXPERT_COLUMNS, ("marginal", "probability", "value"))
    axes = {
        "time": _time_labels(df["time"]),
        "marginal": sorted(df["marginal"].unique()),
        "probability": sorted(df["probability"].unique()),
        "expert": list(dict.fromkeys(df["expert"])),
    }
    values = _rectangular(df, path, axes, "value")
    return values, tuple(axes["time"]), np.array(axes["marginal"]), np.array(axes["probability"]), tuple(axes["expert"])


def read_observations(path):
    """Parse an observations file into ``(values, times, marginals)``."""
    df = _read(path, OBS_COLUMNS, ("marginal", "value"))
    axes = {"time": _time_labels(df["time"]), "marginal": sorted(df["marginal"].unique())}
    return _rectangular(df, path, axes, "value"), tuple(axes["time"]), np.array(axes["marginal"])


def ingest(experts_file, obs_file) -> Bundle:
    """Read both files, align their axes and validate the resulting bundle."""
    values, times, marginals, probs, names = read_experts(experts_file)
    obs, obs_times, obs_marginals = read_observations(obs_file)
    problems = []
    if tuple(obs_times) != tuple(times):
        extra = sorted(set(obs_times) ^ set(times), key=str)[:5]
        problems.append(
            f"time labels differ between experts ({len(times)}) and observations "
            f"({len(obs_times)}); e.g. {extra}" if extra else "time labels are ordered differently"
        )
    if obs_marginals.shape != marginals.shape or np.any(obs_marginals != marginals):
        problems.append("marginal labels differ between experts and observations")
    if problems:
        raise IngestError("; ".join(problems))
    try:
        pgrid = ProbGrid(probs)
        dgrid = MarginalGrid(marginals)
    except ValueError as exc:
        raise IngestError(f"{experts_file}: {exc}") from None
    bundle = validate_panel(ExpertPanel(values, names), ObservationSeries(obs), pgrid, dgrid)
    return dataclasses.replace(bundle, times=times)


def _times(T: int, times) -> list:
    return list(times) if times is not None else list(range(T))


def _write(df: pd.DataFrame, path) -> None:
    # float_format=None keeps repr precision, which round-trips exactly
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def write_experts(path, panel, pgrid: ProbGrid, dgrid: MarginalGrid, times=None) -> None:
    values = np.asarray(getattr(panel, "values", panel), float)
    T, D, P, K = values.shape
    names = getattr(panel, "expert_names", None) or tuple(f"expert{k}" for k in range(K))
    t, d, p, k = np.meshgrid(np.arange(T), np.arange(D), np.arange(P), np.arange(K), indexing="ij")
    df = pd.DataFrame({
        "time": np.array(_times(T, times), dtype=object)[t.ravel()],
        "marginal": np.asarray(dgrid.marginals)[d.ravel()],
        "probability": np.asarray(pgrid.probs)[p.ravel()],
        "expert": np.array(names, dtype=object)[k.ravel()],
        "value": values.ravel(),
    })
    _write(df, path)


def write_observations(path, obs, dgrid: MarginalGrid, times=None) -> None:
    values = np.asarray(getattr(obs, "values", obs), float)
    T, D = values.shape
    t, d = np.meshgrid(np.arange(T), np.arange(D), indexing="ij")
    df = pd.DataFrame({
        "time": np.array(_times(T, times), dtype=object)[t.ravel()],
        "marginal": np.asarray(dgrid.marginals)[d.ravel()],
        "value": values.ravel(),
    })
    _write(df, path)


def write_forecasts(path, predictions, pgrid: ProbGrid, dgrid: MarginalGrid, times=None) -> None:
    values = np.asarray(predictions, float)
    T, D, P = values.shape
    t, d, p = np.meshgrid(np.arange(T), np.arange(D), np.arange(P), indexing="ij")
    df = pd.DataFrame({
        "time": np.array(_times(T, times), dtype=object)[t.ravel()],
        "marginal": np.asarray(dgrid.marginals)[d.ravel()],
        "probability": np.asarray(pgrid.probs)[p.ravel()],
        "value": values.ravel(),
    })
    _write(df, path)


def read_forecasts(path):
    """Parse a forecasts file into ``(values, times, marginals, probs)``."""
    df = _read(path, FORECAST_COLUMNS, ("marginal", "probability", "value"))
    axes = {
        "time": _time_labels(df["time"]),
        "marginal": sorted(df["marginal"].unique()),
        "probability": sorted(df["probability"].unique()),
    }
    values = _rectangular(df, path, axes, "value")
    return values, tuple(axes["time"]), np.array(axes["marginal"]), np.array(axes["probability"])


def write_weights(path, weights, pgrid: ProbGrid, dgrid: MarginalGrid, expert_names, times=None) -> None:
    """Weight trajectory ``(t, d, p, k)`` in long format."""
    values = np.asarray(weights, float)
    T, D, P, K = values.shape
    t, d, p, k = np.meshgrid(np.arange(T), np.arange(D), np.arange(P), np.arange(K), indexing="ij")
    df = pd.DataFrame({
        "time": np.array(_times(T, times), dtype=object)[t.ravel()],
        "marginal": np.asarray(dgrid.marginals)[d.ravel()],
        "probability": np.asarray(pgrid.probs)[p.ravel()],
        "expert": np.array(tuple(expert_names), dtype=object)[k.ravel()],
        "weight": values.ravel(),
    })
    _write(df, path)


def read_weights(path):
    """Parse a weights file into ``(values, times, marginals, probs, names)``."""
    df = _read(path, WEIGHT_COLUMNS, ("marginal", "probability", "weight"))
    axes = {
        "time": _time_labels(df["time"]),
        "marginal": sorted(df["marginal"].unique()),
        "probability": sorted(df["probability"].unique()),
        "expert": list(dict.fromkeys(df["expert"])),
    }
    values = _rectangular(df, path, axes, "weight")
    return values, tuple(axes["time"]), np.array(axes["marginal"]), np.array(axes["probability"]), tuple(axes["expert"])


def write_table(path, rows) -> None:
    """Write a list of dicts (or a DataFrame) as CSV."""
    df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    _write(df, path)
