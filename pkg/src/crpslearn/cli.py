"""Command-line interface.

Subcommands: ``simulate``, ``combine``, ``tune``, ``evaluate`` and
``export-weights``. Settings come from dataclass defaults, then an optional
flat ``key = value`` config file, then command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import evaluation as ev
from . import io as cio
from .core import Bundle, MarginalGrid, ProbGrid, ValidationError
from .learner import SCHEMES, Learner, LearnerConfig, NonFiniteStateError, save_state
from .learner import load_state, snapshot_metadata
from .scenario import break_spec, generate_scenario, stationary_spec
from .splines import BasisSpec
from .tuner import (DEFAULT_PARAMS, CandidateSet, PARAM_NAMES, SPECS, SamplingOnlineTuner, build_grid,
                    config_from_params, export_candidates, import_candidates, normalize_spec_name)

logger = logging.getLogger("crpslearn")

NESTED_SPECS = ("naive", "constant", "constant-mv", "constant-pr", "pointwise")
ALL_SPECS = tuple(SPECS) + NESTED_SPECS
COMMANDS = ("simulate", "combine", "tune", "evaluate", "export-weights")
SCENARIOS = ("stationary", "break")


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    command: str = "combine"
    experts: str | None = None
    observations: str | None = None
    scenario: str | None = None
    T: int = 600
    D: int = 4
    P: int = 9
    noise: str = "normal"
    spec: str = "smooth-forget"
    scheme: str = "boa"
    burn_in: int = 182
    eval_skip: int = 50
    seed: int = 0
    output: str = "out"
    perf_forget: float = 0.0
    workers: int = 1
    max_samples: int = 2500
    candidates: str | None = None
    sort: bool = True
    write_weights: bool = True
    forecasts: list = field(default_factory=list)  # NAME=PATH for evaluate
    state: str | None = None  # snapshot for export-weights
    params: dict = field(default_factory=dict)  # hyperparameter overrides

    def validate(self) -> None:
        problems = []
        if self.command not in COMMANDS:
            problems.append(f"unknown command {self.command!r}")
        if normalize_spec_name(self.spec) not in ALL_SPECS:
            problems.append(f"unknown spec {self.spec!r}; expected one of {', '.join(ALL_SPECS)}")
        if self.scheme not in SCHEMES:
            problems.append(f"unknown scheme {self.scheme!r}")
        if self.scenario is not None and self.scenario not in SCENARIOS:
            problems.append(f"unknown scenario {self.scenario!r}")
        unknown = set(self.params) - set(PARAM_NAMES)
        if unknown:
            problems.append(f"unknown hyperparameters {sorted(unknown)}")
        if self.burn_in < 0 or self.eval_skip < 0:
            problems.append("burn_in and eval_skip must be nonnegative")
        if not 0 <= self.perf_forget <= 1:
            problems.append("perf_forget must lie in [0, 1]")
        if self.command in ("combine", "tune", "evaluate"):
            has_files = self.experts is not None and self.observations is not None
            if not has_files and self.scenario is None:
                problems.append("need --experts and --observations, or --scenario")
            for p in (self.experts, self.observations):
                if p is not None and not Path(p).exists():
                    problems.append(f"input file {p} does not exist")
        if self.command == "simulate" and self.scenario is None:
            problems.append("simulate needs --scenario")
        if self.command == "export-weights" and self.state is None:
            problems.append("export-weights needs --state")
        if self.command == "evaluate" and not self.forecasts:
            problems.append("evaluate needs at least one --forecasts NAME=PATH")
        if problems:
            raise ValueError("; ".join(problems))


# ---------------------------------------------------------------- settings

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    typ = _FIELD_TYPES[name]
    if not isinstance(value, str):
        return value
    if typ == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "list":
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; keys are RunConfig fields or hyperparameter names."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    out: dict = {"params": {}}
    for section in parser.sections():
        for key, value in parser.items(section):
            key = key.strip().replace("-", "_")
            if key in PARAM_NAMES:
                out["params"][key] = float(value)
            elif key in _FIELD_TYPES and key != "params":
                out[key] = _coerce(key, value)
            else:
                raise ValueError(f"{path}: unknown config key {key!r}")
    return out


def _parse_param(text: str) -> tuple[str, float]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    k = k.strip().replace("-", "_")
    if k not in PARAM_NAMES:
        raise argparse.ArgumentTypeError(f"unknown hyperparameter {k!r}")
    return k, float(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crpslearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--output", "-o", default=S, help="output directory")
        p.add_argument("--seed", type=int, default=S)

    def data(p):
        p.add_argument("--experts", default=S, help="experts CSV (time, marginal, probability, expert, value)")
        p.add_argument("--observations", default=S, help="observations CSV (time, marginal, value)")
        p.add_argument("--scenario", choices=SCENARIOS, default=S, help="use a synthetic scenario instead")
        p.add_argument("--T", type=int, default=S)
        p.add_argument("--D", type=int, default=S)
        p.add_argument("--P", type=int, default=S)
        p.add_argument("--noise", choices=("normal", "student_t", "laplace"), default=S)
        p.add_argument("--burn-in", dest="burn_in", type=int, default=S)

    def learner(p):
        p.add_argument("--spec", choices=ALL_SPECS, default=S)
        p.add_argument("--scheme", choices=SCHEMES, default=S)
        p.add_argument("--param", dest="param_list", action="append", type=_parse_param, default=S,
                       metavar="NAME=VALUE", help="hyperparameter override (repeatable)")
        p.add_argument("--no-sort", dest="sort", action="store_false", default=S)
        p.add_argument("--no-weights", dest="write_weights", action="store_false", default=S,
                       help="skip weights.csv")

    p = sub.add_parser("simulate", help="write a synthetic panel and observations")
    common(p)
    data(p)

    p = sub.add_parser("combine", help="run one configuration")
    common(p)
    data(p)
    learner(p)

    p = sub.add_parser("tune", help="online selection among candidate configurations")
    common(p)
    data(p)
    learner(p)
    p.add_argument("--eval-skip", dest="eval_skip", type=int, default=S)
    p.add_argument("--perf-forget", dest="perf_forget", type=float, default=S)
    p.add_argument("--workers", type=int, default=S)
    p.add_argument("--max-samples", dest="max_samples", type=int, default=S)
    p.add_argument("--candidates", default=S, help="candidate list CSV to use instead of a grid")

    p = sub.add_parser("evaluate", help="score forecast files against observations")
    common(p)
    data(p)
    p.add_argument("--forecasts", action="append", default=S, metavar="NAME=PATH")

    p = sub.add_parser("export-weights", help="write the weights stored in a state snapshot")
    common(p)
    p.add_argument("--state", default=S, help="snapshot written by combine or tune")
    return parser


def config_from_args(argv=None) -> tuple[RunConfig, int]:
    args = build_parser().parse_args(argv)
    values = vars(args)
    verbose = values.pop("verbose", 0)
    settings: dict = {"params": {}}
    path = values.pop("config", None)
    if path:
        settings.update(read_config_file(path))
    plist = values.pop("param_list", None)
    settings.update(values)
    if plist:
        settings["params"] = {**settings["params"], **dict(plist)}
    if "spec" in settings:
        settings["spec"] = normalize_spec_name(settings["spec"])
    return RunConfig(**settings), verbose


# ---------------------------------------------------------------- pipeline

def learner_config(spec: str, scheme: str, params: dict, sort: bool = True) -> LearnerConfig:
    """Single configuration for a named specification.

    Tunable specifications use the default hyperparameters (pointwise, no
    forgetting) unless overridden by ``params``.
    """
    spec = normalize_spec_name(spec)
    base = LearnerConfig(scheme=scheme, sort=sort)
    if spec == "naive":
        return config_from_params({**params, "phi": 1.0}, base)
    if spec == "constant":
        base = dataclasses.replace(base, basis_pr=BasisSpec("constant"), basis_mv=BasisSpec("constant"))
    elif spec == "constant-mv":
        base = dataclasses.replace(base, basis_mv=BasisSpec("constant"))
    elif spec == "constant-pr":
        base = dataclasses.replace(base, basis_pr=BasisSpec("constant"))
    elif spec == "pointwise":
        params = {**params, "lambda_pr": 0.0, "lambda_mv": 0.0}
    return config_from_params(params, base)


def _load_data(cfg: RunConfig):
    if cfg.experts is not None:
        return cio.ingest(cfg.experts, cfg.observations), None
    if cfg.scenario == "stationary":
        spec = dataclasses.replace(stationary_spec(cfg.T, cfg.D, cfg.P), noise=cfg.noise)
    else:
        spec = dataclasses.replace(break_spec(cfg.T, cfg.D, cfg.P), noise=cfg.noise)
    sc = generate_scenario(spec, cfg.seed)
    return Bundle(sc.panel, sc.obs, sc.pgrid, sc.dgrid, tuple(range(spec.T))), sc


def _naive(values: np.ndarray) -> np.ndarray:
    return np.sort(values.mean(axis=-1), axis=-1)


def _check_window(cfg: RunConfig, T: int) -> None:
    if cfg.burn_in >= T:
        raise ValueError(f"burn_in={cfg.burn_in} leaves no evaluation window for T={T}")


def _score_rows(bundle, models: dict, burn_in: int) -> list[dict]:
    values = bundle.panel.values
    all_models = dict(models)
    all_models.setdefault("naive", (_naive(values), "naive", "-"))
    for k, name in enumerate(bundle.panel.expert_names):
        all_models.setdefault(name, (values[..., k], "expert", "-"))
    return ev.score_summary(all_models, bundle.obs, bundle.pgrid, "naive", burn_in)


def _test_rows(name: str, preds, bundle, burn_in: int) -> list[dict]:
    rows = []
    probs = bundle.pgrid.probs
    marg = bundle.dgrid.marginals
    for level, (lo, hi) in ev.INTERVALS.items():
        if not (probs[0] - 1e-9 <= lo and hi <= probs[-1] + 1e-9):
            logger.info("probability grid does not reach %s/%s; skipping %d%% interval tests",
                        lo, hi, int(level * 100))
            continue
        for method in ("kupiec", "christoffersen"):
            if method == "christoffersen" and bundle.obs.values.shape[0] - burn_in < 2:
                continue
            res = ev.coverage_test(preds, bundle.obs, bundle.pgrid, level, burn_in, method)
            for d in range(len(marg)):
                rows.append({
                    "model": name, "test": method, "level": level, "marginal": marg[d],
                    "violations": int(res.violations[d]), "n": res.n,
                    "statistic": float(res.statistic[d]), "p_value": float(res.p_value[d]),
                    "signif": ev.significance_code(res.p_value[d]),
                })
    count, _ = ev.crossing_days(np.asarray(preds)[burn_in:])
    rows.append({"model": name, "test": "crossing_days", "level": "", "marginal": "",
                 "violations": count, "n": bundle.obs.values.shape[0] - burn_in,
                 "statistic": float(count), "p_value": "", "signif": ""})
    return rows


def _write_common(out: Path, cfg: RunConfig, bundle, name: str, preds, weights, state_blob) -> None:
    cio.write_forecasts(out / "forecasts.csv", preds, bundle.pgrid, bundle.dgrid, bundle.times)
    if weights is not None:
        cio.write_weights(out / "weights.csv", weights, bundle.pgrid, bundle.dgrid,
                          bundle.panel.expert_names, bundle.times)
    models = {name: (preds, normalize_spec_name(cfg.spec), cfg.scheme)}
    cio.write_table(out / "scores.csv", _score_rows(bundle, models, cfg.burn_in))
    cio.write_table(out / "tests.csv", _test_rows(name, preds, bundle, cfg.burn_in))
    (out / "state.npz").write_bytes(state_blob)


def _snapshot_extra(bundle) -> dict:
    return {"marginals": bundle.dgrid.marginals.tolist(), "probs": bundle.pgrid.probs.tolist(),
            "experts": list(bundle.panel.expert_names)}


def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    bundle, sc = _load_data(dataclasses.replace(cfg, experts=None))
    cio.write_experts(out / "experts.csv", bundle.panel, bundle.pgrid, bundle.dgrid, bundle.times)
    cio.write_observations(out / "observations.csv", bundle.obs, bundle.dgrid, bundle.times)
    T, D, P, _ = bundle.panel.shape
    truth = {
        "time": np.repeat(np.arange(T), D * P),
        "marginal": np.tile(np.repeat(bundle.dgrid.marginals, P), T),
        "probability": np.tile(bundle.pgrid.probs, T * D),
        "true_quantile": sc.oracle.true_quantiles.ravel(),
        "best_expert": np.array(bundle.panel.expert_names)[sc.oracle.best_expert.ravel()],
    }
    cio.write_table(out / "oracle.csv", pd.DataFrame(truth))
    logger.info("wrote scenario %s with T=%d, D=%d, P=%d to %s", cfg.scenario, T, D, P, out)


def cmd_combine(cfg: RunConfig, out: Path) -> None:
    bundle, _ = _load_data(cfg)
    _check_window(cfg, bundle.panel.shape[0])
    config = learner_config(cfg.spec, cfg.scheme, cfg.params, cfg.sort)
    K = bundle.panel.shape[3]
    learner = Learner(config, bundle.dgrid, bundle.pgrid, K)
    t0 = time.perf_counter()
    result = learner.run(bundle.panel, bundle.obs, record_weights=cfg.write_weights)
    preds, weights = result if cfg.write_weights else (result, None)
    logger.info("combined %d steps in %.2fs", bundle.panel.shape[0], time.perf_counter() - t0)
    params = {**DEFAULT_PARAMS, **cfg.params}
    if normalize_spec_name(cfg.spec) == "naive":
        params["phi"] = 1.0
    T = bundle.panel.shape[0]
    rows = [{"time": bundle.times[t] if bundle.times else t, "candidate": 0, **params} for t in range(T)]
    cio.write_table(out / "hyperparams.csv", rows)
    blob = save_state(learner.state, config, _snapshot_extra(bundle))
    _write_common(out, cfg, bundle, "combination", preds, weights, blob)


def cmd_tune(cfg: RunConfig, out: Path) -> None:
    bundle, _ = _load_data(cfg)
    _check_window(cfg, bundle.panel.shape[0])
    spec = normalize_spec_name(cfg.spec)
    base = learner_config(spec, cfg.scheme, cfg.params, cfg.sort)
    if cfg.candidates is not None:
        cset = import_candidates(cfg.candidates, base, perf_forget=cfg.perf_forget,
                                 max_samples=cfg.max_samples)
    elif spec in SPECS:
        cset = build_grid(spec, max_samples=cfg.max_samples, seed=cfg.seed, base=base,
                          perf_forget=cfg.perf_forget)
    else:
        cset = CandidateSet([{**DEFAULT_PARAMS, **cfg.params}], [base], perf_forget=cfg.perf_forget,
                            max_samples=cfg.max_samples)
    logger.info("tuning over %d candidates", len(cset))
    K = bundle.panel.shape[3]
    t0 = time.perf_counter()
    with SamplingOnlineTuner(cset, bundle.dgrid, bundle.pgrid, K, workers=cfg.workers,
                             score_skip=cfg.eval_skip) as tuner:
        result = tuner.run(bundle.panel, bundle.obs, record_weights=cfg.write_weights)
        state = tuner.candidate_state()
        active = list(tuner.history.active)
    preds, weights = result if cfg.write_weights else (result, None)
    logger.info("tuned %d steps in %.2fs", bundle.panel.shape[0], time.perf_counter() - t0)
    rows = [{"time": bundle.times[t] if bundle.times else t, "candidate": a, **cset.params[a]}
            for t, a in enumerate(active)]
    cio.write_table(out / "hyperparams.csv", rows)
    export_candidates(cset, out / "candidates.csv")
    blob = save_state(state, cset.candidates[cset.active_index], _snapshot_extra(bundle))
    _write_common(out, cfg, bundle, "combination", preds, weights, blob)


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    bundle, _ = _load_data(cfg)
    _check_window(cfg, bundle.panel.shape[0])
    models, tests = {}, []
    for item in cfg.forecasts:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).stem, item
        values, times, marginals, probs = cio.read_forecasts(path)
        if values.shape != bundle.panel.shape[:3]:
            raise ValueError(f"{path}: forecasts {values.shape} do not match the panel {bundle.panel.shape[:3]}")
        if not (np.allclose(marginals, bundle.dgrid.marginals) and np.allclose(probs, bundle.pgrid.probs)):
            raise ValueError(f"{path}: grids differ from the experts file")
        models[name] = (values, "forecast", "-")
        tests.extend(_test_rows(name, values, bundle, cfg.burn_in))
    cio.write_table(out / "scores.csv", _score_rows(bundle, models, cfg.burn_in))
    cio.write_table(out / "tests.csv", tests)


def cmd_export_weights(cfg: RunConfig, out: Path) -> None:
    blob = Path(cfg.state).read_bytes()
    state, _ = load_state(blob)
    extra = snapshot_metadata(blob).get("extra", {})
    D, P, K = state.w.shape
    dgrid = MarginalGrid(extra.get("marginals", np.arange(1, D + 1)))
    pgrid = ProbGrid(extra.get("probs", np.arange(1, P + 1) / (P + 1)))
    names = extra.get("experts", [f"expert{k}" for k in range(K)])
    cio.write_weights(out / "weights.csv", state.w[None], pgrid, dgrid, names, (state.t,))


_COMMANDS = {
    "simulate": cmd_simulate, "combine": cmd_combine, "tune": cmd_tune,
    "evaluate": cmd_evaluate, "export-weights": cmd_export_weights,
}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns a process exit status."""
    try:
        cfg.validate()
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        _COMMANDS[cfg.command](cfg, out)
    except (ValidationError, cio.IngestError) as exc:
        for problem in getattr(exc, "problems", [str(exc)]):
            logger.error("invalid input: %s", problem)
        return 3
    except NonFiniteStateError as exc:
        logger.error("numerical failure: %s", exc)
        return 4
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


def main(argv=None) -> int:
    try:
        cfg, verbose = config_from_args(argv)
    except SystemExit as exc:
        # argparse exits on --help and on usage errors
        return int(exc.code or 0)
    except (ValueError, OSError, configparser.Error) as exc:
        print(f"crpslearn: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
