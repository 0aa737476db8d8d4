"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the report, or
directly with ``python tests/test_acceptance.py``.
"""

import itertools
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from crpslearn.cli import learner_config  # noqa: E402
from crpslearn.core import MarginalGrid, ProbGrid, crps_from_quantiles  # noqa: E402
from crpslearn.evaluation import christoffersen_test, crossing_days, dm_test, kupiec_test  # noqa: E402
from crpslearn.learner import Learner, LearnerConfig, instantaneous_regret  # noqa: E402
from crpslearn.scenario import break_spec, generate_scenario, stationary_spec  # noqa: E402
from crpslearn.splines import (KnotSpec, SmoothSpec, difference_matrix_general,  # noqa: E402
                               difference_matrix_standard, make_knots, penalty_matrix)
from crpslearn.tuner import SamplingOnlineTuner, build_grid  # noqa: E402

import oracles  # noqa: E402
from helpers import random_panel  # noqa: E402

BURN_IN = 182
EVAL_SKIP = 50


def report(n, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


def panel():
    X, y = random_panel(np.random.default_rng(2024), T=200, D=4, P=9, K=3)
    return X, y, MarginalGrid.range(4), ProbGrid.equidistant(9)


def run_spec(spec, X, y, dg, pg, **params):
    return Learner(learner_config(spec, "boa", params), dg, pg, X.shape[-1]).run(X, y, record_weights=True)


def test_criterion_1_nested_specifications():
    t0 = time.perf_counter()
    X, y, dg, pg = panel()
    preds, W = run_spec("naive", X, y, dg, pg)
    naive_err = max(np.abs(preds - np.sort(X.mean(axis=-1), axis=-1)).max(), np.abs(W - 1 / 3).max())

    _, Wc = run_spec("constant", X, y, dg, pg)
    _, Wmv = run_spec("constant-mv", X, y, dg, pg)
    _, Wpr = run_spec("constant-pr", X, y, dg, pg)
    spread = {
        "constant": np.ptp(Wc, axis=(1, 2)).max(),
        "constant-mv": np.ptp(Wmv, axis=1).max(),
        "constant-pr": np.ptp(Wpr, axis=2).max(),
    }
    # the constant specifications must actually learn something
    moved = min(np.abs(w[-1] - 1 / 3).max() for w in (Wc, Wmv, Wpr))

    _, Wp = run_spec("pointwise", X, y, dg, pg)
    cell_err = 0.0
    for d in range(4):
        for p in range(9):
            one = Learner(LearnerConfig(), MarginalGrid(np.array([dg.marginals[d]])),
                          ProbGrid(pg.probs[p:p + 1]), 3)
            _, Wcell = one.run(X[:, d:d + 1, p:p + 1], y[:, d:d + 1], record_weights=True)
            cell_err = max(cell_err, np.abs(Wcell[:, 0, 0] - Wp[:, d, p]).max())
    elapsed = time.perf_counter() - t0

    ok = (naive_err <= 1e-12 and max(spread.values()) == 0.0 and moved > 1e-3
          and cell_err <= 1e-10 and elapsed < 10)
    detail = (f"naive err {naive_err:.1e}; constancy spread "
              + ", ".join(f"{k} {v:.1e}" for k, v in spread.items())
              + f"; pointwise vs 36 cell learners {cell_err:.1e}; {elapsed:.2f}s")
    report(1, ok, detail)


def test_criterion_2_scaled_penalty():
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for q, o, J in itertools.product((1, 2), (2, 3, 4), range(1, 21)):
        if q >= o:
            # a q-th difference needs order above q; (q=2, o=2) is undefined
            continue
        knots = make_knots(KnotSpec(J, o - 1))
        Dg = difference_matrix_general(knots, o, q)
        Ds = difference_matrix_standard(Dg.shape[1], q)
        worst = max(worst, np.abs(penalty_matrix(Dg, knots, o, q) - Ds.T @ Ds).max())
        cases += 1
    elapsed = time.perf_counter() - t0
    report(2, worst <= 1e-10 and elapsed < 1,
           f"max |scaled - standard| {worst:.1e} over {cases} (q, o, J) cases; {elapsed:.3f}s")


def test_criterion_3_default_knots():
    worst = 0.0
    for J, deg in itertools.product(range(1, 98), (0, 1, 2, 3)):
        knots = make_knots(KnotSpec(J, deg))
        worst = max(worst, np.abs(np.diff(knots) - 1 / (J + 2)).max())
    report(3, worst <= 1e-12, f"max spacing error {worst:.1e} for J = 1..97, deg = 0..3")


def test_criterion_4_stationary_convergence():
    t0 = time.perf_counter()
    sc = generate_scenario(stationary_spec(T=2000), seed=0)
    X, y = sc.panel.values, sc.obs.values
    preds, W = Learner(LearnerConfig(), sc.dgrid, sc.pgrid, 3).run(X, y, record_weights=True)
    comb = crps_from_quantiles(preds, y, sc.pgrid).mean(axis=1)
    experts = crps_from_quantiles(np.moveaxis(X, -1, 0), y, sc.pgrid).mean(axis=2)
    best = int(np.argmin(experts.sum(axis=1)))
    regret = np.cumsum(comb - experts[best])
    r500, r2000 = regret[499] / 500, regret[-1] / 2000
    w_best = W[-1][..., best]
    elapsed = time.perf_counter() - t0
    ok = r2000 < r500 and w_best.min() > 0.9 and elapsed < 30
    report(4, ok, f"regret/T {r500:.4f} at T=500, {r2000:.4f} at T=2000; final weight on expert "
                  f"{best} min {w_best.min():.3f} mean {w_best.mean():.3f}; {elapsed:.1f}s")


def test_criterion_5_break_scenario():
    t0 = time.perf_counter()
    sc = generate_scenario(break_spec(T=600), seed=0)
    X, y, dg, pg = sc.panel.values, sc.obs.values, sc.dgrid, sc.pgrid

    def score(p):
        return crps_from_quantiles(p[BURN_IN:], y[BURN_IN:], pg).mean()

    fixed = Learner(learner_config("forget", "boa", {"theta": 0.0}), dg, pg, 3).run(X, y)
    with SamplingOnlineTuner(build_grid("forget"), dg, pg, 3, score_skip=EVAL_SKIP) as tuner:
        forget = tuner.run(X, y)
    with SamplingOnlineTuner(build_grid("smooth-forget", seed=0), dg, pg, 3, score_skip=EVAL_SKIP) as tuner:
        smooth_forget = tuner.run(X, y)
    naive = np.sort(X.mean(axis=-1), axis=-1)
    s0, sf, ssf, sn = score(fixed), score(forget), score(smooth_forget), score(naive)
    gain = 1 - sf / s0
    elapsed = time.perf_counter() - t0
    ok = gain >= 0.05 and ssf <= sn and elapsed < 120
    report(5, ok, f"CRPS theta=0 {s0:.4f}, tuned forget {sf:.4f} ({100 * gain:.1f}% lower), "
                  f"smooth-forget {ssf:.4f} vs naive {sn:.4f}; {elapsed:.1f}s")


def _smoothing_spread(X, y, dg, pg):
    cfg = LearnerConfig(smooth_pr=SmoothSpec(lam=2.0**15, alpha=1.0))
    _, W = Learner(cfg, dg, pg, X.shape[-1]).run(X, y, record_weights=True)
    return np.ptp(W, axis=2).max()


def test_criterion_6_smoothing_limit():
    X, y, dg, pg = panel()
    spread = _smoothing_spread(X, y, dg, pg)
    # the same penalty is weaker relative to the data on a finer grid
    X99, y99 = random_panel(np.random.default_rng(2024), T=200, D=4, P=99, K=3)
    info = _smoothing_spread(X99, y99, dg, ProbGrid.equidistant(99))
    print(f"INFO criterion 6: max spread across p on a 99-point grid {info:.1e}")
    report(6, spread < 1e-3, f"max over (t, d, k) of max-min across p {spread:.1e} (P=9)")


def test_criterion_7_statistical_tests():
    rng = np.random.default_rng(7)
    dm_err = ku_err = ch_err = 0.0
    for _ in range(100):
        T, D = int(rng.integers(5, 80)), int(rng.integers(1, 5))
        lm, lr = rng.gamma(2.0, size=(2, T, D))
        res = dm_test(lm, lr)
        ref = oracles.dm_statistic(lm.tolist(), lr.tolist())
        dm_err = max(dm_err, abs(res.statistic - ref),
                     abs(res.p_value - oracles.student_t_two_sided(ref, T - 1)))
    for _ in range(100):
        n = int(rng.integers(1, 1000))
        x = int(rng.integers(0, n + 1))
        alpha = float(rng.uniform(0.005, 0.5))
        lr_, p = kupiec_test(x, n, alpha)
        ref = max(oracles.kupiec_lr(x, n, alpha), 0.0)
        ku_err = max(ku_err, abs(lr_ - ref), abs(p - oracles.chi2_sf_1(ref)))
    for _ in range(100):
        n = int(rng.integers(3, 500))
        seq = (rng.uniform(size=n) < rng.uniform(0.02, 0.5)).astype(int)
        alpha = float(rng.uniform(0.01, 0.3))
        res = christoffersen_test(seq, alpha)
        uc, ind, _ = oracles.christoffersen(seq.tolist(), alpha)
        ch_err = max(ch_err, abs(res.lr_uc - max(uc, 0.0)), abs(res.lr_ind - max(ind, 0.0)))
    exact = [kupiec_test(x, n, x / n)[0] for x, n in ((5, 100), (1, 10), (50, 1000), (3, 7))]
    ok = max(dm_err, ku_err, ch_err) <= 1e-8 and all(v == 0.0 for v in exact)
    report(7, ok, f"max oracle deviation DM {dm_err:.1e}, Kupiec {ku_err:.1e}, "
                  f"Christoffersen {ch_err:.1e}; LR at x/n = alpha {exact}")


def test_criterion_8_invariants():
    sc = generate_scenario(break_spec(T=500), seed=1)
    X, y, dg, pg = sc.panel.values, sc.obs.values, sc.dgrid, sc.pgrid
    cfg = learner_config("smooth-forget", "boa", {"theta": 0.01, "lambda_pr": 4.0, "lambda_mv": 1.0})
    learner = Learner(cfg, dg, pg, 3)
    preds = np.empty(X.shape[:3])
    resid = norm = 0.0
    for t in range(500):
        w = learner.weights
        norm = max(norm, np.abs(w.sum(axis=-1) - 1).max())
        preds[t] = learner.step(X[t], y[t])
        r = instantaneous_regret(learner.last_raw, X[t], y[t], pg.probs)
        resid = max(resid, np.abs((w * r).sum(axis=-1)).max())
    days, _ = crossing_days(preds)
    ok = resid <= 1e-10 and norm <= 1e-10 and days == 0
    report(8, ok, f"max |sum_k w r| {resid:.1e}; max |sum_k w - 1| {norm:.1e}; crossing days {days}")


def test_criterion_9_grids():
    sizes = {s: len(build_grid(s, seed=3)) for s in ("forget", "smooth", "smooth-forget", "full")}
    same = all(build_grid(s, seed=3).params == build_grid(s, seed=3).params for s in sizes)
    ok = list(sizes.values()) == [16, 256, 2500, 2500] and same
    report(9, ok, f"grid sizes {sizes}; identical under a fixed seed: {same}")


def test_criterion_10_real_data():
    print("SKIP criterion 10: needs the real data set, which is not part of this package")
    pytest.skip("data-dependent criterion; the real data set is not available")


if __name__ == "__main__":
    failed = 0
    tests = [(k, v) for k, v in globals().items() if k.startswith("test_criterion_")]
    for name, fn in sorted(tests, key=lambda kv: int(kv[0].split("_")[2])):
        try:
            fn()
        except AssertionError:
            failed += 1
        except pytest.skip.Exception:
            pass
    sys.exit(1 if failed else 0)
