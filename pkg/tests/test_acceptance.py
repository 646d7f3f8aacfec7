"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the summary.

Criterion 10 runs on the price pair named by ``EXCITER_PRICES_1`` and
``EXCITER_PRICES_2`` when both are set, otherwise on the committed synthetic
pair in ``tests/data``.
"""
import json
import os
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
from scipy import stats

from conftest import ACCEPTANCE, DATA
from exciter.cli import main
from exciter.data import ExtractionConfig, extract_jumps, load_price_csv, log_returns
from exciter.estimate import OptimizerSettings, fit, nest_start
from exciter.io import save_spec, spec_from_dict
from exciter.likelihood import compensator
from exciter.model import (ConstantExponential, Empirical, ExpRegimeDrift, MarkedPath, ModelSpec,
                           VARIANT_IDS, VariantMask, mark_moment, pack_params)
from exciter.moments import (autocovariance_stationary, excitation_matrix, mean_curve,
                             second_moment_curve, stability_report, stationary_mean,
                             stationary_second_moment)
from exciter.numerics import mat_exp
from exciter.simulate import SimConfig, simulate_path, simulate_paths

from oracles import simpson_compensator

EXP1 = ConstantExponential(1.0)
TRUTH_I = ModelSpec([0.6, 0.4], np.diag([-2.0, -1.6]), np.diag([1.0, 0.8]), (EXP1, EXP1))
TRUTH_II = ModelSpec([1.0, 1.0], np.diag([-2.0, -2.0]), [[1.0, 0.5], [0.55, 1.0]], (EXP1, EXP1))
RECOVERY_T = 5000.0
RECOVERY_SEEDS = range(10)


@contextmanager
def criterion(n, title):
    note = {}
    try:
        yield note
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE[n] = f"[{n:2d}] FAIL  {title}: {msg[:160]}"
        raise
    ACCEPTANCE[n] = f"[{n:2d}] PASS  {title}" + (f" ({note['detail']})" if note.get("detail") else "")


# --- 1 ---------------------------------------------------------------------

def test_01_poisson_degeneration():
    with criterion(1, "Poisson degeneration") as note:
        t0 = time.time()
        spec = ModelSpec([2.0], [[0.0]], [[0.0]], (EXP1,))
        counts, passes = [], 0
        for res in simulate_paths(spec, 1000.0, 200, SimConfig(seed=1)):
            t = res.path.times
            counts.append(t.size)
            gaps = np.diff(np.concatenate([[0.0], t]))
            passes += stats.kstest(gaps, "expon", args=(0.0, 0.5)).pvalue > 0.01
        elapsed = time.time() - t0
        mean = float(np.mean(counts))
        assert abs(mean - 2000) <= 3 * np.sqrt(2000), f"mean count {mean}"
        assert passes >= 190, f"KS passed on {passes}/200"
        assert elapsed < 60, f"took {elapsed:.1f}s"
        note["detail"] = f"mean count {mean:.1f}, KS {passes}/200, {elapsed:.1f}s"


# --- 2 ---------------------------------------------------------------------

def test_02_duality(mc_spec):
    with criterion(2, "Compensator duality") as note:
        t0 = time.time()
        N, Lam = [], []
        for res in simulate_paths(mc_spec, 500.0, 500, SimConfig(seed=2)):
            N.append(res.path.n_events)
            Lam.append(compensator(mc_spec, res.path))
        elapsed = time.time() - t0
        N, Lam = np.mean(N, axis=0), np.mean(Lam, axis=0)
        rel = np.abs(N - Lam) / N
        assert np.all(rel <= 0.01), f"relative gaps {rel}"
        assert elapsed < 300, f"took {elapsed:.1f}s"
        note["detail"] = f"max relative gap {rel.max():.2e}, {elapsed:.1f}s"


# --- 3 ---------------------------------------------------------------------

def test_03_first_moment(monte_carlo):
    with criterion(3, "First-moment oracle") as note:
        mc = monte_carlo
        y = mean_curve(mc.spec, None, mc.grid[:3])
        rel = np.abs(mc.lam[:, :3].mean(0) - y) / y
        assert rel.max() <= 0.02, f"t=1,5,20 relative errors {rel.max(axis=1)}"
        m = stationary_mean(mc.spec)
        M, _ = excitation_matrix(mc.spec)
        np.testing.assert_allclose(m, np.linalg.solve(M, mc.spec.A @ mc.spec.lambda0), rtol=1e-14)
        rel_star = np.abs(mc.lam[:, 3].mean(0) - m) / m
        assert rel_star.max() <= 0.01, f"t* relative error {rel_star}"
        note["detail"] = f"worst {rel.max():.2e} on t=1,5,20; {rel_star.max():.2e} at t*={mc.t_star:.1f}"


# --- 4 ---------------------------------------------------------------------

def test_04_second_moment(monte_carlo):
    with criterion(4, "Second moment and Lyapunov") as note:
        mc = monte_carlo
        Vinf = stationary_second_moment(mc.spec)
        V_ode = second_moment_curve(mc.spec, None, [100.0], steps_per_unit=50)[0]
        gap = np.abs(V_ode - Vinf).max()
        assert gap <= 1e-6, f"ODE vs Lyapunov {gap:.2e}"
        X = mc.lam[:, 3]
        V_mc = X.T @ X / X.shape[0]
        rel = np.abs(V_mc - Vinf) / np.abs(Vinf)
        assert rel.max() <= 0.05, f"Monte Carlo V relative error {rel.max():.3f}"
        m = stationary_mean(mc.spec)
        C_rel = np.abs(np.cov(X.T) - (Vinf - np.outer(m, m))) / np.abs(Vinf - np.outer(m, m))
        assert C_rel.max() <= 0.05, f"Monte Carlo covariance relative error {C_rel.max():.3f}"
        note["detail"] = f"ODE gap {gap:.1e}, MC V {rel.max():.2e}, MC covariance {C_rel.max():.2e}"


# --- 5 ---------------------------------------------------------------------

LAG_PATHS = 40_000


@pytest.fixture(scope="module")
def lagged(mc_spec):
    """lambda at t* and at t* + tau/2, t* + tau, tau = 1/|gamma_max|, over independent paths.

    The sample cross-covariance of these heavy-tailed marks has a standard
    error near 2.7% of the largest entry at 10^4 paths, too close to the 5%
    bound, hence the larger sample.
    """
    tau = 1.0 / abs(stability_report(mc_spec).gamma_max)
    t_star = 20.0 * tau
    lags = (0.5 * tau, tau)
    grid = (t_star,) + tuple(t_star + h for h in lags)
    cfg = SimConfig(seed=20240505, record_grid=grid)
    lam = np.array([simulate_path(mc_spec, grid[-1], cfg, stream=i).checkpoint_lambda
                    for i in range(LAG_PATHS)])
    return lags, lam


def test_05_autocovariance(mc_spec, lagged):
    with criterion(5, "Autocovariance") as note:
        M, _ = excitation_matrix(mc_spec)
        semi = 0.0
        for h1, h2 in [(0.3, 0.7), (1.0, 2.0), (2.5, 0.0), (4.0, 6.0)]:
            lhs = autocovariance_stationary(mc_spec, h1 + h2)
            rhs = mat_exp(M, h1) @ autocovariance_stationary(mc_spec, h2)
            semi = max(semi, np.abs(lhs - rhs).max())
        assert semi <= 1e-10, f"semigroup gap {semi:.2e}"
        lags, lam = lagged
        worst = 0.0
        X = lam[:, 0] - lam[:, 0].mean(0)
        for col, h in enumerate(lags, 1):
            Y = lam[:, col] - lam[:, col].mean(0)
            C_mc = Y.T @ X / (X.shape[0] - 1)
            C = autocovariance_stationary(mc_spec, h)
            worst = max(worst, np.abs(C_mc - C).max() / np.abs(C).max())
        assert worst <= 0.05, f"Monte Carlo gap {worst:.3f} of max entry"
        note["detail"] = (f"semigroup {semi:.1e}, MC {worst:.2e} of max entry at h = "
                          + ", ".join(f"{h:.2f}" for h in lags) + f" over {LAG_PATHS} paths")


# --- 6 ---------------------------------------------------------------------

def _random_linear_config(rng, i):
    d = int(rng.integers(1, 4))
    if i == 0:
        A = np.array([[-1.0, 1.0], [0.0, -1.0]])  # defective
        d = 2
    else:
        A = -np.diag(rng.uniform(0.2, 2.0, d)) + rng.uniform(-0.4, 0.4, (d, d)) * (1 - np.eye(d))
    B = rng.uniform(0, 0.8, (d, d))
    lam0 = rng.uniform(0.1, 1.0, d)
    T = float(rng.uniform(5, 30))
    n = int(rng.integers(0, 25))
    times = np.sort(rng.uniform(0, T, n))
    comps = rng.integers(0, d, n)
    marks = rng.exponential(1.0, n) + 1e-3
    spec = ModelSpec(lam0, A, B, (EXP1,) * d)
    return spec, MarkedPath(T, times, comps, marks, d)


def test_06_compensator_oracle():
    with criterion(6, "Compensator oracle") as note:
        rng = np.random.default_rng(6)
        worst = 0.0
        for i in range(20):
            spec, path = _random_linear_config(rng, i)
            got = compensator(spec, path)
            ref = simpson_compensator(spec.lambda0, spec.A, spec.B, path.times, path.components,
                                      path.marks, path.T, panels=100_000)
            worst = max(worst, np.max(np.abs(got - ref) / np.abs(ref)))
        assert worst <= 1e-8, f"linear relative error {worst:.2e}"
        worst_nl, doublings = 0.0, []
        for i in range(5):
            spec, path = _random_linear_config(rng, i + 1)
            spec = spec.replace(drift=ExpRegimeDrift(rng.uniform(-0.5, 0.5, spec.d), rng.uniform(0.1, 2.0)))
            spu, prev = 20, compensator(spec, path, steps_per_unit=20)
            for j in range(1, 11):
                spu *= 2
                cur = compensator(spec, path, steps_per_unit=spu)
                diff = np.max(np.abs(cur - prev))
                prev = cur
                if diff < 1e-8:
                    break
            assert diff < 1e-8, f"nonlinear compensator still moving by {diff:.2e} at {spu} steps/unit"
            doublings.append(j)
            worst_nl = max(worst_nl, diff)
        note["detail"] = f"linear {worst:.1e}; nonlinear self-consistent after <= {max(doublings)} doublings"


# --- 7 and 8 ---------------------------------------------------------------

def _recover(truth, vid, seed_offset):
    mask = VariantMask.table(vid)
    tr = pack_params(truth, mask)
    nz = tr != 0
    out = []
    for s in RECOVERY_SEEDS:
        path = simulate_path(truth, RECOVERY_T, SimConfig(seed=seed_offset + s)).path
        settings = OptimizerSettings(restarts=2, seed=s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f_I = fit(path, VariantMask.table("I"), truth, settings)
            f_II = fit(path, VariantMask.table("II"), truth, settings,
                       warm_starts=[nest_start(f_I, VariantMask.table("II"))])
        target = f_I if vid == "I" else f_II
        err = np.abs(target.theta_hat[nz] / tr[nz] - 1)
        out.append({"seed": s, "err": err, "I": f_I, "II": f_II, "ok": bool(err.max() <= 0.15)})
    return out


@pytest.fixture(scope="module")
def recovery():
    t0 = time.time()
    runs = {"I": _recover(TRUTH_I, "I", 1000), "II": _recover(TRUTH_II, "II", 2000)}
    runs["elapsed"] = time.time() - t0
    return runs


def test_07_mle_recovery(recovery):
    with criterion(7, "MLE recovery and nested ordering") as note:
        good = {v: sum(r["ok"] for r in recovery[v]) for v in ("I", "II")}
        worst = {v: max(r["err"].max() for r in recovery[v]) for v in ("I", "II")}
        for v in ("I", "II"):
            assert good[v] >= 8, f"variant {v} within 15% on {good[v]}/10 seeds (worst {worst[v]:.3f})"
        gaps = [r["II"].loglik - r["I"].loglik for v in ("I", "II") for r in recovery[v]]
        assert min(gaps) >= 0, f"LL(II) < LL(I) by {-min(gaps):.3g}"
        assert all(r[k].converged for v in ("I", "II") for r in recovery[v] for k in ("I", "II"))
        assert recovery["elapsed"] < 1200, f"took {recovery['elapsed']:.0f}s"
        note["detail"] = (f"I {good['I']}/10, II {good['II']}/10 within 15%; "
                          f"min LL(II)-LL(I) {min(gaps):.2e}; {recovery['elapsed']:.0f}s")


def _gamma_max_independent(spec):
    J = np.array([mark_moment(m, spec.lambda0, 1) for m in spec.marks])
    M = spec.A + spec.B * J[None, :]
    return np.linalg.eigvalsh(M + M.T)[-1]


# --- 9 ---------------------------------------------------------------------

def test_09_extraction_fidelity():
    with criterion(9, "Extraction fidelity") as note:
        a = log_returns(load_price_csv(DATA / "toy_a.csv"))
        b = log_returns(load_price_csv(DATA / "toy_b.csv"))
        expected = pd.read_csv(DATA / "toy_expected_events.csv")
        for sign in ("all", "pos", "neg"):
            exp = expected[expected["sign"] == sign]
            path = extract_jumps(a, b, ExtractionConfig(0.025, sign))
            assert path.times.tolist() == exp["t"].tolist(), f"{sign}: times differ"
            assert (path.components + 1).tolist() == exp["k"].tolist(), f"{sign}: components differ"
            np.testing.assert_allclose(path.marks, exp["y"], rtol=1e-8)
            assert path.T == 32.0
        note["detail"] = f"{len(expected)} hand-listed events across all/pos/neg"


# --- 10 --------------------------------------------------------------------

def _price_pair():
    p1, p2 = os.environ.get("EXCITER_PRICES_1"), os.environ.get("EXCITER_PRICES_2")
    if p1 and p2:
        return Path(p1), Path(p2), "downloaded"
    return DATA / "synthetic_a.csv", DATA / "synthetic_b.csv", "synthetic"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipeline")
    p1, p2, source = _price_pair()
    runner = CliRunner()
    out = {"source": source, "work": work, "exit": {}, "fits": {}}
    for sign in ("all", "pos", "neg"):
        events = work / f"events_{sign}.csv"
        fit_json = work / f"fit_{sign}.json"
        steps = [
            ["extract", p1, p2, "--sign", sign, "--out", events],
            ["fit", events, "--variant", "all", "--restarts", 3, "--out", fit_json],
            ["export-spec", fit_json, "--variant", "II", "--out", work / f"spec_{sign}.json"],
            ["diagnose", work / f"spec_{sign}.json", events, "--out-dir", work / f"diag_{sign}"],
        ]
        for step in steps:
            res = runner.invoke(main, [str(s) for s in step])
            out["exit"][(sign, step[0])] = (res.exit_code, res.output[-400:])
            if res.exit_code != 0:
                break
        if fit_json.exists():
            out["fits"][sign] = json.loads(fit_json.read_text())["fits"]
    return out


def test_10_end_to_end(pipeline):
    with criterion(10, "End-to-end pipeline shape") as note:
        work = pipeline["work"]
        for key, (code, tail) in pipeline["exit"].items():
            assert code == 0, f"{key[1]} ({key[0]}) exited {code}: {tail.strip().splitlines()[-1:]}"
        for sign in ("all", "pos", "neg"):
            table = pd.read_csv(work / f"fit_{sign}.table.csv")
            assert list(table.columns) == ["param", *VARIANT_IDS]
            rows = table.set_index("param")
            assert {"c", "d1", "d2", "LL"} <= set(rows.index)
            for v in ("VII", "VIII"):
                assert rows.loc["c", v] > 0, f"{sign}/{v}: c = {rows.loc['c', v]}"
                assert np.isfinite(rows.loc[["d1", "d2"], v]).all()
            assert rows.loc["c", "I":"VI"].isna().all()
            assert (work / f"fit_{sign}.table.txt").read_text().strip()
            bins = pd.read_csv(work / f"diag_{sign}" / "bins.csv")
            assert list(bins.columns) == ["component", "bin_lo", "bin_hi", "mean_abs_jump", "count"]
            assert set(bins["component"]) == {1, 2}
        note["detail"] = f"{pipeline['source']} pair, 3 x 8 fits, 3 bin tables"


def test_08_stability_gate(recovery, pipeline, tmp_path):
    with criterion(8, "Stability gate") as note:
        fits = [r[k] for v in ("I", "II") for r in recovery[v] for k in ("I", "II")]
        converged = [f for f in fits if f.converged]
        assert converged and all(_gamma_max_independent(f.spec_hat) < 0 for f in converged)
        n_pipeline = 0
        for docs in pipeline["fits"].values():
            for doc in docs:
                if doc["converged"]:
                    spec = spec_from_dict(doc["spec_hat"])
                    assert _gamma_max_independent(spec) < 0, f"{doc['variant_id']} converged but unstable"
                    n_pipeline += 1
        unstable = ModelSpec([0.5], [[-1.0]], [[2.0]], (Empirical((1.0,)),))
        rep = stability_report(unstable)
        assert not rep.stable and rep.gamma_max == pytest.approx(2.0)
        save_spec(unstable, tmp_path / "unstable.json")
        res = CliRunner().invoke(main, ["moments", str(tmp_path / "unstable.json"), "--out-dir", str(tmp_path)])
        assert res.exit_code == 5, f"moments exited {res.exit_code}"
        note["detail"] = f"{len(converged) + n_pipeline} converged fits stable; unstable spec exit 5"
