import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import FIVE_ARM, THREE_ARM_GAUSS
from toptwo.expfam import InstanceSpec, ObservationModel
from toptwo.exponent import solve_gamma_beta, uniform_rate_gaussian
from toptwo.rules import RuleConfig
from toptwo.sim import (
    EVERY_STEP,
    SUMMARY_COLUMNS,
    Cadence,
    StoppingSpec,
    aggregate,
    fit_exponent,
    hitting_times,
    log_error_mass,
    run_trial,
    run_trials,
    trace_header,
    write_summary_csv,
    write_trace_csv,
)

BERN = ObservationModel.bernoulli()
EASY = InstanceSpec(BERN, (0.9, 0.1))


class TestStoppingSpec:
    def test_fixed(self):
        s = StoppingSpec.fixed(10)
        assert s.mode == "fixed_horizon" and s.horizon == 10 and s.cap >= 10

    @pytest.mark.parametrize("delta", [0.0, 1.0, -0.5])
    def test_delta_range(self, delta):
        with pytest.raises(ValueError):
            StoppingSpec.confidence(delta)

    def test_horizon_positive(self):
        with pytest.raises(ValueError):
            StoppingSpec.fixed(0)

    def test_cap_covers_horizon(self):
        with pytest.raises(ValueError):
            StoppingSpec("fixed_horizon", horizon=100, cap=10)


class TestCadence:
    def test_default(self):
        c = Cadence()
        assert all(c.records(n) for n in range(1, 1001))
        assert c.records(1010) and not c.records(1011)

    def test_every_step(self):
        assert all(EVERY_STEP.records(n) for n in (1, 7, 12345))


class TestRunTrial:
    def test_length(self):
        tr = run_trial(FIVE_ARM, "uniform", stopping=StoppingSpec.fixed(50), seed=0)
        assert tr.length == 50 and tr.ys.size == 50
        assert tr.rec_n[-1] == 50 and not tr.censored

    def test_deterministic(self):
        a = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(300), seed=11)
        b = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(300), seed=11)
        np.testing.assert_array_equal(a.arms, b.arms)
        np.testing.assert_array_equal(a.ys, b.ys)
        np.testing.assert_array_equal(a.log_alpha, b.log_alpha)

    def test_seeds_differ(self):
        a = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(200), seed=1)
        b = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(200), seed=2)
        assert not np.array_equal(a.arms, b.arms)

    def test_observations_follow_true_means(self):
        tr = run_trial(FIVE_ARM, "uniform", stopping=StoppingSpec.fixed(20_000), seed=3)
        for i, mu in enumerate(FIVE_ARM.means):
            y = tr.ys[tr.arms == i]
            assert abs(y.mean() - mu) < 4 * math.sqrt(mu * (1 - mu) / y.size)

    def test_conservation(self):
        tr = run_trial(FIVE_ARM, "ttps", stopping=StoppingSpec.fixed(2000), seed=4)
        assert tr.final_counts().sum() == tr.length
        np.testing.assert_allclose(tr.counts.sum(axis=1), tr.rec_n)
        np.testing.assert_allclose(tr.psibar.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(tr.alpha.sum(axis=1), 1.0, atol=1e-9)

    def test_confidence_stop(self):
        tr = run_trial(EASY, "ttts", stopping=StoppingSpec.confidence(0.05, cap=10_000), seed=0)
        assert not tr.censored
        assert tr.alpha[-1].max() > 0.95
        assert np.all(tr.alpha[:-1].max(axis=1) <= 0.95)
        assert tr.stopped_at == tr.length

    def test_censoring(self):
        tr = run_trial(FIVE_ARM, "uniform", stopping=StoppingSpec.confidence(1e-6, cap=50), seed=0)
        assert tr.censored and tr.length == 50

    def test_easy_instance_terminates(self):
        traces = run_trials(EASY, "ttts", None, StoppingSpec.confidence(0.05, cap=10_000), range(100))
        assert sum(not t.censored for t in traces) >= 99

    def test_grid_belief(self):
        tr = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(300), seed=5, belief="grid", grid_points=201)
        assert tr.diagnostics["belief"] == "grid"
        np.testing.assert_allclose(tr.alpha.sum(axis=1), 1.0, atol=1e-9)

    def test_unknown_belief(self):
        with pytest.raises(ValueError):
            run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(3), belief="particles")

    def test_parallel_matches_serial(self):
        kw = dict(stopping=StoppingSpec.fixed(100), seeds=[3, 1, 2])
        serial = run_trials(FIVE_ARM, "ttts", None, **kw)
        parallel = run_trials(FIVE_ARM, "ttts", None, threads=2, **kw)
        assert [t.seed for t in serial] == [1, 2, 3]
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.arms, b.arms)
            np.testing.assert_array_equal(a.log_alpha, b.log_alpha)


class TestHittingTimes:
    def test_low_level_hit_immediately(self):
        tr = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(100), seed=0)
        assert hitting_times(tr, [0.2])[0] == tr.rec_n[0]

    def test_level_one_censored(self):
        tr = run_trial(EASY, "ttts", stopping=StoppingSpec.fixed(500), seed=0)
        assert np.isnan(hitting_times(tr, [1.0])[0])

    def test_first_crossing(self):
        tr = run_trial(EASY, "ttts", stopping=StoppingSpec.fixed(300), seed=1, cadence=EVERY_STEP)
        hit = hitting_times(tr, [0.9])[0]
        top = tr.alpha.max(axis=1)
        idx = int(np.flatnonzero(top >= 0.9)[0])
        assert hit == tr.rec_n[idx]

    def test_bad_level(self):
        tr = run_trial(EASY, "ttts", stopping=StoppingSpec.fixed(10), seed=0)
        with pytest.raises(ValueError):
            hitting_times(tr, [0.0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.lists(st.floats(0.05, 0.999), min_size=2, max_size=8))
    def test_monotone(self, seed, levels):
        tr = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(400), seed=seed)
        levels = np.sort(levels)
        hits = hitting_times(tr, levels)
        reached = hits[~np.isnan(hits)]
        assert np.all(np.diff(reached) >= 0)
        # once a level is censored, every higher level is too
        first_nan = np.flatnonzero(np.isnan(hits))
        if first_nan.size:
            assert np.all(np.isnan(hits[first_nan[0]:]))


class TestFitExponent:
    def synthetic(self, rate, n_last=2000, floor=None):
        tr = run_trial(EASY, "uniform", stopping=StoppingSpec.fixed(n_last), seed=0)
        n = tr.rec_n.astype(float)
        # error mass exp(-rate * n), all of it on the second arm
        tr.log_alpha[:, 1] = -rate * n
        tr.log_alpha[:, 0] = np.log1p(-np.exp(-rate * n))
        object.__setattr__(tr, "log_floor", None if floor is None else math.log(floor))
        return tr

    def test_recovers_slope(self):
        fit = fit_exponent(self.synthetic(0.01))
        assert fit.rate == pytest.approx(0.01, rel=1e-6)
        assert not fit.truncated and float(fit) == fit.rate

    def test_truncates_at_floor(self):
        tr = self.synthetic(0.5, floor=1e-300)
        fit = fit_exponent(tr)
        assert fit.truncated
        assert fit.window[1] * 0.5 <= -math.log(1e-300)
        assert fit.rate == pytest.approx(0.5, rel=1e-6)

    def test_censored_rejected(self):
        tr = run_trial(FIVE_ARM, "uniform", stopping=StoppingSpec.confidence(1e-6, cap=50), seed=0)
        with pytest.raises(ValueError):
            fit_exponent(tr)

    def test_log_error_mass(self):
        tr = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(100), seed=0)
        direct = np.log(1.0 - tr.alpha[:, FIVE_ARM.best])
        np.testing.assert_allclose(log_error_mass(tr), direct, rtol=1e-6)

    def test_grid_and_conjugate_pipelines_agree(self):
        # uniform allocation on a two-arm Gaussian instance: both pipelines
        # track the same evidence, so their tail slopes should nearly match
        inst = InstanceSpec(ObservationModel.gaussian(1.0), (0.5, 0.0))
        conj = run_trial(inst, "uniform", stopping=StoppingSpec.fixed(2000), seed=7)
        grid = run_trial(inst, "uniform", stopping=StoppingSpec.fixed(2000), seed=7,
                         belief="grid", grid_points=4001, grid_bounds=(-2.0, 2.5))
        np.testing.assert_array_equal(conj.arms, grid.arms)
        a, b = fit_exponent(conj).rate, fit_exponent(grid).rate
        assert a == pytest.approx(b, rel=0.05)


class TestAggregate:
    def test_single_trace(self):
        tr = run_trial(EASY, "ttts", stopping=StoppingSpec.confidence(0.05, cap=10_000), seed=0)
        rows = aggregate([tr], "hitting", levels=[0.9])
        assert rows[0]["mean_hit"] == hitting_times(tr, [0.9])[0]
        assert rows[0]["n_censored"] == 0
        eff = aggregate([tr], "effort")
        np.testing.assert_allclose([r["mean_count"] for r in eff], tr.final_counts())
        ev = aggregate([tr], "evidence")
        np.testing.assert_allclose([r["mean_log10_inv_alpha"] for r in ev], tr.log10_inv_alpha[-1])

    def test_censored_excluded(self):
        ok = run_trial(EASY, "ttts", stopping=StoppingSpec.confidence(0.05, cap=10_000), seed=0)
        bad = run_trial(EASY, "ttts", stopping=StoppingSpec.confidence(0.05, cap=10_000), seed=1)
        object.__setattr__(bad, "log_alpha", np.full_like(bad.log_alpha, math.log(0.5)))
        rows = aggregate([ok, bad], "hitting", levels=[0.9])
        assert rows[0]["n_censored"] == 1
        assert rows[0]["mean_hit"] == hitting_times(ok, [0.9])[0]

    def test_mixed_rejected(self):
        a = run_trial(EASY, "ttts", stopping=StoppingSpec.fixed(10), seed=0)
        b = run_trial(EASY, "uniform", stopping=StoppingSpec.fixed(10), seed=0)
        c = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(10), seed=0)
        for pair in ([a, b], [a, c]):
            with pytest.raises(ValueError):
                aggregate(pair, "effort")

    def test_unknown_statistic(self):
        a = run_trial(EASY, "ttts", stopping=StoppingSpec.fixed(10), seed=0)
        with pytest.raises(ValueError):
            aggregate([a], "variance")


class TestCsv:
    def test_trace_schema(self, tmp_path):
        tr = run_trial(FIVE_ARM, "ttts", stopping=StoppingSpec.fixed(30), seed=0)
        path = tmp_path / "trace.csv"
        write_trace_csv(tr, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == trace_header(5)
        assert rows[0][:3] == ["n", "arm", "y"] and len(rows[0]) == 13
        assert len(rows) == 31
        assert all(len(r) == 13 for r in rows)
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 31))
        assert {int(r[1]) for r in rows[1:]} <= {1, 2, 3, 4, 5}
        assert float(rows[-1][3 + 5 + 4]) == pytest.approx(tr.psibar[-1][4])

    def test_summary_schema(self, tmp_path):
        tr = run_trial(EASY, "ttts", stopping=StoppingSpec.confidence(0.05, cap=10_000), seed=0)
        path = tmp_path / "summary.csv"
        write_summary_csv(aggregate([tr], "hitting", levels=[0.5, 0.9]), path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == SUMMARY_COLUMNS
        assert len(rows) == 3 and all(len(r) == 5 for r in rows)


@pytest.mark.slow
class TestLongRun:
    def test_effort_convergence(self):
        # desk-scale: 5 seeds per rule, TTVS with smaller Monte Carlo batches
        cfgs = {
            "ttts": RuleConfig(resample_cap=64, ttts_fallback="conditional"),
            "ttps": RuleConfig(),
            "ttvs": RuleConfig(mc_samples=1000),
        }
        target = solve_gamma_beta(FIVE_ARM, 0.5).psi
        for rule, cfg in cfgs.items():
            traces = run_trials(FIVE_ARM, rule, cfg, StoppingSpec.fixed(50_000), range(5))
            share = np.mean([t.final_counts() / t.length for t in traces], axis=0)
            assert np.max(np.abs(share - target)) <= 0.05, (rule, share)

    @staticmethod
    def _spread(runs, name):
        """Mean over 20 seeds of the range of log10(1/alpha) across suboptimal arms at stopping."""
        ev = np.array([t.log10_inv_alpha[-1] for t in runs(name, range(20))])
        return np.mean(np.ptp(np.delete(ev, FIVE_ARM.best, axis=1), axis=1))

    @pytest.mark.parametrize("name", [
        pytest.param("five_ttts", marks=pytest.mark.xfail(
            strict=True, reason="randomised challenger leaves about 1.3 decades of spread at ~1000 steps")),
        "five_ttps",
        pytest.param("five_ttvs", marks=pytest.mark.xfail(
            strict=True, reason="randomised challenger leaves about 1.1 decades of spread at ~1000 steps")),
    ])
    def test_equal_evidence(self, runs, name):
        assert self._spread(runs, name) <= 0.5

    def test_evidence_far_more_even_than_uniform(self, runs):
        uniform = self._spread(runs, "five_uniform")
        assert uniform > 1.5
        for name in ("five_ttts", "five_ttps", "five_ttvs"):
            assert self._spread(runs, name) < 0.1 * uniform, name

    def test_ts_slower_than_ttts(self, runs):
        ts = np.median([fit_exponent(t).rate for t in runs("gauss_ts", range(5))])
        ttts = np.median([fit_exponent(t).rate for t in runs("gauss_ttts", range(5))])
        assert ts < 0.5 * ttts

    def test_uniform_rate(self, runs):
        gaps = np.delete(THREE_ARM_GAUSS.gaps, THREE_ARM_GAUSS.best)
        target = uniform_rate_gaussian(gaps, 3, 1.0)
        fitted = np.median([fit_exponent(t).rate for t in runs("gauss_uniform", range(20))])
        assert fitted == pytest.approx(target, rel=0.25)
