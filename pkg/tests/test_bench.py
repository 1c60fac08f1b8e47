import json

import numpy as np
import pytest

import gramridge.bench as bench
from gramridge.bench import CrossCheckError, SimSpec, benchmark, evaluation_plan, simulate, topk_overlap


class TestSimulate:
    @pytest.mark.parametrize("family", ["linear", "logistic", "probit", "cox"])
    def test_seeded_runs_identical(self, family):
        spec = SimSpec(30, (5, 7), (1.0, 10.0), family, seed=4)
        d1, r1, b1 = simulate(spec)
        d2, r2, b2 = simulate(spec)
        for x, y in zip(d1.blocks, d2.blocks):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(r1.y, r2.y)
        np.testing.assert_array_equal(b1, b2)
        if family == "cox":
            np.testing.assert_array_equal(r1.time, r2.time)

    def test_infinite_penalty_is_fair_coin(self):
        n = 4000
        _, r, beta = simulate(SimSpec(n, (50,), (1e12,), "logistic", seed=1))
        assert np.max(np.abs(beta)) < 1e-4
        assert abs(r.y.mean() - 0.5) < 3 * np.sqrt(0.25 / n)

    def test_coefficient_variance(self):
        _, _, beta = simulate(SimSpec(5, (2000, 2000), (20.0, 1000.0), seed=2))
        assert np.var(beta[:2000]) == pytest.approx(1 / 20.0, rel=0.2)
        assert np.var(beta[2000:]) == pytest.approx(1 / 1000.0, rel=0.2)

    def test_censoring_rate(self):
        _, r, _ = simulate(SimSpec(4000, (3,), (1.0,), "cox", censoring=0.3, seed=3))
        assert 1 - r.event.mean() == pytest.approx(0.3, abs=0.03)
        assert np.all(r.time > 0)

    def test_invalid(self):
        with pytest.raises(ValueError, match="censoring"):
            SimSpec(10, (2,), (1.0,), "cox", censoring=1.0)
        with pytest.raises(ValueError, match="family"):
            SimSpec(10, (2,), (1.0,), "poisson")


class TestTopk:
    def test_identity_and_sign(self):
        b = np.random.default_rng(0).standard_normal(50)
        assert topk_overlap(b, b, 10) == 10
        assert topk_overlap(-b, b, 10) == 10

    def test_disjoint(self):
        assert topk_overlap([3, 2, 0, 0], [0, 0, 5, 4], 2) == 0

    def test_k_too_large(self):
        with pytest.raises(ValueError, match="outside"):
            topk_overlap([1.0, 2.0], [1.0, 2.0], 3)

    def test_random_null(self):
        rng = np.random.default_rng(1)
        p, k = 1000, 100
        truth = rng.standard_normal(p)
        draws = np.array([topk_overlap(rng.standard_normal(p), truth, k) for _ in range(100)])
        mean = k * k / p
        var = k * (k / p) * (1 - k / p) * (p - k) / (p - 1)
        assert abs(draws.mean() - mean) <= 3 * np.sqrt(var / 100)


class TestBenchmark:
    def test_plan_deterministic(self):
        a = evaluation_plan(40, 2, 5, seed=3)
        b = evaluation_plan(40, 2, 5, seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.lambdas, y.lambdas)
            np.testing.assert_array_equal(x.in_idx, y.in_idx)

    def test_backends_agree_and_report(self):
        rep = benchmark(SimSpec(40, (100, 150), (1.0, 1.0)), budget=6, check_evals=6)
        assert rep.residual <= 1e-6
        assert set(rep.total) == {"naive", "woodbury", "gram"}
        assert rep.extrapolated == {"naive": True, "woodbury": False, "gram": False}
        d = json.loads(json.dumps(rep.to_dict()))
        assert d["p"] == 250 and d["budget"] == 6
        assert rep.table().splitlines()[1].startswith("backend\tseconds")

    def test_crosscheck_failure(self, monkeypatch):
        real = bench._woodbury_eval
        monkeypatch.setattr(bench, "_woodbury_eval", lambda b, ev: real(b, ev) + 1e-3)
        with pytest.raises(CrossCheckError, match="disagree"):
            benchmark(SimSpec(20, (30,), (1.0,)), budget=2, backends=("gram", "woodbury"))

    def test_needs_gram_and_baseline(self):
        with pytest.raises(ValueError, match="gram"):
            benchmark(SimSpec(20, (30,), (1.0,)), budget=2, backends=("gram",))

    def test_single_evaluation_has_no_amortization(self):
        ratios = []
        for s in range(3):
            rep = benchmark(SimSpec(100, (2000, 2000), (1.0, 1.0), seed=s), budget=1,
                            backends=("gram", "woodbury"))
            ratios.append(rep.speedup["woodbury"])
        assert 0.4 <= np.median(ratios) <= 2.5

    def test_complexity_slopes(self):
        ps = np.array([4000, 8000, 16000, 32000])
        pre, per = [], []
        for p in ps:
            best_pre, best_per = np.inf, np.inf
            for s in range(3):
                rep = benchmark(SimSpec(200, (p // 2, p // 2), (1.0, 1.0), seed=s), budget=20,
                                backends=("gram", "woodbury"), check_evals=1)
                best_pre = min(best_pre, rep.precompute)
                best_per = min(best_per, rep.per_eval["gram"])
            pre.append(best_pre)
            per.append(best_per)
        slope_pre = np.polyfit(np.log(ps), np.log(pre), 1)[0]
        slope_per = np.polyfit(np.log(ps), np.log(per), 1)[0]
        assert abs(slope_pre - 1.0) <= 0.3
        assert abs(slope_per) <= 0.3
