import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opinion_kinetics.calibration import (FitError, MarginalHistogram, brute_force_fit, fit_mixture,
                                          mixture_bins, objective, param_distance, write_fit_table)
from opinion_kinetics.core import TABLE1_FIT, DomainError, MixtureFit, count_modes, count_sampled_modes
from opinion_kinetics.scenarios import run_table1

TABLE1 = TABLE1_FIT


@pytest.fixture(scope="module")
def table1_hist():
    return MarginalHistogram.from_mixture(TABLE1, 20)


@pytest.fixture(scope="module")
def coupled_hist():
    return MarginalHistogram.from_field(run_table1()[-1], "neg")


def single_beta_hist(m=0.3, mu=0.2, n=20):
    return MarginalHistogram.from_mixture(MixtureFit(1.0, m, mu, 1.0), n)


class TestHistogram:
    def test_normalization_required(self):
        with pytest.raises(DomainError):
            MarginalHistogram.from_density(np.full(10, 0.9))

    def test_uniform_centers_required(self):
        with pytest.raises(DomainError):
            MarginalHistogram(np.linspace(0, 1, 10), np.ones(10))

    def test_csv_round_trip(self, tmp_path, table1_hist):
        table1_hist.to_csv(tmp_path / "h.csv")
        back = MarginalHistogram.from_csv(tmp_path / "h.csv")
        assert np.array_equal(back.density, table1_hist.density)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0.02, 0.98), st.floats(0.01, 2), st.floats(0.01, 2))
    def test_candidate_normalized(self, w, m, ms, mr):
        assert mixture_bins([w, m, ms, mr], 20).sum() / 20 == pytest.approx(1.0, abs=1e-8)


class TestObjective:
    def test_self_fit(self):
        f = MixtureFit(0.3, 0.4, 0.2, 0.9)
        assert objective(f, MarginalHistogram.from_mixture(f, 30)) < 1e-10

    def test_table1_self_fit(self, table1_hist):
        assert objective(TABLE1, table1_hist) < 1e-10

    def test_wrong_component(self):
        pure_r = MarginalHistogram.from_mixture(MixtureFit(0.0, 0.3, 0.2, 0.9), 20)
        assert objective([1.0, 0.3, 0.2, 0.9], pure_r) > 0.1

    @pytest.mark.parametrize("x", [[1.2, 0.3, 0.2, 0.2], [0.5, 0.0, 0.2, 0.2], [0.5, 0.3, -1, 0.2],
                                   [0.5, 0.3, 0.2], [0.5, 0.3, math.nan, 0.2]])
    def test_invalid_is_inf(self, x, table1_hist):
        assert objective(x, table1_hist) == math.inf

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0.02, 0.98), st.floats(0.01, 2), st.floats(0.01, 2))
    def test_label_symmetry(self, w, m, ms, mr):
        h = MarginalHistogram.from_mixture(TABLE1, 20)
        a = objective([w, m, ms, mr], h)
        b = objective([1 - w, m, mr, ms], h)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)

    def test_point_model(self):
        f = MixtureFit(1.0, 1 / 3, 1 / 6, 1.0)
        d = mixture_bins([1.0, 1 / 3, 1 / 6, 1.0], 50, model="point")
        # samples at centers are not exactly normalized; the residual is the rescaling gap
        h = MarginalHistogram.from_density(d / (d.sum() / 50))
        gap = np.sqrt(((d - h.density) ** 2).sum() / 50)
        assert objective(f, h, model="point") == pytest.approx(gap, rel=1e-10)


class TestFit:
    def test_table1_recovery(self, table1_hist):
        fit = fit_mixture(table1_hist)
        assert param_distance(fit, TABLE1) < 2e-2
        assert fit.residual < 1e-8

    def test_single_beta(self):
        fit = fit_mixture(single_beta_hist())
        assert fit.residual < 1e-6

    def test_deterministic(self):
        h = single_beta_hist(0.6, 0.5)
        assert fit_mixture(h, starts=3, seed=4) == fit_mixture(h, starts=3, seed=4)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_not_worse_than_start(self, seed, table1_hist):
        from scipy.stats import qmc
        from opinion_kinetics.calibration import BOX_HI, BOX_LO

        lhs = qmc.LatinHypercube(d=4, seed=np.random.default_rng(seed)).random(3)
        starts = qmc.scale(lhs, BOX_LO[:4], BOX_HI[:4])
        best_start = min(objective(x, table1_hist) for x in starts)
        assert fit_mixture(table1_hist, starts=3, seed=seed).residual <= best_start

    def test_relaxed(self):
        f = MixtureFit(0.5, 0.8, 0.1, 0.1, mean_R=0.2)
        fit = fit_mixture(MarginalHistogram.from_mixture(f, 40), relaxed=True)
        assert fit.mean_R is not None and fit.residual < 1e-3

    def test_bad_starts(self, table1_hist):
        with pytest.raises(DomainError):
            fit_mixture(table1_hist, starts=0)

    def test_all_non_finite(self, table1_hist, monkeypatch):
        import opinion_kinetics.calibration as cal

        monkeypatch.setattr(cal, "objective", lambda *a, **k: math.inf)
        with pytest.raises(FitError):
            cal.fit_mixture(table1_hist, starts=2)

    def test_coupled_run_histogram(self, coupled_hist):
        fit = fit_mixture(coupled_hist)
        assert fit.residual < 0.05
        assert count_modes(fit) == count_sampled_modes(coupled_hist.density)

    def test_fit_table(self, tmp_path, table1_hist):
        write_fit_table(TABLE1, table1_hist, tmp_path / "t.csv")
        rows = (tmp_path / "t.csv").read_text().splitlines()
        assert rows[0] == "bin_center,data,model,model_S,model_R" and len(rows) == 21


class TestBruteForce:
    def test_table1(self, table1_hist):
        best = brute_force_fit(table1_hist, 15)
        # the coarse grid cannot resolve the near-degenerate mixture: it lands on
        # the right mean with a small residual but a different (weight, spread) split
        assert abs(best.mean - TABLE1.mean) < 0.07 / 2 + 1e-12
        assert best.residual < 1e-2

    def test_uniform(self):
        h = MarginalHistogram.from_density(np.ones(20))
        best = brute_force_fit(h, 9)
        assert best.residual <= objective([1.0, 0.5, 0.5, 0.5], h) + 1e-15

    def test_range(self, table1_hist):
        with pytest.raises(DomainError):
            brute_force_fit(table1_hist, 4)

    @pytest.mark.parametrize("name", ["table1", "single", "uniform", "bimodal"])
    def test_dominance(self, name, table1_hist):
        h = {"table1": table1_hist, "single": single_beta_hist(),
             "uniform": MarginalHistogram.from_density(np.ones(20)),
             "bimodal": MarginalHistogram.from_mixture(MixtureFit(0.4, 0.5, 0.05, 1.5), 20)}[name]
        assert fit_mixture(h).residual <= brute_force_fit(h, 12).residual + 1e-6
