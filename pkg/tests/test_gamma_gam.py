import numpy as np
import pytest
from scipy.stats import spearmanr

from droughtspi.errors import FitError
from droughtspi.gamma_gam import (
    GammaGamFit,
    GammaGamSpec,
    assemble_design,
    default_formula,
    effective_dof,
    fit,
    fit_inner,
    gamma_log_density,
    load_fit,
    penalized_loglik,
    predict,
    reml_criterion,
    save_fit,
)
from droughtspi.splines import SmoothSpec

INTERCEPT_ONLY = GammaGamSpec(scale_formula=(), shape_formula=())


def seasonal_spec(tps=8, ccs=5):
    tensor = SmoothSpec(
        kind="tensor_product",
        child_specs=(
            SmoothSpec(kind="thin_plate_2d", basis_dim=tps, covariate_names=("lon", "lat")),
            SmoothSpec(kind="cyclic_cubic_1d", basis_dim=ccs, covariate_names=("month",), period=12.0),
        ),
    )
    return GammaGamSpec(scale_formula=(tensor,), shape_formula=(tensor,))


def simulate_seasonal(n_stations=10, n_years=8, seed=0, amp=0.3, alpha_true=2.0):
    rng = np.random.default_rng(seed)
    lon = rng.uniform(16.0, 18.5, size=n_stations)
    lat = rng.uniform(40.0, 42.0, size=n_stations)
    months = np.arange(n_years * 12)
    rows = {"lon": [], "lat": [], "month": [], "y": [], "psi_true": []}
    for s in range(n_stations):
        month_of_year = months % 12
        psi = np.exp(0.5 + amp * np.sin(2 * np.pi * month_of_year / 12.0))
        y = rng.gamma(shape=alpha_true, scale=psi)
        rows["lon"].append(np.full(months.size, lon[s]))
        rows["lat"].append(np.full(months.size, lat[s]))
        rows["month"].append(month_of_year.astype(float))
        rows["y"].append(y)
        rows["psi_true"].append(psi)
    return {k: np.concatenate(v) for k, v in rows.items()}


class TestGammaLogDensity:
    def test_exponential_case(self):
        assert gamma_log_density(1.0, 1.0, 1.0) == pytest.approx(-1.0, abs=1e-14)

    def test_hand_computed(self):
        expected = -2 * np.log(3.0) + np.log(6.0) - 2.0 - 0.0
        assert gamma_log_density(6.0, 2.0, 3.0) == pytest.approx(expected, abs=1e-12)

    def test_support(self):
        with pytest.raises(ValueError):
            gamma_log_density(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            gamma_log_density(1.0, -1.0, 1.0)


class TestPenalizedLoglik:
    def setup_method(self):
        rng = np.random.default_rng(42)
        self.cov = {
            "lon": rng.uniform(16, 18, 200),
            "lat": rng.uniform(40, 42, 200),
            "month": (np.arange(200) % 12).astype(float),
        }
        self.y = rng.gamma(2.0, 1.5, size=200)
        self.design = assemble_design(self.y, self.cov, seasonal_spec(tps=6, ccs=4))

    def test_zero_lambda_is_unpenalized(self):
        rng = np.random.default_rng(1)
        beta = rng.normal(scale=0.05, size=self.design.p)
        lam = np.full(self.design.n_lambda, 1e-300)
        ll_pen = penalized_loglik(beta, lam, self.design)
        assert ll_pen == pytest.approx(self.design.loglik_only(beta), abs=1e-8)

    def test_beta_zero_is_unit_gamma(self):
        lam = np.ones(self.design.n_lambda)
        got = penalized_loglik(np.zeros(self.design.p), lam, self.design)
        expected = np.sum(gamma_log_density(self.y, 1.0, 1.0))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_single_observation_hand_check(self):
        design = assemble_design(
            np.array([2.5]), {}, INTERCEPT_ONLY
        )
        beta = np.array([0.3, -0.2])  # [log psi intercept, log alpha intercept]
        got = penalized_loglik(beta, np.zeros(0), design)
        expected = gamma_log_density(2.5, np.exp(-0.2), np.exp(0.3))
        assert got == pytest.approx(expected, abs=1e-12)


class TestFitInner:
    def test_iid_recovery(self):
        rng = np.random.default_rng(7)
        y = rng.gamma(2.0, 1.5, size=5000)
        design = assemble_design(y, {}, INTERCEPT_ONLY)
        beta, H, diag = fit_inner(np.zeros(0), design)
        assert diag["converged"]
        psi_hat = np.exp(beta[design.intercept_cols["psi"]])
        alpha_hat = np.exp(beta[design.intercept_cols["alpha"]])
        assert alpha_hat == pytest.approx(2.0, abs=0.1)
        assert psi_hat == pytest.approx(1.5, abs=0.1)

    def test_gradient_small_at_solution(self):
        rng = np.random.default_rng(8)
        data = simulate_seasonal(n_stations=5, n_years=4, seed=8)
        design = assemble_design(data["y"], data, seasonal_spec(tps=5, ccs=4))
        lam = np.ones(design.n_lambda)
        beta, H, diag = fit_inner(lam, design)
        assert diag["grad_norm"] <= 1e-6 * (1.0 + abs(diag["penalized_loglik"]))

    def test_huge_lambda_collapses_to_null_space(self):
        rng = np.random.default_rng(9)
        n = 600
        cov = {"month": (np.arange(n) % 12).astype(float)}
        y = rng.gamma(2.0, np.exp(0.4 * np.sin(2 * np.pi * cov["month"] / 12)), size=n)
        spec = GammaGamSpec(
            scale_formula=(
                SmoothSpec(kind="cyclic_cubic_1d", basis_dim=6, covariate_names=("month",), period=12.0),
            ),
            shape_formula=(),
        )
        design = assemble_design(y, cov, spec)
        lam = np.array([1e9])
        beta, H, _ = fit_inner(lam, design)
        S = design.penalty_at(lam)
        M = np.linalg.solve(H, H - S)
        edf = float(np.trace(M[design.terms[0].sl, design.terms[0].sl]))
        # centered cyclic smooth has an empty penalty null space
        assert edf == pytest.approx(0.0, abs=0.05)

    def test_warm_start_saves_iterations(self):
        data = simulate_seasonal(n_stations=6, n_years=5, seed=10)
        design = assemble_design(data["y"], data, seasonal_spec(tps=5, ccs=4))
        lam0 = np.ones(design.n_lambda)
        beta0, _, diag_cold = fit_inner(lam0, design)
        lam1 = lam0 * 1.5
        _, _, diag_cold1 = fit_inner(lam1, design)
        _, _, diag_warm1 = fit_inner(lam1, design, warm_start=beta0)
        assert diag_warm1["iterations"] <= diag_cold1["iterations"]

    def test_local_maximum_property(self):
        rng = np.random.default_rng(11)
        y = rng.gamma(3.0, 2.0, size=800)
        design = assemble_design(y, {}, INTERCEPT_ONLY)
        beta, _, _ = fit_inner(np.zeros(0), design)
        base = penalized_loglik(beta, np.zeros(0), design)
        for _ in range(100):
            eps = rng.normal(size=beta.size)
            eps *= 1e-3 / np.linalg.norm(eps)
            assert penalized_loglik(beta + eps, np.zeros(0), design) <= base + 1e-12

    def test_recovery_within_three_se(self):
        # eta-scale recovery across replicates, using the asymptotic
        # covariance from the fitted information matrix
        rng = np.random.default_rng(12)
        hits = 0
        n_rep = 100
        for _ in range(n_rep):
            y = rng.gamma(2.0, 1.5, size=2000)
            design = assemble_design(y, {}, INTERCEPT_ONLY)
            beta, H, _ = fit_inner(np.zeros(0), design)
            se = np.sqrt(np.diag(np.linalg.inv(H)))
            truth = np.array([np.log(1.5), np.log(2.0)])
            est = np.array(
                [beta[design.intercept_cols["psi"]], beta[design.intercept_cols["alpha"]]]
            )
            if np.all(np.abs(est - truth) <= 3 * se):
                hits += 1
        assert hits >= 95


class TestRemlCriterion:
    def test_no_penalty_degenerate_structure(self):
        rng = np.random.default_rng(13)
        y = rng.gamma(2.0, 1.0, size=300)
        design = assemble_design(y, {}, INTERCEPT_ONLY)
        value = reml_criterion(np.zeros(0), design)
        beta, H, _ = fit_inner(np.zeros(0), design)
        ll = design.loglik_only(beta)
        logdetH = float(np.sum(np.log(np.linalg.eigvalsh(H))))
        assert value == pytest.approx(ll - 0.5 * logdetH, abs=1e-6)

    def test_finite_at_extreme_lambdas(self):
        data = simulate_seasonal(n_stations=5, n_years=4, seed=14)
        design = assemble_design(data["y"], data, seasonal_spec(tps=5, ccs=4))
        for lam in (1e-4, 1e4):
            value = reml_criterion(np.full(design.n_lambda, lam), design)
            assert np.isfinite(value)

    def test_smooth_in_log_lambda(self):
        data = simulate_seasonal(n_stations=5, n_years=4, seed=15)
        design = assemble_design(data["y"], data, seasonal_spec(tps=5, ccs=4))
        base = np.zeros(design.n_lambda)

        def r(log_lam):
            return reml_criterion(np.exp(log_lam), design)

        h = 1e-3
        e0 = np.zeros(design.n_lambda)
        e0[0] = 1.0
        central = (r(base + h * e0) - r(base - h * e0)) / (2 * h)
        forward = (r(base + h * e0) - r(base)) / h
        backward = (r(base) - r(base - h * e0)) / h
        assert central == pytest.approx((forward + backward) / 2.0, rel=1e-6)
        assert forward == pytest.approx(central, rel=2e-3, abs=1e-3)
        assert backward == pytest.approx(central, rel=2e-3, abs=1e-3)


@pytest.fixture(scope="module")
def seasonal_fit():
    data = simulate_seasonal(n_stations=10, n_years=8, seed=21)
    fit_obj = fit(data["y"], data, seasonal_spec(tps=6, ccs=5))
    return data, fit_obj


class TestFit:
    def test_seasonal_recovery(self, seasonal_fit):
        # at this reduced size the pointwise max error is noise-dominated;
        # the full-scale recovery bound lives in the acceptance suite
        data, fit_obj = seasonal_fit
        alpha_hat, psi_hat = predict(fit_obj, data)
        rel_err = np.abs(psi_hat - data["psi_true"]) / data["psi_true"]
        assert np.median(rel_err) <= 0.12
        assert np.quantile(rel_err, 0.95) <= 0.25
        assert np.median(np.abs(alpha_hat - 2.0)) <= 0.4

    def test_edf_below_maxima(self, seasonal_fit):
        _, fit_obj = seasonal_fit
        for edf, width in zip(fit_obj.edf_per_smooth, fit_obj.term_widths):
            assert 0.0 < edf <= width

    def test_reml_beats_gross_missmoothing(self, seasonal_fit):
        data, fit_obj = seasonal_fit
        design = assemble_design(data["y"], data, fit_obj.spec)
        at_hat = reml_criterion(fit_obj.lam, design)
        assert at_hat >= reml_criterion(fit_obj.lam * 1e4, design) - 1e-6
        assert at_hat >= reml_criterion(fit_obj.lam * 1e-4, design) - 1e-6

    def test_constant_data_errors(self):
        y = np.full(200, 5.0)
        with pytest.raises(FitError):
            fit(y, {}, INTERCEPT_ONLY)

    def test_stationary_surfaces_flat(self):
        rng = np.random.default_rng(23)
        n_stations, n_months = 8, 60
        cov = {
            "lon": np.repeat(rng.uniform(16, 18, n_stations), n_months),
            "lat": np.repeat(rng.uniform(40, 42, n_stations), n_months),
            "month": np.tile(np.arange(n_months) % 12, n_stations).astype(float),
        }
        y = rng.gamma(2.0, 50.0, size=n_stations * n_months)
        fit_obj = fit(y, cov, seasonal_spec(tps=5, ccs=4))
        alpha_hat, psi_hat = predict(fit_obj, cov)
        assert np.std(alpha_hat) / np.mean(alpha_hat) <= 0.05
        assert np.std(psi_hat) / np.mean(psi_hat) <= 0.05


class TestPredict:
    def test_intercept_only_at_training_point(self):
        rng = np.random.default_rng(29)
        y = rng.gamma(2.0, 3.0, size=500)
        fit_obj = fit(y, {"lon": np.zeros(500), "lat": np.zeros(500)}, INTERCEPT_ONLY)
        alpha_hat, psi_hat = predict(fit_obj, {"lon": [0.0], "lat": [0.0]}, warn_extrapolation=False)
        assert alpha_hat[0] == pytest.approx(
            np.exp(fit_obj.beta[fit_obj.intercept_cols["alpha"]]), rel=1e-12
        )
        assert psi_hat[0] == pytest.approx(
            np.exp(fit_obj.beta[fit_obj.intercept_cols["psi"]]), rel=1e-12
        )

    def test_continuity_in_space(self, seasonal_fit):
        data, fit_obj = seasonal_fit
        lon0, lat0 = data["lon"][0], data["lat"][0]
        deltas = [1e-2, 1e-4, 1e-6]
        gaps = []
        for d in deltas:
            cov = {
                "lon": np.array([lon0, lon0 + d]),
                "lat": np.array([lat0, lat0]),
                "month": np.array([3.0, 3.0]),
            }
            a, p = predict(fit_obj, cov, warn_extrapolation=False)
            gaps.append(abs(p[1] - p[0]) + abs(a[1] - a[0]))
        assert gaps[2] <= gaps[1] <= gaps[0] + 1e-12
        assert gaps[2] < 1e-4

    def test_pattern_ranking(self, seasonal_fit):
        data, fit_obj = seasonal_fit
        _, psi_hat = predict(fit_obj, data)
        rho = spearmanr(psi_hat, data["psi_true"]).statistic
        assert rho >= 0.9

    def test_extrapolation_warning(self, seasonal_fit):
        from droughtspi.errors import ExtrapolationWarning

        data, fit_obj = seasonal_fit
        cov = {"lon": np.array([100.0]), "lat": np.array([0.0]), "month": np.array([1.0])}
        with pytest.warns(ExtrapolationWarning):
            predict(fit_obj, cov)


class TestEffectiveDof:
    def _month_spec_design(self, seed, n=600):
        rng = np.random.default_rng(seed)
        cov = {"month": (np.arange(n) % 12).astype(float)}
        y = rng.gamma(2.0, np.exp(0.3 * np.sin(2 * np.pi * cov["month"] / 12)), size=n)
        spec = GammaGamSpec(
            scale_formula=(
                SmoothSpec(kind="cyclic_cubic_1d", basis_dim=6, covariate_names=("month",), period=12.0),
            ),
            shape_formula=(),
        )
        return assemble_design(y, cov, spec)

    def _edf_at(self, design, lam_value):
        lam = np.array([lam_value])
        beta, H, _ = fit_inner(lam, design)
        S = design.penalty_at(lam)
        M = np.linalg.solve(H, H - S)
        return float(np.trace(M[design.terms[0].sl, design.terms[0].sl]))

    def test_limits(self):
        design = self._month_spec_design(31)
        width = design.terms[0].width
        assert self._edf_at(design, 1e-8) == pytest.approx(width, abs=0.05)
        assert self._edf_at(design, 1e10) == pytest.approx(0.0, abs=0.05)

    def test_monotone_in_lambda(self):
        design = self._month_spec_design(37)
        lam_grid = [1e-4, 1e-2, 1.0, 1e2, 1e4]
        edfs = [self._edf_at(design, lam) for lam in lam_grid]
        assert all(a >= b - 1e-6 for a, b in zip(edfs, edfs[1:]))

    def test_accessor_requires_convergence(self, seasonal_fit):
        _, fit_obj = seasonal_fit
        assert effective_dof(fit_obj) == fit_obj.edf_per_smooth


class TestSerialization:
    def test_save_load_predict(self, seasonal_fit, tmp_path):
        data, fit_obj = seasonal_fit
        path = tmp_path / "fit.json"
        save_fit(fit_obj, path)
        restored = load_fit(path)
        a0, p0 = predict(fit_obj, data, warn_extrapolation=False)
        a1, p1 = predict(restored, data, warn_extrapolation=False)
        np.testing.assert_allclose(a1, a0, rtol=1e-12)
        np.testing.assert_allclose(p1, p0, rtol=1e-12)

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError):
            load_fit(path)
