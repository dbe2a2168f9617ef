import math

import numpy as np
import pytest

import hepkit as hk
from hepkit.fitting import FitStatus, generate_model_sample, numeric_errors
from toymodel import build_model, RANGE, TRUTH


def _region():
    return hk.BoundedRegion((RANGE,))


def _store(values):
    return hk.ColumnStore.from_columns(
        hk.ColumnSchema.real64("x0"), [np.asarray(values, dtype=float)]
    )


class TestMakePdf:
    def test_gaussian_norm_on_wide_interval(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 0.0), hk.Parameter("sigma", 1.0))
        pdf = hk.make_pdf(g, hk.gaussian_norm(g), hk.BoundedRegion(((-10.0, 10.0),)))
        # erf over +-10 sigma is 1.0 to double precision
        assert pdf.value((0.0,)) == pytest.approx(0.3989422804014327, rel=1e-13)

    def test_exponential_norm_closed_form(self):
        e = hk.shape_exponential(hk.Parameter("tau", 1.0))
        pdf = hk.make_pdf(e, hk.exponential_norm(e), hk.BoundedRegion(((0.0, 10.0),)))
        pdf.value((0.0,))
        # frozen: tau (e^0 - e^-10) = 0.9999546000702375
        assert pdf.norm() == pytest.approx(0.9999546000702375, rel=1e-14)

    def test_numeric_norm_matches_analytic(self):
        g1 = hk.shape_gaussian(hk.Parameter("mean", 1.0), hk.Parameter("sigma", 0.7))
        g2 = hk.shape_gaussian(g1.mean, g1.sigma)
        region = hk.BoundedRegion(((-2.0, 4.0),))
        analytic = hk.make_pdf(g1, hk.gaussian_norm(g1), region)
        numeric = hk.make_pdf(g2, None, region)
        assert numeric.norm() == pytest.approx(analytic.norm(), rel=1e-10)

    def test_norm_cache_contract(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 0.0), hk.Parameter("sigma", 1.0))
        pdf = hk.make_pdf(g, hk.gaussian_norm(g), _region())
        for _ in range(5):
            pdf.value((1.0,))
        assert pdf.norm_computations == 1
        g.mean.set(0.5)
        pdf.value((1.0,))
        assert pdf.norm_computations == 2

    def test_bad_norm_rejected(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 0.0), hk.Parameter("sigma", 1.0))
        pdf = hk.make_pdf(g, lambda region: -1.0, _region())
        with pytest.raises(ValueError, match="positive"):
            pdf.norm()


class TestAddPdfs:
    def test_single_component_density(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 5.0), hk.Parameter("sigma", 1.0))
        pdf = hk.make_pdf(g, hk.gaussian_norm(g), _region())
        n = hk.Parameter("n", 100.0)
        model = hk.add_pdfs([n], [pdf])
        assert model.density((5.0,)) == pytest.approx(100.0 * pdf.value((5.0,)), rel=1e-14)

    def test_identical_pdfs_doubling(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 5.0), hk.Parameter("sigma", 1.0))
        pdf = hk.make_pdf(g, hk.gaussian_norm(g), _region())
        n1 = hk.Parameter("n1", 50.0)
        n2 = hk.Parameter("n2", 50.0)
        model = hk.add_pdfs([n1, n2], [pdf, pdf])
        single = hk.add_pdfs([hk.Parameter("n", 100.0)], [pdf])
        assert model.density((4.0,)) == pytest.approx(single.density((4.0,)), rel=1e-14)

    def test_length_mismatch(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 5.0), hk.Parameter("sigma", 1.0))
        pdf = hk.make_pdf(g, hk.gaussian_norm(g), _region())
        with pytest.raises(ValueError):
            hk.add_pdfs([hk.Parameter("n", 1.0)], [pdf, pdf])

    def test_gauss_plus_exp_model(self):
        model = build_model()
        assert model.species() == ["n_sig", "n_bkg"]
        assert model.expected_total() == pytest.approx(50000.0)


class TestNll:
    def test_single_event_definitional(self):
        g = hk.shape_gaussian(hk.Parameter("mean", 0.0), hk.Parameter("sigma", 1.0))
        region = hk.BoundedRegion(((-10.0, 10.0),))
        pdf = hk.make_pdf(g, hk.gaussian_norm(g), region)
        n = hk.Parameter("n", 1.0)
        model = hk.add_pdfs([n], [pdf])
        store = _store([0.0])
        # frozen hand evaluation: 1 - ln(0.3989422804014327 / 1.0)
        assert hk.nll(model, store, ["x0"]) == pytest.approx(1.9189385332046727, rel=1e-14)

    def test_duplicating_events_doubles_event_sum(self):
        model = build_model()
        x = np.linspace(1.0, 9.0, 101)
        base = hk.nll(model, _store(x), ["x0"])
        doubled = hk.nll(model, _store(np.concatenate([x, x])), ["x0"])
        total = model.expected_total()
        assert doubled - total == pytest.approx(2.0 * (base - total), rel=1e-12)

    def test_empty_store_rejected(self):
        model = build_model()
        with pytest.raises(ValueError):
            hk.nll(model, _store([]), ["x0"])

    def test_nonpositive_density_names_event(self):
        e = hk.shape_exponential(hk.Parameter("tau", 1.0))
        pdf = hk.make_pdf(e, hk.exponential_norm(e), _region())
        model = hk.add_pdfs([hk.Parameter("n", 0.0)], [pdf])
        with pytest.raises(ValueError, match="event 0"):
            hk.nll(model, _store([1.0]), ["x0"])

    def test_worker_count_bitwise_invariance(self):
        model = build_model()
        data = generate_model_sample(model, hk.RngKey(51, 2), workers=2)
        values = {w: hk.nll(model, data, ["x0"], workers=w) for w in (1, 2, 8)}
        assert values[1] == values[2] == values[8]

    def test_cache_disabled_equivalence(self):
        # same values through a fresh model (empty caches) are bitwise equal
        model_a = build_model()
        data = generate_model_sample(model_a, hk.RngKey(52, 2))
        seq = [
            {"mean": 5.1, "sigma": 0.52},
            {"mean": 5.1, "sigma": 0.52},   # repeated: cache hit path
            {"mean": 4.9, "sigma": 0.48},
        ]
        got = []
        for upd in seq:
            ps = model_a.param_set()
            for k, v in upd.items():
                ps[k].set(v)
            got.append(hk.nll(model_a, data, ["x0"]))
        fresh = []
        for upd in seq:
            model_b = build_model(**upd)
            fresh.append(hk.nll(model_b, data, ["x0"]))
        assert got == fresh


class TestMinimize:
    def test_quadratic_closed_form(self):
        a = hk.Parameter("a", 0.0, step=0.5)
        params = hk.ParamSet([a])
        res = hk.minimize(lambda ps: (ps["a"].value - 3.0) ** 2, params)
        assert res.status is FitStatus.CONVERGED
        assert a.value == pytest.approx(3.0, abs=1e-4)
        # NLL convention: H = 2 -> error = 1/sqrt(2)
        assert res.errors["a"] == pytest.approx(0.7071067811865475, rel=1e-4)

    def test_interior_optimum_unaffected_by_bounds(self):
        # both runs land within the simplex tolerance of the same argmin
        # (function spread 1e-8 of a unit quadratic allows ~1e-4 in a)
        objective = lambda ps: (ps["a"].value - 1.5) ** 2 + 0.7
        free = hk.Parameter("a", 0.2, step=0.3)
        res_free = hk.minimize(objective, hk.ParamSet([free]))
        bounded = hk.Parameter("a", 0.2, step=0.3, lower=-5.0, upper=5.0)
        res_bounded = hk.minimize(objective, hk.ParamSet([bounded]))
        assert bounded.value == pytest.approx(free.value, abs=5e-4)
        assert res_bounded.nll_min == pytest.approx(res_free.nll_min, abs=1e-7)

    def test_fixed_parameter_never_moves(self):
        a = hk.Parameter("a", 0.0, step=0.5)
        b = hk.Parameter("b", 2.5, step=0.5, fixed=True)
        params = hk.ParamSet([a, b])
        hk.minimize(lambda ps: (ps["a"].value - 1.0) ** 2 + ps["b"].value, params)
        assert b.value == 2.5
        assert a.value == pytest.approx(1.0, abs=1e-4)

    def test_zero_free_parameters(self):
        a = hk.Parameter("a", 1.0, fixed=True)
        res = hk.minimize(lambda ps: ps["a"].value ** 2, hk.ParamSet([a]))
        assert res.status is FitStatus.CONVERGED
        assert res.nll_min == 1.0
        assert res.errors == {}
        assert res.n_calls == 1

    def test_constant_shift_invariance(self):
        # adding an exactly representable constant shifts nll_min by exactly
        # that constant and leaves the trajectory untouched
        shift = 4.0
        base = lambda ps: (ps["a"].value - 2.0) ** 4 + (ps["a"].value + 1.0) ** 2

        a1 = hk.Parameter("a", 0.3, step=0.4)
        r1 = hk.minimize(base, hk.ParamSet([a1]))
        a2 = hk.Parameter("a", 0.3, step=0.4)
        r2 = hk.minimize(lambda ps: base(ps) + shift, hk.ParamSet([a2]))
        assert a2.value == a1.value
        assert r2.nll_min == r1.nll_min + shift

    def test_max_iterations_flag(self):
        a = hk.Parameter("a", 100.0, step=0.001)
        res = hk.minimize(
            lambda ps: abs(ps["a"].value), hk.ParamSet([a]), max_iterations=3
        )
        assert res.status is FitStatus.MAX_ITERATIONS
        assert res.errors is None

    def test_two_dimensional_rosenbrock_ish(self):
        x = hk.Parameter("x", -1.0, step=0.2)
        y = hk.Parameter("y", 1.5, step=0.2)

        def obj(ps):
            return (1 - ps["x"].value) ** 2 + 5.0 * (ps["y"].value - ps["x"].value ** 2) ** 2

        res = hk.minimize(obj, hk.ParamSet([x, y]), max_iterations=5000)
        assert res.status is FitStatus.CONVERGED
        assert x.value == pytest.approx(1.0, abs=1e-3)
        assert y.value == pytest.approx(1.0, abs=1e-3)


class TestNumericErrors:
    def test_correlated_quadratic(self):
        # NLL = 0.5 x^T H x with known H; errors are sqrt of inv(H) diagonal
        H = np.array([[2.0, 0.6], [0.6, 1.0]])

        def obj(ps):
            v = np.array([ps["x"].value, ps["y"].value])
            return 0.5 * float(v @ H @ v)

        params = hk.ParamSet([hk.Parameter("x", 0.0), hk.Parameter("y", 0.0)])
        errors = numeric_errors(obj, params)
        cov = np.linalg.inv(H)
        assert errors["x"] == pytest.approx(math.sqrt(cov[0, 0]), rel=1e-5)
        assert errors["y"] == pytest.approx(math.sqrt(cov[1, 1]), rel=1e-5)

    def test_not_posdef_returns_none(self):
        params = hk.ParamSet([hk.Parameter("x", 0.0)])
        assert numeric_errors(lambda ps: -ps["x"].value ** 2, params) is None


class TestFit:
    def test_recovers_truth_and_yield_sum(self):
        model = build_model(scale=0.2)    # 10k expected
        data = generate_model_sample(model, hk.RngKey(61, 2), workers=2)
        n = len(data)
        ps = model.param_set()
        ps["mean"].set(4.7)
        ps["sigma"].set(0.6)
        ps["tau"].set(2.6)
        res = hk.fit(model, data, ["x0"], workers=2)
        assert res.status is FitStatus.CONVERGED
        total = ps["n_sig"].value + ps["n_bkg"].value
        # extended-ML identity: fitted total equals the event count
        assert total == pytest.approx(n, rel=1e-6)
        assert abs(total - n) < 3 * math.sqrt(n)
        for name in ("mean", "sigma", "tau"):
            pull = (ps[name].value - TRUTH[name]) / res.errors[name]
            assert abs(pull) < 5

    def test_zero_free_parameters(self):
        model = build_model(scale=0.01)
        data = generate_model_sample(model, hk.RngKey(62, 2))
        for p in model.param_set():
            p.fixed = True
        res = hk.fit(model, data, ["x0"])
        assert res.status is FitStatus.CONVERGED
        assert res.errors == {}
        assert res.nll_min == pytest.approx(hk.nll(model, data, ["x0"]), rel=1e-12)

    def test_yield_stationarity_after_fit(self):
        from hepkit.fitting import _yield_stationarity

        model = build_model(scale=0.1)
        data = generate_model_sample(model, hk.RngKey(63, 2))
        hk.fit(model, data, ["x0"])
        g, _ = _yield_stationarity(model, data, ["x0"], workers=1)
        assert np.max(np.abs(g)) < 1e-10

    def test_fixed_shape_fit_only_yields(self):
        model = build_model(scale=0.05)
        data = generate_model_sample(model, hk.RngKey(64, 2))
        ps = model.param_set()
        for name in ("mean", "sigma", "tau"):
            ps[name].fixed = True
        res = hk.fit(model, data, ["x0"])
        assert res.status is FitStatus.CONVERGED
        assert ps["n_sig"].value + ps["n_bkg"].value == pytest.approx(len(data), rel=1e-6)


class TestGenerateModelSample:
    def test_poisson_fluctuates_total(self):
        model = build_model(scale=0.02)    # 1000 expected
        sizes = {
            len(generate_model_sample(model, hk.RngKey(seed, 2))) for seed in range(5)
        }
        assert len(sizes) > 1

    def test_fixed_counts_without_poisson(self):
        model = build_model(scale=0.02)
        data = generate_model_sample(model, hk.RngKey(65, 2), poisson=False)
        assert len(data) == 1000

    def test_deterministic(self):
        model = build_model(scale=0.02)
        a = generate_model_sample(model, hk.RngKey(66, 2), workers=1)
        b = generate_model_sample(model, hk.RngKey(66, 2), workers=8)
        assert np.array_equal(a.column("x0"), b.column("x0"))
