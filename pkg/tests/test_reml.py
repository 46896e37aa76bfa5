import numpy as np
import pytest

from _oracle import (
    coef_pev_dense,
    dense_v,
    fixed_design,
    full_loglik_dense,
    gls_dense,
    reml_loglik_dense,
)
from gxemix import reml
from gxemix import structures as st
from gxemix.data_model import MetDataset
from gxemix.errors import FitError
from gxemix.simulate import SimTruth, EcTruth, simulate

RESID = {
    "location": 0.15,
    "year": 0.08,
    "location_year": 0.3,
    "genotype_location": 0.05,
    "genotype_year": 0.04,
    "genotype_location_year": 0.25,
}


def _random_dataset(rng, n_geno=3, n_loc=2, n_yr=3, drop=0, weights=True):
    rows = []
    for i in range(n_geno):
        for l in range(n_loc):
            for m in range(n_yr):
                w = float(rng.uniform(0.5, 2.0)) if weights else 1.0
                rows.append((f"g{i}", f"l{l}", 2000 + m, float(rng.normal()), w))
    if drop:
        keep = rng.permutation(len(rows))[: len(rows) - drop]
        rows = [rows[k] for k in sorted(keep)]
    return MetDataset.from_records(rows)


def _layout_for(dataset, spec, x_work, mean_regression=False):
    return reml.build_layout(
        dataset, x_work, reml.SpecStructure(spec), reml.TermConfig(), mean_regression=mean_regression
    )


def _theta(spec, params, resid):
    svec = st.to_unconstrained(spec, params)
    return reml.pack_theta(svec, resid, reml.TermConfig())


@pytest.mark.parametrize("mean_regression", [False, True])
@pytest.mark.parametrize(
    "kind,p,q",
    [(st.BASELINE, 0, 0), (st.KINSHIP, 2, 0), (st.REDUCED_RANK, 2, 1), (st.UNSTRUCTURED, 2, 0)],
)
def test_loglik_matches_dense_oracle(kind, p, q, mean_regression):
    rng = np.random.default_rng(10 + p + q + mean_regression)
    dataset = _random_dataset(rng, drop=3)
    x_work = rng.normal(size=(dataset.n_envs, p))
    spec = st.StructureSpec(kind, p=p, q=q)
    params = st.from_unconstrained(spec, rng.normal(size=spec.n_free_params) * 0.5)
    layout = _layout_for(dataset, spec, x_work, mean_regression)
    theta = _theta(spec, params, RESID)

    parts = reml.likelihood_parts(layout, theta)
    v = dense_v(dataset, st.sigma_matrix(spec, params), RESID, x_work)
    x = fixed_design(dataset, x_work, mean_regression)
    assert parts.loglik_reml == pytest.approx(reml_loglik_dense(dataset.mean, x, v), abs=1e-8)
    assert parts.loglik_full == pytest.approx(full_loglik_dense(dataset.mean, x, v), abs=1e-8)
    assert np.allclose(parts.beta, gls_dense(dataset.mean, x, v), atol=1e-8)


def test_loglik_single_observation_constant():
    # One record, unit total variance, zero response, no fixed effects.
    ds = MetDataset.from_records([("g", "l", 2001, 0.0, 1e12)], require_two_years=False)
    spec = st.StructureSpec(st.BASELINE, 0)
    struct = reml.SpecStructure(spec)
    terms = reml.TermConfig(
        location=False, year=False, location_year=False,
        genotype_location=False, genotype_year=False, genotype_location_year=True,
    )
    layout = reml.build_layout(ds, None, struct, terms, fixed_rows=np.zeros((1, 0)))
    theta = np.array([np.log(1e-30), np.log(1.0)])
    val = reml.likelihood_parts(layout, theta).loglik_reml
    assert val == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-6)


def test_loglik_invariant_to_record_order():
    rng = np.random.default_rng(21)
    rows = []
    for i in range(3):
        for l in range(2):
            for m in range(3):
                rows.append((f"g{i}", f"l{l}", 2000 + m, float(rng.normal()), float(rng.uniform(0.5, 2))))
    ds1 = MetDataset.from_records(rows)
    ds2 = MetDataset.from_records(rows[::-1])
    spec = st.StructureSpec(st.BASELINE, 0)
    t = _theta(spec, st.BaselineParams(0.3), RESID)
    l1 = reml.likelihood_parts(_layout_for(ds1, spec, None), t).loglik_reml
    l2 = reml.likelihood_parts(_layout_for(ds2, spec, None), t).loglik_reml
    assert l1 == pytest.approx(l2, abs=1e-10)


def test_solution_matches_gls_on_balanced_grid():
    rng = np.random.default_rng(30)
    dataset = _random_dataset(rng, n_geno=2, n_loc=2, n_yr=2, weights=True)
    spec = st.StructureSpec(st.BASELINE, 0)
    layout = _layout_for(dataset, spec, None)
    theta = _theta(spec, st.BaselineParams(0.4), RESID)
    parts = reml.likelihood_parts(layout, theta)
    v = dense_v(dataset, np.array([[0.4]]), RESID)
    x = fixed_design(dataset)
    assert np.allclose(parts.beta, gls_dense(dataset.mean, x, v), atol=1e-9)
    # BLUPs against the direct formula G Z' V^{-1} (y - X beta)
    blups = reml._solve_effects(layout, theta, parts.beta)
    resid_marg = dataset.mean - x @ parts.beta
    vi_r = np.linalg.solve(v, resid_marg)
    for term, idx, k, s2 in [
        ("location", dataset.env_loc_idx[dataset.env_idx], 2, RESID["location"]),
        ("year", dataset.env_year_idx[dataset.env_idx], 2, RESID["year"]),
        ("location_year", dataset.env_idx, 4, RESID["location_year"]),
    ]:
        z = np.zeros((dataset.n_records, k))
        z[np.arange(dataset.n_records), idx] = 1.0
        assert np.allclose(blups[term], s2 * z.T @ vi_r, atol=1e-9), term
    # genotype main effect through the latent block
    zg = np.zeros((dataset.n_records, dataset.n_genotypes))
    zg[np.arange(dataset.n_records), dataset.geno_idx] = 1.0
    assert np.allclose(blups["latent"][:, 0], 0.4 * zg.T @ vi_r, atol=1e-9)


def test_unit_weights_match_default_weights():
    rng = np.random.default_rng(31)
    rows = [
        (f"g{i}", f"l{l}", 2000 + m, float(rng.normal()), 1.0)
        for i in range(3) for l in range(2) for m in range(2)
    ]
    ds = MetDataset.from_records(rows)
    spec = st.StructureSpec(st.BASELINE, 0)
    theta = _theta(spec, st.BaselineParams(0.5), RESID)
    base = reml.likelihood_parts(_layout_for(ds, spec, None), theta).loglik_reml
    assert np.isfinite(base)
    ds2 = MetDataset.from_records([(g, l, y, m, 1.0) for g, l, y, m, _ in rows])
    again = reml.likelihood_parts(_layout_for(ds2, spec, None), theta).loglik_reml
    assert base == pytest.approx(again, abs=1e-12)


def test_fit_one_way_anova_closed_form():
    # Groups = genotypes, replicates = years at a single location.
    rng = np.random.default_rng(32)
    I, n = 6, 5
    truth_u, truth_e = 0.8, 0.5
    u = rng.normal(0, np.sqrt(truth_u), I)
    rows = []
    table = np.zeros((I, n))
    for i in range(I):
        for r in range(n):
            val = 2.0 + u[i] + rng.normal(0, np.sqrt(truth_e))
            table[i, r] = val
            rows.append((f"g{i}", "L1", 2000 + r, float(val), 1e12))
    ds = MetDataset.from_records(rows)
    terms = reml.TermConfig(
        location=False, year=False, location_year=False,
        genotype_location=False, genotype_year=False, genotype_location_year=True,
    )
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    fitted = reml.fit(ds, None, model, terms=terms, tol=1e-12)
    assert fitted.converged

    gm = table.mean()
    msb = n * np.sum((table.mean(axis=1) - gm) ** 2) / (I - 1)
    mse = np.sum((table - table.mean(axis=1, keepdims=True)) ** 2) / (I * (n - 1))
    assert fitted.struct_params.sigma2_alpha == pytest.approx((msb - mse) / n, abs=1e-6)
    assert fitted.residual["genotype_location_year"] == pytest.approx(mse, abs=1e-6)


def test_fit_baseline_equals_anova_on_balanced_grid():
    truth = SimTruth(
        n_genotypes=8, n_locations=6, n_years=5,
        residual=RESID, coef_cov=np.array([[0.3]]), mu_alpha=1.5, weight=25.0, seed=0,
    )
    ds, _, _ = simulate(truth)
    comps = reml.anova_components(ds)
    assert min(comps.values()) > 0  # seed chosen so the oracle is interior
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    fitted = reml.fit(ds, None, model, tol=1e-12)
    assert fitted.converged
    for term in reml.RESIDUAL_TERMS:
        assert fitted.residual[term] == pytest.approx(comps[term], abs=2e-5), term
    assert fitted.struct_params.sigma2_alpha == pytest.approx(comps["genotype"], abs=2e-5)
    assert fitted.loglik_reml >= reml.reml_loglik(fitted.layout, fitted.theta) - 1e-9


def test_fit_rescaling_equivariance():
    truth = SimTruth(
        n_genotypes=5, n_locations=4, n_years=3,
        residual=RESID, coef_cov=np.array([[0.3]]), seed=5,
    )
    ds, _, _ = simulate(truth)
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    fit1 = reml.fit(ds, None, model, tol=1e-11)
    c = 2.0
    scaled_rows = [
        (ds.genotypes[g], ds.env_keys[e][0], ds.env_keys[e][1], c * m, w / c**2)
        for g, e, m, w in zip(ds.geno_idx, ds.env_idx, ds.mean, ds.weight)
    ]
    ds2 = MetDataset.from_records(scaled_rows)
    fit2 = reml.fit(ds2, None, model, tol=1e-11)
    for term in reml.RESIDUAL_TERMS:
        assert fit2.residual[term] == pytest.approx(c**2 * fit1.residual[term], rel=1e-4)
    assert fit2.struct_params.sigma2_alpha == pytest.approx(
        c**2 * fit1.struct_params.sigma2_alpha, rel=1e-4
    )
    # deterministic likelihood shift: n log c for the full likelihood
    n = ds.n_records
    assert fit2.loglik_full == pytest.approx(fit1.loglik_full - n * np.log(c), abs=1e-4)


def test_reduced_rank_latent_block_dimensions():
    rng = np.random.default_rng(40)
    truth = SimTruth(
        n_genotypes=4, n_locations=3, n_years=3,
        residual=RESID,
        coef_cov=np.diag([0.3, 0.1, 0.1]),
        mu_gamma=np.zeros(2),
        ec=EcTruth(
            mu=np.zeros(2),
            sigma_location=0.5 * np.eye(2),
            sigma_year=0.3 * np.eye(2),
            sigma_location_year=0.2 * np.eye(2),
        ),
        seed=3,
    )
    ds, hist, _ = simulate(truth)
    x = hist.table()[:, truth.extra_years:, :].reshape(-1, 2)  # env-ordered covariates
    model = reml.ModelSpec(st.StructureSpec(st.REDUCED_RANK, p=2, q=1))
    fitted = reml.fit(ds, x, model, max_iter=60)
    I = ds.n_genotypes
    # latent scores: one per genotype per factor; intercept deviations derived
    assert fitted.blups["latent"].shape == (I, 1)
    coefs = fitted.coef_matrix()
    intercept_dev = coefs[:, 0] - fitted.beta[0]
    assert intercept_dev.shape == (I,)  # scores + genotype intercepts: I*q + I


@pytest.mark.parametrize("mean_regression", [False, True])
@pytest.mark.parametrize(
    "kind,p,q",
    [(st.KINSHIP, 1, 0), (st.UNSTRUCTURED, 1, 0), (st.REDUCED_RANK, 1, 1)],
)
def test_c_inverse_matches_dense_oracle(kind, p, q, mean_regression):
    rng = np.random.default_rng(50 + p + q + mean_regression)
    dataset = _random_dataset(rng, n_geno=3, n_loc=2, n_yr=3, drop=2)
    x_work = rng.normal(size=(dataset.n_envs, p))
    spec = st.StructureSpec(kind, p=p, q=q)
    model = reml.ModelSpec(spec, mean_regression=mean_regression)
    fitted = reml.fit(dataset, x_work, model, max_iter=40)

    got = reml.c_inverse_blocks(fitted, force=True)
    svec, resid = reml.unpack_theta(fitted.layout, fitted.theta)
    sigma_coef = st.sigma_matrix(spec, fitted.layout.struct.params(svec))
    v = dense_v(dataset, sigma_coef, resid, x_work)
    x = fixed_design(dataset, x_work, mean_regression)
    want = coef_pev_dense(dataset, dataset.mean, x, v, sigma_coef, x_work, mean_regression)
    assert np.allclose(got, want, atol=1e-7)
    # symmetric with non-negative diagonal
    assert np.allclose(got, got.T, atol=1e-9)
    assert got.diagonal().min() > -1e-10


def test_c_inverse_duplicate_genotype_request():
    rng = np.random.default_rng(60)
    dataset = _random_dataset(rng, n_geno=3, n_loc=2, n_yr=2)
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    fitted = reml.fit(dataset, None, model)
    blocks = reml.c_inverse_blocks(fitted, genotypes=[1, 1], force=True)
    d1 = 1
    assert np.allclose(blocks[:d1, :d1], blocks[d1:, d1:])


def test_fit_warm_start_converges_fast():
    truth = SimTruth(
        n_genotypes=5, n_locations=4, n_years=4,
        residual=RESID, coef_cov=np.array([[0.2]]), seed=8,
    )
    ds, _, _ = simulate(truth)
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    first = reml.fit(ds, None, model)
    assert first.converged
    again = reml.fit(ds, None, model, start=first.theta)
    assert again.converged
    assert again.info.n_iter <= 2
    assert again.loglik_reml >= first.loglik_reml - 1e-8


def test_fit_improves_on_start_and_flags_boundary():
    resid = dict(RESID)
    resid["genotype_year"] = 0.0
    truth = SimTruth(
        n_genotypes=10, n_locations=6, n_years=6,
        residual=resid, coef_cov=np.array([[0.3]]), seed=4,
    )
    ds, _, _ = simulate(truth)
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    fitted = reml.fit(ds, None, model)
    start_theta = reml.pack_theta(*reml._default_start(fitted.layout), fitted.layout.terms)
    assert fitted.loglik_reml >= reml.reml_loglik(fitted.layout, start_theta) - 1e-9
    assert fitted.residual["genotype_year"] < 5e-3
    for term, value in fitted.residual.items():
        assert (value == 0.0) == (term in fitted.boundary)


def test_fit_aliased_fixed_effects_named():
    rng = np.random.default_rng(70)
    dataset = _random_dataset(rng, n_geno=3, n_loc=2, n_yr=2)
    n = dataset.n_records
    bad = np.column_stack([np.ones(n), np.ones(n)])
    with pytest.raises(FitError, match="aliased"):
        reml.build_layout(
            dataset, None, reml.SpecStructure(st.StructureSpec(st.BASELINE, 0)),
            reml.TermConfig(), fixed_rows=bad, fixed_names=("one", "copy_of_one"),
        )


def test_fit_mean_regression_needs_enough_environments():
    rng = np.random.default_rng(71)
    dataset = _random_dataset(rng, n_geno=3, n_loc=2, n_yr=2)  # 4 environments
    x_work = rng.normal(size=(dataset.n_envs, 4))
    model = reml.ModelSpec(st.StructureSpec(st.KINSHIP, p=4), mean_regression=True)
    with pytest.raises(FitError, match="environments"):
        reml.fit(dataset, x_work, model)


def test_aic_arithmetic():
    assert reml.aic_from_counts(-442.0, 48) == pytest.approx(980.0)
    assert reml.aic_from_counts(-369.0, 51) == pytest.approx(840.0)
    assert reml.aic_from_counts(0.0, 0) == pytest.approx(0.0)


def test_aic_uses_parameter_counts():
    rng = np.random.default_rng(80)
    dataset = _random_dataset(rng, n_geno=4, n_loc=3, n_yr=3)
    x_work = rng.normal(size=(dataset.n_envs, 2))
    model = reml.ModelSpec(st.StructureSpec(st.KINSHIP, p=2), mean_regression=True)
    fitted = reml.fit(dataset, x_work, model, max_iter=50)
    # kinship: 2 structure + 6 residual variances; fixed: intercept + 2 slopes
    assert fitted.n_params == {"VarP": 8, "FixedP": 3, "SP": 0}
    assert reml.aic(fitted) == pytest.approx(-2 * fitted.loglik_full + 2 * 11)


def test_fitted_values_reproduce_observations_modulo_shrinkage():
    truth = SimTruth(
        n_genotypes=4, n_locations=3, n_years=3,
        residual=RESID, coef_cov=np.array([[0.25]]), seed=12,
    )
    ds, _, _ = simulate(truth)
    model = reml.ModelSpec(st.StructureSpec(st.BASELINE, 0))
    fitted = reml.fit(ds, None, model)
    fv = fitted.fitted_values()
    assert fv.shape == (ds.n_records,)
    resid = ds.mean - fv
    # with unit weights shrinkage leaves a residual strictly smaller than raw spread
    assert np.std(resid) < np.std(ds.mean - ds.mean.mean())
