import numpy as np
import pytest

from gxemix import structures as st
from gxemix.errors import ValidationError


def test_kinship_matrix_hand_example():
    x = np.array([[1.0], [-1.0]])
    assert np.allclose(st.kinship_matrix(x), [[1.0, -1.0], [-1.0, 1.0]])


def test_kinship_matrix_zero_and_psd():
    assert np.allclose(st.kinship_matrix(np.zeros((3, 2))), 0.0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(6, 3))
        vals = np.linalg.eigvalsh(st.kinship_matrix(x))
        assert vals.min() >= -1e-10


def test_build_omega_kinship_hand_example():
    spec = st.StructureSpec(st.KINSHIP, p=1)
    params = st.KinshipParams(sigma2_alpha=1.0, sigma2_gamma=1.0)
    x = np.array([[1.0], [-1.0]])
    omega = st.build_omega(spec, params, x)
    assert np.allclose(omega, [[2.0, 0.0], [0.0, 2.0]])


def test_build_omega_baseline_zero():
    spec = st.StructureSpec(st.BASELINE, p=0)
    omega = st.build_omega(spec, st.BaselineParams(0.0), np.zeros((4, 0)))
    assert np.allclose(omega, 0.0)


def test_reduced_rank_equals_unstructured_at_lambda():
    # Low-rank route and the plain coefficient-covariance route agree exactly.
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.integers(1, 4)
        q = rng.integers(1, p + 2)
        spec_rr = st.StructureSpec(st.REDUCED_RANK, p=int(p), q=int(q))
        lam = np.zeros((p + 1, q))
        mask = st._loading_mask(p + 1, q, intercept_row=True)
        lam[mask] = rng.normal(size=mask.sum())
        x = rng.normal(size=(5, p))
        omega_rr = st.build_omega(spec_rr, st.ReducedRankParams(lam), x)
        spec_us = st.StructureSpec(st.UNSTRUCTURED, p=int(p))
        omega_us = st.build_omega(spec_us, st.UnstructuredParams(lam @ lam.T), x)
        assert np.allclose(omega_rr, omega_us, atol=1e-10)


def test_reduced_rank_synthetic_covariate_identity():
    # Building omega from synthetic covariates Z = X Lam_gamma with the
    # bordered loading matrix reproduces the direct low-rank form.
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, q = 3, 2
        spec = st.StructureSpec(st.REDUCED_RANK, p=p, q=q)
        lam = np.zeros((p + 1, q))
        mask = st._loading_mask(p + 1, q, intercept_row=True)
        lam[mask] = rng.normal(size=mask.sum())
        x = rng.normal(size=(6, p))
        omega_direct = st.build_omega(spec, st.ReducedRankParams(lam), x)

        lam_alpha = lam[0]
        lam_gamma = lam[1:]
        z = x @ lam_gamma
        design = np.column_stack([np.ones(6), z])
        lam_tilde = np.vstack([lam_alpha, np.eye(q)])
        omega_synth = design @ lam_tilde @ lam_tilde.T @ design.T
        assert np.allclose(omega_direct, omega_synth, atol=1e-10)


def test_scalar_form_matches_omega_entrywise():
    rng = np.random.default_rng(3)
    params = st.KinshipParams(sigma2_alpha=0.7, sigma2_gamma=1.3)
    spec = st.StructureSpec(st.KINSHIP, p=4)
    x = rng.normal(size=(6, 4))
    omega = st.build_omega(spec, params, x)
    for j in range(6):
        for jp in range(6):
            assert st.scalar_form_cov(params, x[j], x[jp]) == pytest.approx(omega[j, jp])


def test_scalar_form_hand_values():
    params = st.KinshipParams(1.0, 1.0)
    assert st.scalar_form_cov(params, np.array([1.0]), np.array([1.0])) == pytest.approx(2.0)
    assert st.scalar_form_cov(params, np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(1.0)


def test_omega_symmetric_psd_all_structures():
    rng = np.random.default_rng(4)
    p = 3
    x = rng.normal(size=(7, p))
    cases = [
        (st.StructureSpec(st.BASELINE, 0), st.BaselineParams(0.8), np.zeros((7, 0))),
        (st.StructureSpec(st.KINSHIP, p), st.KinshipParams(0.5, 0.9), x),
        (st.StructureSpec(st.UNSTRUCTURED, p), None, x),
        (st.StructureSpec(st.REDUCED_RANK, p, 2), None, x),
    ]
    for spec, params, xmat in cases:
        if params is None:
            params = st.from_unconstrained(spec, rng.normal(size=spec.n_free_params))
        omega = st.build_omega(spec, params, xmat)
        assert np.allclose(omega, omega.T, atol=1e-12)
        vals = np.linalg.eigvalsh(omega)
        assert vals.min() >= -1e-8 * max(vals.max(), 1.0)


def test_reduced_rank_numerical_rank():
    spec = st.StructureSpec(st.REDUCED_RANK, p=4, q=2)
    rng = np.random.default_rng(5)
    params = st.from_unconstrained(spec, rng.normal(size=spec.n_free_params))
    sig = st.sigma_matrix(spec, params)
    svals = np.linalg.svd(sig, compute_uv=False)
    assert np.sum(svals > 1e-8 * svals[0]) <= 2


def test_unconstrained_roundtrip_variance():
    spec = st.StructureSpec(st.BASELINE, 0)
    vec = st.to_unconstrained(spec, st.BaselineParams(1.0))
    assert vec == pytest.approx(0.0)
    back = st.from_unconstrained(spec, vec)
    assert back.sigma2_alpha == pytest.approx(1.0)


def test_unconstrained_roundtrip_unstructured():
    rng = np.random.default_rng(6)
    spec = st.StructureSpec(st.UNSTRUCTURED, p=3)
    for _ in range(25):
        a = rng.normal(size=(4, 4))
        sigma = a @ a.T + 0.1 * np.eye(4)
        vec = st.to_unconstrained(spec, st.UnstructuredParams(sigma))
        back = st.from_unconstrained(spec, vec)
        assert np.allclose(back.sigma, sigma, atol=1e-12)


def test_unconstrained_vector_length_reduced_rank():
    spec = st.StructureSpec(st.REDUCED_RANK, p=2, q=2)
    assert spec.n_free_params == 5  # (p+1)*q minus one structural zero
    vec = rngvec = np.arange(5, dtype=float)
    params = st.from_unconstrained(spec, vec)
    assert params.loadings[1, 1] == 0.0  # structural zero stays pinned
    assert np.allclose(st.to_unconstrained(spec, params), vec)


def test_to_unconstrained_boundary_errors():
    with pytest.raises(ValidationError):
        st.to_unconstrained(st.StructureSpec(st.BASELINE, 0), st.BaselineParams(0.0))
    spec = st.StructureSpec(st.UNSTRUCTURED, p=1)
    singular = st.UnstructuredParams(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(ValidationError):
        st.to_unconstrained(spec, singular)


def test_spec_invariants():
    with pytest.raises(ValidationError):
        st.StructureSpec(st.REDUCED_RANK, p=2, q=4)
    with pytest.raises(ValidationError):
        st.StructureSpec(st.SYNTHETIC_UNSTRUCTURED, p=10, q=3)
    with pytest.raises(ValidationError):
        st.StructureSpec("mystery", p=1)


def test_params_items_roundtrip():
    rng = np.random.default_rng(8)
    specs = [
        (st.StructureSpec(st.BASELINE, 0), st.BaselineParams(0.4)),
        (st.StructureSpec(st.KINSHIP, 2), st.KinshipParams(0.4, 0.2)),
    ]
    spec_rr = st.StructureSpec(st.REDUCED_RANK, p=2, q=2)
    specs.append((spec_rr, st.from_unconstrained(spec_rr, rng.normal(size=5))))
    spec_us = st.StructureSpec(st.UNSTRUCTURED, p=1)
    specs.append((spec_us, st.from_unconstrained(spec_us, rng.normal(size=3))))
    for spec, params in specs:
        items = dict(st.params_to_items(spec, params))
        back = st.params_from_items(spec, items)
        assert np.allclose(st.sigma_matrix(spec, back), st.sigma_matrix(spec, params), atol=1e-12)
