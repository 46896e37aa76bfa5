"""Brute-force dense oracles, independent of the package's linear algebra.

Everything here builds the full n x n marginal covariance entry by entry from
the model definition (including the record-level interaction as an explicit
effect) and evaluates likelihoods, GLS solutions, BLUPs and prediction-error
covariances by direct dense inversion.  Intentionally slow and simple.
"""

import numpy as np


def dense_v(dataset, sigma_coef, components, x_work=None):
    """Marginal covariance of the records, built pairwise.

    sigma_coef: (d+1, d+1) coefficient covariance (may be None for none).
    components: dict with the six residual variances.
    x_work: (J, d) working covariates.
    """
    n = dataset.n_records
    g = dataset.geno_idx
    e = dataset.env_idx
    loc = dataset.env_loc_idx[e]
    yr = dataset.env_year_idx[e]
    if x_work is None:
        x_work = np.zeros((dataset.n_envs, 0))
    design = np.column_stack([np.ones(n), x_work[e]])

    v = np.zeros((n, n))
    same_g = g[:, None] == g[None, :]
    if sigma_coef is not None:
        v += same_g * (design @ sigma_coef @ design.T)
    v += components.get("location", 0.0) * (loc[:, None] == loc[None, :])
    v += components.get("year", 0.0) * (yr[:, None] == yr[None, :])
    v += components.get("location_year", 0.0) * (e[:, None] == e[None, :])
    v += components.get("genotype_location", 0.0) * (same_g & (loc[:, None] == loc[None, :]))
    v += components.get("genotype_year", 0.0) * (same_g & (yr[:, None] == yr[None, :]))
    diag = components.get("genotype_location_year", 0.0) + 1.0 / dataset.weight
    v += np.diag(diag)
    return v


def fixed_design(dataset, x_work=None, mean_regression=False):
    n = dataset.n_records
    cols = [np.ones(n)]
    if mean_regression:
        cols.extend(x_work[dataset.env_idx].T)
    return np.column_stack(cols)


def reml_loglik_dense(y, x, v):
    """Restricted log-likelihood with all constants, by direct inversion."""
    n = y.shape[0]
    p = x.shape[1] if x.ndim == 2 else 0
    vi = np.linalg.inv(v)
    _, logdet_v = np.linalg.slogdet(v)
    if p:
        xvx = x.T @ vi @ x
        _, logdet_xvx = np.linalg.slogdet(xvx)
        beta = np.linalg.solve(xvx, x.T @ vi @ y)
        r = y - x @ beta
    else:
        logdet_xvx = 0.0
        r = y
    ypy = float(r @ vi @ r)
    return -0.5 * ((n - p) * np.log(2 * np.pi) + logdet_v + logdet_xvx + ypy)


def full_loglik_dense(y, x, v):
    n = y.shape[0]
    vi = np.linalg.inv(v)
    _, logdet_v = np.linalg.slogdet(v)
    if x.shape[1]:
        xvx = x.T @ vi @ x
        beta = np.linalg.solve(xvx, x.T @ vi @ y)
        r = y - x @ beta
    else:
        r = y
    ypy = float(r @ vi @ r)
    return -0.5 * (n * np.log(2 * np.pi) + logdet_v + ypy)


def gls_dense(y, x, v):
    vi = np.linalg.inv(v)
    xvx = x.T @ vi @ x
    return np.linalg.solve(xvx, x.T @ vi @ y)


def blup_dense(y, x, v, z, g):
    """BLUP of effects u with design z and covariance g."""
    beta = gls_dense(y, x, v)
    return g @ z.T @ np.linalg.solve(v, y - x @ beta), beta


def coef_pev_dense(dataset, y, x, v, sigma_coef, x_work, mean_regression):
    """Prediction-error covariance of the genotype coefficient estimators.

    Computed from the marginal covariance only (no mixed-model equations):
    var(beta_hat), cov(beta_hat, u_hat - u) and var(u_hat - u) assembled for
    gamma_i = H beta + u_i.  Valid for singular sigma_coef as well.
    """
    n = dataset.n_records
    I = dataset.n_genotypes
    d1 = sigma_coef.shape[0]
    e = dataset.env_idx
    design = np.column_stack([np.ones(n), x_work[e]])

    # Stacked coefficient design: record r loads genotype g(r)'s (d+1) block.
    z = np.zeros((n, I * d1))
    for r in range(n):
        z[r, dataset.geno_idx[r] * d1 : (dataset.geno_idx[r] + 1) * d1] = design[r]
    g_big = np.kron(np.eye(I), sigma_coef)

    vi = np.linalg.inv(v)
    xvx_inv = np.linalg.inv(x.T @ vi @ x)
    p_mat = vi - vi @ x @ xvx_inv @ x.T @ vi

    h = np.zeros((I * d1, x.shape[1]))
    for i in range(I):
        h[i * d1, 0] = 1.0
        if mean_regression:
            for k in range(1, d1):
                h[i * d1 + k, k] = 1.0

    cov_beta_u = -xvx_inv @ x.T @ vi @ z @ g_big  # (p, I*d1)
    var_u = g_big - g_big @ z.T @ p_mat @ z @ g_big

    out = h @ xvx_inv @ h.T
    out += h @ cov_beta_u + (h @ cov_beta_u).T
    out += var_u
    return out
