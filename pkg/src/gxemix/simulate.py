"""Synthetic MET datasets and covariate histories from known parameters.

Every random effect family draws from its own counter-based Philox stream
(split off one seed), so output is reproducible regardless of evaluation
order and replicates can run in parallel without sharing state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import CovariateHistory, MetDataset
from .errors import ValidationError

_FAMILIES = (
    "covariates",
    "coefficients",
    "location",
    "year",
    "location_year",
    "genotype_location",
    "genotype_year",
    "interaction",
    "measurement",
)

RESIDUAL_KEYS = (
    "location",
    "year",
    "location_year",
    "genotype_location",
    "genotype_year",
    "genotype_location_year",
)


@dataclass(frozen=True)
class EcTruth:
    """Two-way generative model for the p raw covariates."""

    mu: np.ndarray
    sigma_location: np.ndarray
    sigma_year: np.ndarray
    sigma_location_year: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.mu).shape[0]
        for name in ("sigma_location", "sigma_year", "sigma_location_year"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (p, p):
                raise ValidationError(f"{name} must be {p}x{p}")
            object.__setattr__(self, name, m)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))


@dataclass(frozen=True)
class SimTruth:
    """Complete generative description of a balanced MET."""

    n_genotypes: int
    n_locations: int
    n_years: int
    residual: dict[str, float]
    coef_cov: np.ndarray = field(default_factory=lambda: np.array([[0.25]]))
    mu_alpha: float = 0.0
    mu_gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ec: EcTruth | None = None
    extra_years: int = 0
    weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coef_cov", np.asarray(self.coef_cov, dtype=float))
        object.__setattr__(self, "mu_gamma", np.asarray(self.mu_gamma, dtype=float))
        p = self.mu_gamma.shape[0]
        if self.coef_cov.shape != (p + 1, p + 1):
            raise ValidationError("coef_cov must be (p+1) square")
        if min(np.linalg.eigvalsh(_sym(self.coef_cov))) < -1e-8:
            raise ValidationError("coef_cov must be PSD")
        missing = [k for k in RESIDUAL_KEYS if k not in self.residual]
        if missing:
            raise ValidationError("residual truth missing: " + ", ".join(missing))
        if any(v < 0 for v in self.residual.values()):
            raise ValidationError("residual variances must be >= 0")
        if self.p > 0 and self.ec is None:
            raise ValidationError("covariate truth (ec) required when p > 0")
        if not (self.weight > 0):
            raise ValidationError("weight must be > 0")

    @property
    def p(self) -> int:
        return self.mu_gamma.shape[0]


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_FAMILIES))
    return {name: np.random.Generator(np.random.Philox(c)) for name, c in zip(_FAMILIES, children)}


def _mvn(rng: np.random.Generator, cov: np.ndarray, size: int) -> np.ndarray:
    """Draws from N(0, cov) for any PSD cov (eigenvalue square root)."""
    vals, vecs = np.linalg.eigh(_sym(cov))
    vals = np.clip(vals, 0.0, None)
    z = rng.standard_normal((size, cov.shape[0]))
    return z * np.sqrt(vals) @ vecs.T


def simulate(truth: SimTruth) -> tuple[MetDataset, CovariateHistory | None, dict]:
    """Generate a balanced grid of means (unit-variance scale 1/weight) plus
    the covariate history and all latent effects."""
    I, L, M, p = truth.n_genotypes, truth.n_locations, truth.n_years, truth.p
    if min(I, L) < 1 or M < 2:
        raise ValidationError("need at least 1 genotype/location and 2 years")
    rngs = _rngs(truth.seed)

    genotypes = [f"G{i + 1:03d}" for i in range(I)]
    locations = [f"L{l + 1:02d}" for l in range(L)]
    first = 2001
    hist_years = list(range(first, first + truth.extra_years + M))
    trial_years = hist_years[truth.extra_years :]

    history = None
    x_trial = np.zeros((L, M, p))
    latents: dict[str, np.ndarray] = {}
    if p > 0:
        ec = truth.ec
        mh = len(hist_years)
        rng = rngs["covariates"]
        loc_fx = _mvn(rng, ec.sigma_location, L)
        yr_fx = _mvn(rng, ec.sigma_year, mh)
        ly_fx = _mvn(rng, ec.sigma_location_year, L * mh).reshape(L, mh, p)
        x_hist = ec.mu[None, None, :] + loc_fx[:, None, :] + yr_fx[None, :, :] + ly_fx
        rows = []
        li, yi, vals = [], [], []
        for l in range(L):
            for m in range(mh):
                li.append(l)
                yi.append(m)
                vals.append(x_hist[l, m])
        history = CovariateHistory(
            locations=tuple(locations),
            years=tuple(hist_years),
            names=tuple(f"ec{k + 1}" for k in range(p)),
            loc_idx=np.array(li),
            year_idx=np.array(yi),
            values=np.array(vals),
        )
        x_trial = x_hist[:, truth.extra_years :, :]
        latents["ec_location"] = loc_fx
        latents["ec_year"] = yr_fx[truth.extra_years :]
        latents["ec_year_full"] = yr_fx

    coefs = _mvn(rngs["coefficients"], truth.coef_cov, I)  # rows: (a_i, c_i)
    loc_eff = rngs["location"].standard_normal(L) * np.sqrt(truth.residual["location"])
    yr_eff = rngs["year"].standard_normal(M) * np.sqrt(truth.residual["year"])
    ly_eff = rngs["location_year"].standard_normal((L, M)) * np.sqrt(
        truth.residual["location_year"]
    )
    gl_eff = rngs["genotype_location"].standard_normal((I, L)) * np.sqrt(
        truth.residual["genotype_location"]
    )
    gy_eff = rngs["genotype_year"].standard_normal((I, M)) * np.sqrt(
        truth.residual["genotype_year"]
    )
    gly_eff = rngs["interaction"].standard_normal((I, L, M)) * np.sqrt(
        truth.residual["genotype_location_year"]
    )
    meas = rngs["measurement"].standard_normal((I, L, M)) * np.sqrt(1.0 / truth.weight)

    rows = []
    for i in range(I):
        for l in range(L):
            for m in range(M):
                x = x_trial[l, m]
                mean = (
                    truth.mu_alpha
                    + float(truth.mu_gamma @ x)
                    + coefs[i, 0]
                    + float(coefs[i, 1:] @ x)
                    + loc_eff[l]
                    + yr_eff[m]
                    + ly_eff[l, m]
                    + gl_eff[i, l]
                    + gy_eff[i, m]
                    + gly_eff[i, l, m]
                    + meas[i, l, m]
                )
                rows.append((genotypes[i], locations[l], trial_years[m], mean, truth.weight))
    dataset = MetDataset.from_records(rows)

    latents.update(
        coefficients=coefs,
        location=loc_eff,
        year=yr_eff,
        location_year=ly_eff,
        genotype_location=gl_eff,
        genotype_year=gy_eff,
        interaction=gly_eff,
        measurement=meas,
    )
    return dataset, history, latents


def mc_variance_of_product(
    gamma: np.ndarray,
    var_gamma: np.ndarray,
    xi: np.ndarray,
    var_xi: np.ndarray,
    n_draws: int = 1_000_000,
    seed: int = 0,
    n_batches: int = 20,
) -> tuple[float, float]:
    """Empirical variance of the product of two independent normal vectors.

    Returns (variance estimate, Monte Carlo standard error via batching).
    Scalars may be passed for the one-dimensional case.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    var_gamma = np.atleast_2d(np.asarray(var_gamma, dtype=float))
    var_xi = np.atleast_2d(np.asarray(var_xi, dtype=float))
    d = gamma.shape[0]
    if xi.shape[0] != d or var_gamma.shape != (d, d) or var_xi.shape != (d, d):
        raise ValidationError("dimension mismatch in Monte Carlo inputs")
    if n_draws < n_batches * 10:
        raise ValidationError("too few draws for batching")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    per = n_draws // n_batches
    batch_vars = np.empty(n_batches)
    for b in range(n_batches):
        g = gamma + _mvn(rng, var_gamma, per)
        x = xi + _mvn(rng, var_xi, per)
        prod = np.sum(g * x, axis=1)
        batch_vars[b] = np.var(prod, ddof=1)
    est = float(np.mean(batch_vars))
    se = float(np.std(batch_vars, ddof=1) / np.sqrt(n_batches))
    return est, se
