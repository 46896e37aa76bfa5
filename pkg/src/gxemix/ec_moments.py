"""Two-way location x year moments for environmental covariates.

Fits the multivariate random two-way model to a complete covariate history by
method of moments (closed form on balanced tables), and produces the
prediction inputs for the four targets: the expected covariate vector, its
conditional spread for a future year, and the sampling variance of the
estimate itself.  Vectors carry a leading intercept slot that is always 1 and
contributes no variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import CovariateHistory
from .errors import ValidationError


@dataclass(frozen=True)
class PredictionCase:
    """Target of prediction: 1 = long-term mean of the whole target region,
    2 = new year at the region mean, 3 = long-term mean at a chosen location,
    4 = new year at a chosen location."""

    case: int
    target_location: str | None = None

    def __post_init__(self):
        if self.case not in (1, 2, 3, 4):
            raise ValidationError("case must be 1..4")
        if self.case in (3, 4) and not self.target_location:
            raise ValidationError(f"case {self.case} needs a target location")


@dataclass(frozen=True)
class EcMoments:
    """Fitted moments of the covariate process, on the standardized scale."""

    names: tuple[str, ...]
    locations: tuple[str, ...]
    mu: np.ndarray  # (p+1,), leading 1
    loc_effects: np.ndarray  # (L, p+1), zero intercept slot, shrunken
    loc_effects_raw: np.ndarray  # (L, p+1) unshrunken location deviations
    sigma_location: np.ndarray  # (p+1, p+1)
    sigma_year: np.ndarray
    sigma_location_year: np.ndarray
    n_locations: int
    n_years: int
    years_per_location: dict[str, int]
    shrunken: bool

    @property
    def p(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class TargetMoments:
    """Everything the prediction formulas need about the covariate side."""

    xi: np.ndarray  # (p+1,), leading 1
    sigma_x: np.ndarray  # (p+1, p+1) conditional spread of the target
    var_xi: np.ndarray  # (p+1, p+1) sampling variance of xi-hat


def _psd_project(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def _embed(block: np.ndarray) -> np.ndarray:
    """Put a p x p covariate block into the (p+1) frame with a zero intercept."""
    p = block.shape[0]
    out = np.zeros((p + 1, p + 1))
    out[1:, 1:] = block
    return out


def fit_two_way(
    history: CovariateHistory,
    year_constant: tuple[bool, ...] | None = None,
    shrink: bool = True,
) -> EcMoments:
    """Method-of-moments fit of the two-way model to a complete history.

    ``history`` should already be on the standardized (training) scale.
    Year-constant covariates get exactly zero rows in the year and
    interaction blocks.
    """
    table = history.table()  # (L, M, p); raises when incomplete
    L, M, p = table.shape
    if L < 2 or M < 2:
        raise ValidationError("two-way moments need at least 2 locations and 2 years")

    loc_mean = table.mean(axis=1)  # (L, p)
    yr_mean = table.mean(axis=0)  # (M, p)
    grand = table.mean(axis=(0, 1))  # (p,)

    inter = table - loc_mean[:, None, :] - yr_mean[None, :, :] + grand
    mcp_ly = np.einsum("lmi,lmj->ij", inter, inter) / ((L - 1) * (M - 1))
    dl = loc_mean - grand
    mcp_l = M * np.einsum("li,lj->ij", dl, dl) / (L - 1)
    dm = yr_mean - grand
    mcp_y = L * np.einsum("mi,mj->ij", dm, dm) / (M - 1)

    sig_ly = _psd_project(mcp_ly)
    sig_y = _psd_project((mcp_y - mcp_ly) / L)
    sig_l = _psd_project((mcp_l - mcp_ly) / M)

    if year_constant is None:
        # a covariate with no within-location year variation is year-constant
        within = table.var(axis=1).max(axis=0)
        year_constant = tuple(bool(v < 1e-20) for v in within)
    const = np.array(year_constant, dtype=bool)
    if const.any():
        sig_y[const, :] = 0.0
        sig_y[:, const] = 0.0
        sig_ly[const, :] = 0.0
        sig_ly[:, const] = 0.0

    # Shrinkage of location deviations against their sampling noise.
    sig_d = (sig_y + sig_ly) / M
    if shrink:
        shrinker = sig_l @ np.linalg.pinv(sig_l + sig_d)
        effects = dl @ shrinker.T
    else:
        effects = dl.copy()

    mu = np.concatenate([[1.0], grand])
    loc_eff = np.column_stack([np.zeros(L), effects])
    loc_raw = np.column_stack([np.zeros(L), dl])

    return EcMoments(
        names=history.names,
        locations=history.locations,
        mu=mu,
        loc_effects=loc_eff,
        loc_effects_raw=loc_raw,
        sigma_location=_embed(sig_l),
        sigma_year=_embed(sig_y),
        sigma_location_year=_embed(sig_ly),
        n_locations=L,
        n_years=M,
        years_per_location={loc: M for loc in history.locations},
        shrunken=shrink,
    )


def _grand_mean_variance(m: EcMoments) -> np.ndarray:
    return (
        m.sigma_location / m.n_locations
        + m.sigma_year / m.n_years
        + m.sigma_location_year / (m.n_locations * m.n_years)
    )


def target_moments(moments: EcMoments, case: PredictionCase) -> TargetMoments:
    """Expected covariates, conditional spread, and estimation variance for a
    prediction target."""
    p1 = moments.mu.shape[0]
    zero = np.zeros((p1, p1))
    var_mu = _grand_mean_variance(moments)

    if case.case in (1, 2):
        xi = moments.mu.copy()
        var_xi = var_mu
    else:
        loc = case.target_location
        if loc not in moments.locations:
            raise ValidationError(f"unknown target location: {loc}")
        l_idx = moments.locations.index(loc)
        xi = moments.mu + moments.loc_effects[l_idx]
        m_loc = moments.years_per_location[loc]
        sig_d = (moments.sigma_year + moments.sigma_location_year) / m_loc
        if moments.shrunken:
            sig_l = moments.sigma_location
            pev = sig_l @ np.linalg.pinv(sig_l + sig_d) @ sig_d
            pev = 0.5 * (pev + pev.T)
        else:
            pev = sig_d
        var_xi = var_mu + pev

    if case.case == 1 or case.case == 3:
        sigma_x = zero
    elif case.case == 2:
        sigma_x = moments.sigma_year.copy()
    else:
        sigma_x = moments.sigma_year + moments.sigma_location_year

    return TargetMoments(xi=xi, sigma_x=sigma_x, var_xi=var_xi)


def simple_location_mean(history: CovariateHistory, location: str) -> np.ndarray:
    """Per-location mean of each covariate over its history years, with the
    intercept slot prepended.  The history must already be standardized."""
    if location not in history.locations:
        raise ValidationError(f"no history for location: {location}")
    l_idx = history.locations.index(location)
    rows = history.values[history.loc_idx == l_idx]
    if rows.shape[0] == 0:
        raise ValidationError(f"no history rows for location: {location}")
    return np.concatenate([[1.0], rows.mean(axis=0)])


def project_moments(tm: TargetMoments, slope_transform: np.ndarray) -> TargetMoments:
    """Map target moments through a linear covariate transform (p -> q).

    Used to express observed-covariate moments on the synthetic-covariate
    scale: the intercept slot passes through unchanged.
    """
    q, p = slope_transform.shape[1], slope_transform.shape[0]
    if tm.xi.shape[0] != p + 1:
        raise ValidationError("transform does not match the covariate dimension")
    t = np.zeros((q + 1, p + 1))
    t[0, 0] = 1.0
    t[1:, 1:] = slope_transform.T
    return TargetMoments(
        xi=t @ tm.xi,
        sigma_x=t @ tm.sigma_x @ t.T,
        var_xi=t @ tm.var_xi @ t.T,
    )
