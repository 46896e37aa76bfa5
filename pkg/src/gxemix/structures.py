"""Genotype-level covariance structures and their parametrizations.

Each structure defines the joint covariance of a genotype's random intercept
and slopes (the coefficient vector of length d+1, where d is the number of
working covariates: observed covariates for most structures, synthetic ones
for the two-stage variants).  Internally every structure is expressed through

* a latent effect vector per genotype with covariance ``latent_cov``, and
* a linear map ``coef_transform`` from latent space to coefficient space,

so the induced environment covariance is always
``omega = (1 X) T latent_cov T' (1 X)'``.

The unconstrained parametrization (log variances, log-Cholesky for the
unstructured matrix, raw loadings with structural zeros skipped) makes the
optimizer's search space a plain Euclidean vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

BASELINE = "baseline"
KINSHIP = "kinship"
REDUCED_RANK = "reduced_rank"
UNSTRUCTURED = "unstructured"
SYNTHETIC_UNSTRUCTURED = "synthetic_unstructured"

_KINDS = (BASELINE, KINSHIP, REDUCED_RANK, UNSTRUCTURED, SYNTHETIC_UNSTRUCTURED)


@dataclass(frozen=True)
class StructureSpec:
    """Choice of covariance structure.

    ``p`` is the observed covariate count; ``q`` is the rank (reduced-rank)
    or the number of synthetic covariates (synthetic-unstructured).
    """

    kind: str
    p: int
    q: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown structure kind: {self.kind}")
        if self.p < 0:
            raise ValidationError("covariate count must be >= 0")
        if self.kind == BASELINE and self.p != 0:
            raise ValidationError("baseline structure has no covariates")
        if self.kind == REDUCED_RANK and not (1 <= self.q <= self.p + 1):
            raise ValidationError("reduced-rank requires 1 <= q <= p+1")
        if self.kind == SYNTHETIC_UNSTRUCTURED and not (1 <= self.q <= 2):
            raise ValidationError("synthetic-unstructured supports q in {1, 2}")

    @property
    def working_dim(self) -> int:
        """Number of slope columns in the genotype-level design."""
        if self.kind == BASELINE:
            return 0
        if self.kind == SYNTHETIC_UNSTRUCTURED:
            return self.q
        return self.p

    @property
    def coef_dim(self) -> int:
        return self.working_dim + 1

    @property
    def latent_dim(self) -> int:
        if self.kind == REDUCED_RANK:
            return self.q
        return self.coef_dim

    @property
    def n_free_params(self) -> int:
        if self.kind == BASELINE:
            return 1
        if self.kind == KINSHIP:
            return 2
        if self.kind == REDUCED_RANK:
            return loading_free_count(self.p + 1, self.q, intercept_row=True)
        d = self.coef_dim
        return d * (d + 1) // 2


def loading_free_count(rows: int, q: int, intercept_row: bool) -> int:
    """Free entries of a loading matrix with zeros above the slope diagonal.

    With an intercept row, the first row is fully free and the constraint
    (entry zero when factor index exceeds slope row index) applies to the
    remaining rows.
    """
    slope_rows = rows - 1 if intercept_row else rows
    zeros = sum(max(0, q - h) for h in range(1, slope_rows + 1))
    return rows * q - zeros


def _loading_mask(rows: int, q: int, intercept_row: bool) -> np.ndarray:
    """Boolean mask of free loading entries."""
    mask = np.ones((rows, q), dtype=bool)
    start = 1 if intercept_row else 0
    for r in range(start, rows):
        h = r - start + 1  # 1-based slope row
        mask[r, h:] = False
    return mask


# Parameter containers -------------------------------------------------------


@dataclass(frozen=True)
class BaselineParams:
    sigma2_alpha: float


@dataclass(frozen=True)
class KinshipParams:
    sigma2_alpha: float
    sigma2_gamma: float


@dataclass(frozen=True)
class ReducedRankParams:
    loadings: np.ndarray  # (p+1, q); row 0 = intercept loadings

    def __post_init__(self):
        object.__setattr__(self, "loadings", np.asarray(self.loadings, dtype=float))


@dataclass(frozen=True)
class UnstructuredParams:
    sigma: np.ndarray  # (d+1, d+1) symmetric PSD

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValidationError("unstructured covariance must be square")
        object.__setattr__(self, "sigma", s)


SigmaParams = BaselineParams | KinshipParams | ReducedRankParams | UnstructuredParams


def validate_params(spec: StructureSpec, params: SigmaParams) -> None:
    if spec.kind == BASELINE and not isinstance(params, BaselineParams):
        raise ValidationError("baseline structure expects BaselineParams")
    if spec.kind == KINSHIP and not isinstance(params, KinshipParams):
        raise ValidationError("kinship structure expects KinshipParams")
    if spec.kind == REDUCED_RANK:
        if not isinstance(params, ReducedRankParams):
            raise ValidationError("reduced-rank structure expects ReducedRankParams")
        if params.loadings.shape != (spec.p + 1, spec.q):
            raise ValidationError("loading matrix has wrong shape")
    if spec.kind in (UNSTRUCTURED, SYNTHETIC_UNSTRUCTURED):
        if not isinstance(params, UnstructuredParams):
            raise ValidationError("unstructured structure expects UnstructuredParams")
        if params.sigma.shape != (spec.coef_dim, spec.coef_dim):
            raise ValidationError("unstructured covariance has wrong shape")
    if isinstance(params, BaselineParams) and params.sigma2_alpha < 0:
        raise ValidationError("variance must be >= 0")
    if isinstance(params, KinshipParams) and (
        params.sigma2_alpha < 0 or params.sigma2_gamma < 0
    ):
        raise ValidationError("variances must be >= 0")


# Core construction ----------------------------------------------------------


def coef_transform(spec: StructureSpec, params: SigmaParams) -> np.ndarray:
    """Map from latent effect space to the (d+1) coefficient space."""
    validate_params(spec, params)
    if spec.kind == REDUCED_RANK:
        return params.loadings
    return np.eye(spec.coef_dim)


def latent_cov(spec: StructureSpec, params: SigmaParams) -> np.ndarray:
    """Covariance of the latent per-genotype effect vector."""
    validate_params(spec, params)
    if isinstance(params, BaselineParams):
        return np.array([[params.sigma2_alpha]])
    if isinstance(params, KinshipParams):
        d = np.full(spec.p + 1, params.sigma2_gamma)
        d[0] = params.sigma2_alpha
        return np.diag(d)
    if isinstance(params, ReducedRankParams):
        return np.eye(spec.q)
    return params.sigma.copy()


def sigma_matrix(spec: StructureSpec, params: SigmaParams) -> np.ndarray:
    """The induced coefficient covariance (d+1)x(d+1)."""
    t = coef_transform(spec, params)
    return t @ latent_cov(spec, params) @ t.T


def kinship_matrix(x: np.ndarray) -> np.ndarray:
    """Environment relationship matrix X X' from standardized covariates."""
    x = np.asarray(x, dtype=float)
    return x @ x.T


def build_omega(spec: StructureSpec, params: SigmaParams, x: np.ndarray) -> np.ndarray:
    """Environment-level covariance induced by the genotype coefficients.

    ``x`` holds the working covariates (observed or synthetic), one row per
    environment; pass a (J, 0) array for the baseline structure.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.working_dim:
        raise ValidationError(
            f"covariate matrix has {x.shape[1]} columns, structure expects {spec.working_dim}"
        )
    design = np.column_stack([np.ones(x.shape[0]), x])
    sig = sigma_matrix(spec, params)
    return design @ sig @ design.T


def scalar_form_cov(params: KinshipParams, x_j: np.ndarray, x_jp: np.ndarray) -> float:
    """Entry (j, j') of the kinship omega: sigma2_alpha + x_j'x_j' sigma2_gamma."""
    x_j = np.asarray(x_j, dtype=float)
    x_jp = np.asarray(x_jp, dtype=float)
    return float(params.sigma2_alpha + x_j @ x_jp * params.sigma2_gamma)


# Unconstrained parametrization ---------------------------------------------


def to_unconstrained(spec: StructureSpec, params: SigmaParams) -> np.ndarray:
    """Map params to a free Euclidean vector; errors on boundary values."""
    validate_params(spec, params)
    if isinstance(params, BaselineParams):
        if params.sigma2_alpha <= 0:
            raise ValidationError("cannot map a zero variance to the unconstrained scale")
        return np.array([np.log(params.sigma2_alpha)])
    if isinstance(params, KinshipParams):
        if params.sigma2_alpha <= 0 or params.sigma2_gamma <= 0:
            raise ValidationError("cannot map a zero variance to the unconstrained scale")
        return np.log([params.sigma2_alpha, params.sigma2_gamma])
    if isinstance(params, ReducedRankParams):
        mask = _loading_mask(spec.p + 1, spec.q, intercept_row=True)
        fixed = params.loadings[~mask]
        if fixed.size and np.max(np.abs(fixed)) > 1e-12:
            raise ValidationError("structural-zero loading entries must be zero")
        return params.loadings[mask].copy()
    # unstructured: log-Cholesky
    try:
        chol = np.linalg.cholesky(params.sigma)
    except np.linalg.LinAlgError:
        raise ValidationError("unstructured covariance is singular; not in the interior")
    d = chol.shape[0]
    out = []
    for r in range(d):
        out.extend(chol[r, :r])
        out.append(np.log(chol[r, r]))
    return np.array(out)


def from_unconstrained(spec: StructureSpec, vec: np.ndarray) -> SigmaParams:
    """Inverse of :func:`to_unconstrained`; defined for every real vector."""
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (spec.n_free_params,):
        raise ValidationError(
            f"parameter vector has length {vec.size}, expected {spec.n_free_params}"
        )
    if spec.kind == BASELINE:
        return BaselineParams(sigma2_alpha=float(np.exp(vec[0])))
    if spec.kind == KINSHIP:
        return KinshipParams(
            sigma2_alpha=float(np.exp(vec[0])), sigma2_gamma=float(np.exp(vec[1]))
        )
    if spec.kind == REDUCED_RANK:
        mask = _loading_mask(spec.p + 1, spec.q, intercept_row=True)
        lam = np.zeros((spec.p + 1, spec.q))
        lam[mask] = vec
        return ReducedRankParams(loadings=lam)
    d = spec.coef_dim
    chol = np.zeros((d, d))
    k = 0
    for r in range(d):
        chol[r, :r] = vec[k : k + r]
        k += r
        chol[r, r] = np.exp(vec[k])
        k += 1
    return UnstructuredParams(sigma=chol @ chol.T)


# Reporting ------------------------------------------------------------------


def params_to_items(spec: StructureSpec, params: SigmaParams) -> list[tuple[str, float]]:
    """Flat name=value items for fit reports and warm starts."""
    validate_params(spec, params)
    if isinstance(params, BaselineParams):
        return [("genotype_var", params.sigma2_alpha)]
    if isinstance(params, KinshipParams):
        return [
            ("genotype_var", params.sigma2_alpha),
            ("slope_var", params.sigma2_gamma),
        ]
    if isinstance(params, ReducedRankParams):
        return [
            (f"loading[{r},{c}]", float(params.loadings[r, c]))
            for r in range(params.loadings.shape[0])
            for c in range(params.loadings.shape[1])
        ]
    d = params.sigma.shape[0]
    return [
        (f"coef_cov[{r},{c}]", float(params.sigma[r, c]))
        for r in range(d)
        for c in range(r + 1)
    ]


def params_from_items(spec: StructureSpec, items: dict[str, float]) -> SigmaParams:
    if spec.kind == BASELINE:
        return BaselineParams(sigma2_alpha=items["genotype_var"])
    if spec.kind == KINSHIP:
        return KinshipParams(
            sigma2_alpha=items["genotype_var"], sigma2_gamma=items["slope_var"]
        )
    if spec.kind == REDUCED_RANK:
        lam = np.zeros((spec.p + 1, spec.q))
        for r in range(spec.p + 1):
            for c in range(spec.q):
                lam[r, c] = items.get(f"loading[{r},{c}]", 0.0)
        return ReducedRankParams(loadings=lam)
    d = spec.coef_dim
    sig = np.zeros((d, d))
    for r in range(d):
        for c in range(r + 1):
            sig[r, c] = sig[c, r] = items[f"coef_cov[{r},{c}]"]
    return UnstructuredParams(sigma=sig)
