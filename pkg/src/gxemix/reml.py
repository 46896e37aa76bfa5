"""REML engine for weighted genotype x location x year mixed models.

The observed means are modelled as

    y = X beta + (genotype coefficient terms) + L + Y + LY + aL + aY + aLY + e

where e has known diagonal covariance diag(1/weight) (the unit residual
variance is fixed at 1 so stage-1 weights act as intended) and aLY, having one
level per record, is absorbed into the residual diagonal.  All remaining terms
are optional so the same engine drives the main models, the stage-A loading
extraction and degenerate test layouts.

Likelihood evaluations never materialize the full marginal covariance.
Records are grouped by genotype; genotypes sharing an identical environment
sequence and weights share every design-dependent quantity, which makes
balanced grids (simulations, cross-validation folds) cheap.  The coefficient
matrix of the mixed-model equations is assembled densely only once per fit,
for effect estimates and prediction-error variances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
import scipy.sparse as sparse

from . import structures as st
from .data_model import MetDataset
from .errors import FitError, ValidationError

RESIDUAL_TERMS = (
    "location",
    "year",
    "location_year",
    "genotype_location",
    "genotype_year",
    "genotype_location_year",
)

BOUNDARY_EPS = 1e-8
_LOG_BOUND = 30.0
_BAD_OBJECTIVE = 1e12


@dataclass(frozen=True)
class ModelSpec:
    """Covariance-structure choice plus the optional fixed mean regression."""

    structure: st.StructureSpec
    mean_regression: bool = False


@dataclass(frozen=True)
class TermConfig:
    """Which random terms are present (the full model keeps all of them)."""

    location: bool = True
    year: bool = True
    location_year: bool = True
    genotype_location: bool = True
    genotype_year: bool = True
    genotype_location_year: bool = True

    def active(self) -> tuple[str, ...]:
        return tuple(t for t in RESIDUAL_TERMS if getattr(self, t))


# ---------------------------------------------------------------------------
# Genotype-level structure adapters
# ---------------------------------------------------------------------------


class SpecStructure:
    """Adapter exposing a :class:`StructureSpec` to the engine."""

    def __init__(self, spec: st.StructureSpec):
        self.spec = spec
        self.n_free = spec.n_free_params
        self.latent_dim = spec.latent_dim
        self.base_dim = spec.coef_dim  # leading 1 plus working covariates

    def params(self, vec: np.ndarray) -> st.SigmaParams:
        return st.from_unconstrained(self.spec, vec)

    def transform(self, vec: np.ndarray) -> np.ndarray:
        return st.coef_transform(self.spec, self.params(vec))

    def latent_cov(self, vec: np.ndarray) -> np.ndarray:
        return st.latent_cov(self.spec, self.params(vec))

    def log_scale_mask(self) -> np.ndarray:
        """Entries of the free vector living on a log scale (for bounds)."""
        spec = self.spec
        if spec.kind in (st.BASELINE, st.KINSHIP):
            return np.ones(self.n_free, dtype=bool)
        if spec.kind == st.REDUCED_RANK:
            return np.zeros(self.n_free, dtype=bool)
        d = spec.coef_dim
        mask = np.zeros(self.n_free, dtype=bool)
        k = 0
        for r in range(d):
            k += r
            mask[k] = True  # log of the Cholesky diagonal
            k += 1
        return mask


class LoadingsOnly:
    """Rank-q loadings over the slope block only (stage-A extraction)."""

    def __init__(self, p: int, q: int):
        self.p, self.q = p, q
        self.n_free = st.loading_free_count(p, q, intercept_row=False)
        self.latent_dim = q
        self.base_dim = p

    def loadings(self, vec: np.ndarray) -> np.ndarray:
        mask = st._loading_mask(self.p, self.q, intercept_row=False)
        lam = np.zeros((self.p, self.q))
        lam[mask] = vec
        return lam

    def params(self, vec: np.ndarray) -> np.ndarray:
        return self.loadings(vec)

    def transform(self, vec: np.ndarray) -> np.ndarray:
        return self.loadings(vec)

    def latent_cov(self, vec: np.ndarray) -> np.ndarray:
        return np.eye(self.q)

    def log_scale_mask(self) -> np.ndarray:
        return np.zeros(self.n_free, dtype=bool)


# ---------------------------------------------------------------------------
# Layout: preprocessed data plus per-group design caches
# ---------------------------------------------------------------------------


@dataclass
class _Group:
    members: np.ndarray  # genotype indices sharing the design
    env_rows: np.ndarray  # (m,) global environment indices
    li: np.ndarray
    yi: np.ndarray
    base_r: np.ndarray  # (m,) 1/weight
    base: np.ndarray  # (m, b) structure base design
    xf: np.ndarray  # (m, p_f)
    ymat: np.ndarray  # (m, len(members))


@dataclass
class Layout:
    dataset: MetDataset
    struct: SpecStructure | LoadingsOnly
    terms: TermConfig
    x_work: np.ndarray  # (J, d) working covariates
    struct_base: np.ndarray  # (J, b) per-environment structure base rows
    xf_env: Optional[np.ndarray]  # (J, p_f) when fixed design is env-indexed
    fixed_names: tuple[str, ...]
    order: np.ndarray  # record permutation (sorted by genotype, env)
    y: np.ndarray
    base_r: np.ndarray
    geno_idx: np.ndarray
    env_idx: np.ndarray
    xf_rows: np.ndarray  # (n, p_f) fixed design rows (in sorted order)
    groups: list[_Group]
    geno_slices: list[slice]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_fixed(self) -> int:
        return self.xf_rows.shape[1]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        ds = self.dataset
        return ds.n_genotypes, len(ds.locations), len(ds.years), ds.n_envs


def build_layout(
    dataset: MetDataset,
    x_work: Optional[np.ndarray],
    struct: SpecStructure | LoadingsOnly,
    terms: TermConfig,
    mean_regression: bool = False,
    fixed_rows: Optional[np.ndarray] = None,
    fixed_names: Optional[tuple[str, ...]] = None,
    struct_includes_intercept: bool = True,
) -> Layout:
    """Sort records, build design rows, and group genotypes by shared design."""
    J = dataset.n_envs
    if x_work is None:
        x_work = np.zeros((J, 0))
    x_work = np.asarray(x_work, dtype=float)
    if x_work.shape[0] != J:
        raise ValidationError("working covariates must have one row per environment")

    if struct_includes_intercept:
        struct_base = np.column_stack([np.ones(J), x_work])
    else:
        struct_base = x_work
    if struct_base.shape[1] != struct.base_dim:
        raise ValidationError(
            f"structure expects base dimension {struct.base_dim}, got {struct_base.shape[1]}"
        )

    order = np.lexsort((dataset.env_idx, dataset.geno_idx))
    y = dataset.mean[order]
    base_r = 1.0 / dataset.weight[order]
    geno_idx = dataset.geno_idx[order]
    env_idx = dataset.env_idx[order]

    xf_env = None
    if fixed_rows is None:
        cols = [np.ones(J)]
        names = ["intercept"]
        if mean_regression:
            cols.extend(x_work.T)
            names.extend(f"mean_slope[{k}]" for k in range(x_work.shape[1]))
        xf_env = np.column_stack(cols)
        xf_rows = xf_env[env_idx]
        fixed_names = tuple(names)
    else:
        fixed_rows = np.asarray(fixed_rows, dtype=float)
        if fixed_rows.shape[0] != dataset.n_records:
            raise ValidationError("custom fixed design must have one row per record")
        xf_rows = fixed_rows[order]
        fixed_names = fixed_names or tuple(
            f"fixed[{k}]" for k in range(fixed_rows.shape[1])
        )

    _check_fixed_rank(xf_rows, fixed_names)

    # genotype slices in the sorted order
    I = dataset.n_genotypes
    slices: list[slice] = []
    starts = np.searchsorted(geno_idx, np.arange(I))
    ends = np.searchsorted(geno_idx, np.arange(I), side="right")
    for i in range(I):
        if starts[i] == ends[i]:
            raise ValidationError(f"genotype {dataset.genotypes[i]} has no records")
        slices.append(slice(int(starts[i]), int(ends[i])))

    env_loc = dataset.env_loc_idx
    env_year = dataset.env_year_idx

    by_key: dict[bytes, list[int]] = {}
    for i, sl in enumerate(slices):
        key = env_idx[sl].tobytes() + base_r[sl].tobytes()
        by_key.setdefault(key, []).append(i)

    groups = []
    for key, members in by_key.items():
        sl = slices[members[0]]
        rows = env_idx[sl]
        ymat = np.column_stack([y[slices[i]] for i in members])
        groups.append(
            _Group(
                members=np.array(members, dtype=np.intp),
                env_rows=rows,
                li=env_loc[rows],
                yi=env_year[rows],
                base_r=base_r[sl].copy(),
                base=struct_base[rows],
                xf=xf_rows[sl].copy(),
                ymat=ymat,
            )
        )

    return Layout(
        dataset=dataset,
        struct=struct,
        terms=terms,
        x_work=x_work,
        struct_base=struct_base,
        xf_env=xf_env,
        fixed_names=fixed_names,
        order=order,
        y=y,
        base_r=base_r,
        geno_idx=geno_idx,
        env_idx=env_idx,
        xf_rows=xf_rows,
        groups=groups,
        geno_slices=slices,
    )


def _check_fixed_rank(xf: np.ndarray, names: tuple[str, ...]) -> None:
    if xf.shape[1] == 0:
        return
    # Pivoted QR flags the aliased columns by name.
    from scipy.linalg import qr

    _, r, piv = qr(xf, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(xf.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    bad = [names[piv[k]] for k in range(len(diag)) if diag[k] <= tol]
    if bad:
        raise FitError("aliased fixed effects: " + ", ".join(bad))


# ---------------------------------------------------------------------------
# Block-product helpers
# ---------------------------------------------------------------------------
# A design side is a list of blocks, each either ("dense", matrix) with the
# matrix already row-indexed to the group's records, or ("ind", idx, K) for a
# one-hot indicator with K levels.  Products are always taken through the
# diagonal weight vector a.


def _blocks_width(blocks) -> int:
    total = 0
    for b in blocks:
        total += b[1].shape[1] if b[0] == "dense" else b[2]
    return total


def _pair_product(a, left, right, same_obj) -> np.ndarray:
    kind_l = left[0]
    kind_r = right[0]
    if kind_l == "dense" and kind_r == "dense":
        return left[1].T @ (a[:, None] * right[1])
    if kind_l == "dense" and kind_r == "ind":
        _, idx, K = right
        out = np.zeros((K, left[1].shape[1]))
        np.add.at(out, idx, a[:, None] * left[1])
        return out.T
    if kind_l == "ind" and kind_r == "dense":
        return _pair_product(a, right, left, same_obj).T
    _, idx_l, K_l = left
    _, idx_r, K_r = right
    if same_obj:
        return np.diag(np.bincount(idx_l, weights=a, minlength=K_l))
    flat = np.bincount(idx_l * K_r + idx_r, weights=a, minlength=K_l * K_r)
    return flat.reshape(K_l, K_r)


def _block_product(a, left_blocks, right_blocks) -> np.ndarray:
    rows = _blocks_width(left_blocks)
    cols = _blocks_width(right_blocks)
    out = np.zeros((rows, cols))
    r0 = 0
    for lb in left_blocks:
        r1 = r0 + (lb[1].shape[1] if lb[0] == "dense" else lb[2])
        c0 = 0
        for rb in right_blocks:
            c1 = c0 + (rb[1].shape[1] if rb[0] == "dense" else rb[2])
            out[r0:r1, c0:c1] = _pair_product(a, lb, rb, lb is rb)
            c0 = c1
        r0 = r1
    return out


# ---------------------------------------------------------------------------
# Parameter packing
# ---------------------------------------------------------------------------


def pack_theta(struct_vec: np.ndarray, resid: dict[str, float], terms: TermConfig) -> np.ndarray:
    logs = [math.log(max(resid[t], 1e-12)) for t in terms.active()]
    return np.concatenate([np.asarray(struct_vec, dtype=float), logs])


def unpack_theta(layout: Layout, theta: np.ndarray) -> tuple[np.ndarray, dict[str, float]]:
    ns = layout.struct.n_free
    svec = theta[:ns]
    resid = {t: float(np.exp(v)) for t, v in zip(layout.terms.active(), theta[ns:])}
    return svec, resid


def n_theta(layout: Layout) -> int:
    return layout.struct.n_free + len(layout.terms.active())


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


@dataclass
class _LikParts:
    loglik_reml: float
    loglik_full: float
    beta: np.ndarray
    logdet_v: float
    logdet_xvx: float
    ypy: float


def _chol_logdet(mat: np.ndarray):
    c = cho_factor(mat, lower=True, check_finite=False)
    return c, 2.0 * float(np.sum(np.log(np.diag(c[0]))))


def likelihood_parts(layout: Layout, theta: np.ndarray) -> _LikParts:
    """REML and full log-likelihoods at the unconstrained parameter vector."""
    svec, resid = unpack_theta(layout, theta)
    terms = layout.terms
    I, L, M, J = layout.dims
    pf = layout.n_fixed

    s_env = resid.get("genotype_location_year", 0.0)
    t_s = layout.struct.transform(svec)
    g_s = layout.struct.latent_cov(svec)
    dl = t_s.shape[1]
    cs, logdet_gs = _chol_logdet(g_s)
    gs_inv = cho_solve(cs, np.eye(dl), check_finite=False)

    geno_terms: list[tuple[str, int, float]] = []
    if terms.genotype_location:
        geno_terms.append(("li", L, resid["genotype_location"]))
    if terms.genotype_year:
        geno_terms.append(("yi", M, resid["genotype_year"]))

    env_terms: list[tuple[str, int, float]] = []
    if terms.location:
        env_terms.append(("li", L, resid["location"]))
    if terms.year:
        env_terms.append(("yi", M, resid["year"]))
    if terms.location_year:
        env_terms.append(("env", J, resid["location_year"]))

    d_i = dl + sum(k for _, k, _ in geno_terms)
    d_e = sum(k for _, k, _ in env_terms)

    logdet_gg_fixed = logdet_gs + sum(k * math.log(s2) for _, k, s2 in geno_terms)

    xvx = np.zeros((pf, pf))
    xvy = np.zeros(pf)
    yvy = 0.0
    eve = np.zeros((d_e, d_e))
    xve = np.zeros((pf, d_e))
    evy = np.zeros(d_e)
    logdet_vb = 0.0

    for grp in layout.groups:
        nm = len(grp.members)
        a = 1.0 / (grp.base_r + s_env)
        idx_of = {"li": grp.li, "yi": grp.yi, "env": grp.env_rows}

        w_blocks = [("dense", grp.base @ t_s)]
        for name, k, _ in geno_terms:
            w_blocks.append(("ind", idx_of[name], k))
        e_blocks = [("ind", idx_of[name], k) for name, k, _ in env_terms]
        x_blocks = [("dense", grp.xf)]
        y_blocks = [("dense", grp.ymat)]

        waw = _block_product(a, w_blocks, w_blocks)
        t_mat = waw.copy()
        t_mat[:dl, :dl] += gs_inv
        off = dl
        for _, k, s2 in geno_terms:
            t_mat[off : off + k, off : off + k] += np.eye(k) / s2
            off += k
        ct, logdet_t = _chol_logdet(t_mat)

        wax = _block_product(a, w_blocks, x_blocks)
        way = _block_product(a, w_blocks, y_blocks)
        xax = _block_product(a, x_blocks, x_blocks)
        xay = _block_product(a, x_blocks, y_blocks)
        yay = np.sum(grp.ymat * (a[:, None] * grp.ymat), axis=0)

        ti_wax = cho_solve(ct, wax, check_finite=False)
        ti_way = cho_solve(ct, way, check_finite=False)

        xvx += nm * (xax - wax.T @ ti_wax)
        xvy += (xay - wax.T @ ti_way).sum(axis=1)
        yvy += float(np.sum(yay - np.sum(way * ti_way, axis=0)))

        if d_e:
            wae = _block_product(a, w_blocks, e_blocks)
            eae = _block_product(a, e_blocks, e_blocks)
            eay = _block_product(a, e_blocks, y_blocks)
            xae = _block_product(a, x_blocks, e_blocks)
            ti_wae = cho_solve(ct, wae, check_finite=False)
            eve += nm * (eae - wae.T @ ti_wae)
            xve += nm * (xae - wax.T @ ti_wae)
            evy += (eay - wae.T @ ti_way).sum(axis=1)

        logdet_vb += nm * (-float(np.sum(np.log(a))) + logdet_gg_fixed + logdet_t)

    logdet_v = logdet_vb
    if d_e:
        ge_log = sum(k * math.log(s2) for _, k, s2 in env_terms)
        s_mat = eve.copy()
        off = 0
        for _, k, s2 in env_terms:
            s_mat[off : off + k, off : off + k] += np.eye(k) / s2
            off += k
        cs2, logdet_s = _chol_logdet(s_mat)
        logdet_v += ge_log + logdet_s
        si_evy = cho_solve(cs2, evy, check_finite=False)
        si_xvet = cho_solve(cs2, xve.T, check_finite=False)
        xvx = xvx - xve @ si_xvet
        xvy = xvy - xve @ si_evy
        yvy = yvy - float(evy @ si_evy)

    n = layout.n
    if pf:
        cx, logdet_xvx = _chol_logdet(xvx)
        beta = cho_solve(cx, xvy, check_finite=False)
        ypy = yvy - float(xvy @ beta)
    else:
        beta = np.zeros(0)
        logdet_xvx = 0.0
        ypy = yvy

    loglik_reml = -0.5 * ((n - pf) * math.log(2 * math.pi) + logdet_v + logdet_xvx + ypy)
    loglik_full = -0.5 * (n * math.log(2 * math.pi) + logdet_v + ypy)
    return _LikParts(loglik_reml, loglik_full, beta, logdet_v, logdet_xvx, ypy)


def reml_loglik(layout: Layout, theta: np.ndarray) -> float:
    """Restricted log-likelihood with all constants; -inf on invalid params."""
    try:
        return likelihood_parts(layout, theta).loglik_reml
    except np.linalg.LinAlgError:
        return -math.inf


# ---------------------------------------------------------------------------
# ANOVA moments on balanced grids (starting values and test oracle)
# ---------------------------------------------------------------------------


def anova_components(dataset: MetDataset) -> dict[str, float]:
    """Method-of-moments components for a complete balanced grid.

    The grid must contain every genotype in every environment.  Estimates may
    be negative; callers clip as needed.  Raises ValidationError otherwise.
    """
    I, L, M = dataset.n_genotypes, len(dataset.locations), len(dataset.years)
    if dataset.n_records != I * L * M or dataset.n_envs != L * M:
        raise ValidationError("ANOVA moments need a complete balanced grid")
    if min(I, L, M) < 2:
        raise ValidationError("ANOVA moments need at least 2 levels per factor")
    cube = np.full((I, L, M), np.nan)
    cube[dataset.geno_idx, dataset.env_loc_idx[dataset.env_idx], dataset.env_year_idx[dataset.env_idx]] = dataset.mean
    if np.isnan(cube).any():
        raise ValidationError("ANOVA moments need a complete balanced grid")

    g_i = cube.mean(axis=(1, 2))
    l_l = cube.mean(axis=(0, 2))
    y_m = cube.mean(axis=(0, 1))
    gl = cube.mean(axis=2)
    gy = cube.mean(axis=1)
    ly = cube.mean(axis=0)
    grand = cube.mean()

    ms_g = L * M * np.sum((g_i - grand) ** 2) / (I - 1)
    ms_l = I * M * np.sum((l_l - grand) ** 2) / (L - 1)
    ms_y = I * L * np.sum((y_m - grand) ** 2) / (M - 1)
    ms_gl = M * np.sum((gl - g_i[:, None] - l_l[None, :] + grand) ** 2) / ((I - 1) * (L - 1))
    ms_gy = L * np.sum((gy - g_i[:, None] - y_m[None, :] + grand) ** 2) / ((I - 1) * (M - 1))
    ms_ly = I * np.sum((ly - l_l[:, None] - y_m[None, :] + grand) ** 2) / ((L - 1) * (M - 1))
    resid = (
        cube
        - gl[:, :, None]
        - gy[:, None, :]
        - ly[None, :, :]
        + g_i[:, None, None]
        + l_l[None, :, None]
        + y_m[None, None, :]
        - grand
    )
    ms_e = np.sum(resid**2) / ((I - 1) * (L - 1) * (M - 1))

    mean_meas = float(np.mean(1.0 / dataset.weight))
    return {
        "genotype": float((ms_g - ms_gl - ms_gy + ms_e) / (L * M)),
        "location": float((ms_l - ms_gl - ms_ly + ms_e) / (I * M)),
        "year": float((ms_y - ms_gy - ms_ly + ms_e) / (I * L)),
        "location_year": float((ms_ly - ms_e) / I),
        "genotype_location": float((ms_gl - ms_e) / M),
        "genotype_year": float((ms_gy - ms_e) / L),
        "genotype_location_year": float(ms_e - mean_meas),
    }


def _default_start(layout: Layout) -> tuple[np.ndarray, dict[str, float]]:
    ds = layout.dataset
    var_y = float(np.var(ds.mean)) or 1.0
    floor = max(1e-4 * var_y, 1e-8)
    try:
        comps = anova_components(ds)
        resid = {t: max(comps[t], floor) for t in RESIDUAL_TERMS}
        alpha = max(comps["genotype"], floor)
    except ValidationError:
        resid = {
            "location": 0.1 * var_y,
            "year": 0.1 * var_y,
            "location_year": 0.2 * var_y,
            "genotype_location": 0.05 * var_y,
            "genotype_year": 0.05 * var_y,
            "genotype_location_year": 0.2 * var_y,
        }
        alpha = 0.2 * var_y

    struct = layout.struct
    if isinstance(struct, LoadingsOnly):
        svec = np.full(struct.n_free, math.sqrt(0.1 * alpha / max(struct.p, 1)))
    else:
        spec = struct.spec
        scale = 0.1 * alpha
        if spec.kind == st.BASELINE:
            svec = np.array([math.log(alpha)])
        elif spec.kind == st.KINSHIP:
            svec = np.log([alpha, max(scale / max(spec.p, 1), 1e-8)])
        elif spec.kind == st.REDUCED_RANK:
            lam = np.zeros((spec.p + 1, spec.q))
            lam[0, 0] = math.sqrt(alpha)
            for h in range(1, spec.p + 1):
                for k in range(min(h, spec.q)):
                    lam[h, k] = math.sqrt(scale / max(spec.p, 1)) * (0.5 if k else 1.0)
            svec = st.to_unconstrained(spec, st.ReducedRankParams(loadings=lam))
        else:
            d = spec.coef_dim
            sig = np.eye(d) * max(scale / max(d - 1, 1), 1e-8)
            sig[0, 0] = alpha
            svec = st.to_unconstrained(spec, st.UnstructuredParams(sigma=sig))
    resid = {t: resid[t] for t in layout.terms.active()}
    return svec, resid


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


class _DivergenceAbort(Exception):
    pass


@dataclass
class FitResultInfo:
    converged: bool
    n_iter: int
    n_eval: int
    message: str
    runtime: float


@dataclass
class FittedModel:
    """A converged (or best-so-far) REML fit with everything needed downstream."""

    model: Optional[ModelSpec]
    layout: Layout
    theta: np.ndarray
    struct_params: object
    residual: dict[str, float]
    boundary: tuple[str, ...]
    beta: np.ndarray
    fixed_names: tuple[str, ...]
    loglik_reml: float
    loglik_full: float
    info: FitResultInfo
    n_params: dict[str, int]
    blups: dict[str, np.ndarray]

    @property
    def converged(self) -> bool:
        return self.info.converged

    def coef_matrix(self) -> np.ndarray:
        """Estimated genotype coefficient vectors, one row per genotype.

        Row i is the fixed part (intercept and, with a mean regression, the
        slope means) plus the genotype's predicted deviations.
        """
        if self.model is None:
            raise FitError("coefficient matrix is only defined for standard model fits")
        I, _, _, _ = self.layout.dims
        d1 = self.model.structure.coef_dim
        svec, _ = unpack_theta(self.layout, self.theta)
        t_s = self.layout.struct.transform(svec)
        coefs = self.blups["latent"] @ t_s.T
        coefs[:, 0] += self.beta[0]
        if self.model.mean_regression:
            coefs[:, 1:] += self.beta[1:d1]
        return coefs

    def fitted_values(self) -> np.ndarray:
        """Record-level fitted values including every predicted random effect."""
        lay = self.layout
        svec, resid = unpack_theta(lay, self.theta)
        t_s = lay.struct.transform(svec)
        coefs = self.blups["latent"] @ t_s.T
        out = lay.xf_rows @ self.beta
        eloc = lay.dataset.env_loc_idx[lay.env_idx]
        eyr = lay.dataset.env_year_idx[lay.env_idx]
        out += np.sum(lay.struct_base[lay.env_idx] * coefs[lay.geno_idx], axis=1)
        if lay.terms.location:
            out += self.blups["location"][eloc]
        if lay.terms.year:
            out += self.blups["year"][eyr]
        if lay.terms.location_year:
            out += self.blups["location_year"][lay.env_idx]
        if lay.terms.genotype_location:
            out += self.blups["genotype_location"][lay.geno_idx, eloc]
        if lay.terms.genotype_year:
            out += self.blups["genotype_year"][lay.geno_idx, eyr]
        if lay.terms.genotype_location_year:
            out += self.blups["record_interaction"]
        # return in original record order
        inv = np.empty_like(lay.order)
        inv[lay.order] = np.arange(lay.n)
        return out[inv]

    def theta_items(self) -> list[tuple[str, float]]:
        items: list[tuple[str, float]] = []
        if isinstance(self.layout.struct, SpecStructure):
            items.extend(st.params_to_items(self.layout.struct.spec, self.struct_params))
        else:
            lam = self.struct_params
            items.extend(
                (f"loading[{r},{c}]", float(lam[r, c]))
                for r in range(lam.shape[0])
                for c in range(lam.shape[1])
            )
        items.extend((t, float(self.residual[t])) for t in self.layout.terms.active())
        return items


def fit(
    dataset: MetDataset,
    x_work: Optional[np.ndarray] = None,
    model: Optional[ModelSpec] = None,
    *,
    start: Optional[np.ndarray] = None,
    start_items: Optional[dict[str, float]] = None,
    max_iter: int = 200,
    tol: float = 1e-8,
    terms: TermConfig = TermConfig(),
    struct: Optional[SpecStructure | LoadingsOnly] = None,
    fixed_rows: Optional[np.ndarray] = None,
    fixed_names: Optional[tuple[str, ...]] = None,
    struct_includes_intercept: bool = True,
    sp_count: int = 0,
) -> FittedModel:
    """Maximize the REML likelihood and return the fitted model.

    ``model`` drives the standard pipeline; the remaining knobs exist for the
    stage-A extraction and for tests.  ``start`` is an unconstrained theta
    vector; ``start_items`` is the named form written by fit reports.
    """
    if model is not None:
        struct = SpecStructure(model.structure)
        mean_regression = model.mean_regression
        if mean_regression and dataset.n_envs <= model.structure.working_dim:
            raise FitError(
                "mean regression needs more environments than covariates "
                f"({dataset.n_envs} environments, {model.structure.working_dim} covariates)"
            )
    else:
        if struct is None:
            raise ValidationError("either a model spec or an explicit structure is required")
        mean_regression = False

    layout = build_layout(
        dataset,
        x_work,
        struct,
        terms,
        mean_regression=mean_regression,
        fixed_rows=fixed_rows,
        fixed_names=fixed_names,
        struct_includes_intercept=struct_includes_intercept,
    )

    if start is None:
        svec0, resid0 = _default_start(layout)
        if start_items:
            svec0, resid0 = _start_from_items(layout, start_items, svec0, resid0)
        theta0 = pack_theta(svec0, resid0, layout.terms)
    else:
        theta0 = np.asarray(start, dtype=float)
        if theta0.shape != (n_theta(layout),):
            raise ValidationError("warm-start vector has the wrong length")

    ns = layout.struct.n_free
    log_mask = np.concatenate(
        [layout.struct.log_scale_mask(), np.ones(len(layout.terms.active()), dtype=bool)]
    )
    bounds = [(-_LOG_BOUND, _LOG_BOUND) if m else (None, None) for m in log_mask]
    lo = np.where(log_mask, -_LOG_BOUND, -np.inf)
    hi = np.where(log_mask, _LOG_BOUND, np.inf)
    theta0 = np.clip(theta0, lo, hi)

    state = {"best_f": math.inf, "best_theta": theta0.copy(), "n_eval": 0, "last_cb_f": None}

    def objective(theta: np.ndarray) -> float:
        state["n_eval"] += 1
        try:
            val = -likelihood_parts(layout, theta).loglik_reml
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return _BAD_OBJECTIVE
        if not np.isfinite(val):
            return _BAD_OBJECTIVE
        if val < state["best_f"]:
            state["best_f"] = val
            state["best_theta"] = theta.copy()
        return val

    def callback(theta: np.ndarray) -> None:
        # Divergence guard: a jump of more than 1e6 in one accepted step is
        # treated as a runaway fit; the best-so-far estimate is kept instead.
        f = objective(theta)
        last = state["last_cb_f"]
        state["last_cb_f"] = f
        if last is not None and last - f > 1e6:
            raise _DivergenceAbort()

    t0 = time.perf_counter()
    converged = False
    message = ""
    n_iter = 0
    abnormal = False
    # Small problems afford 3-point gradients and a tighter gradient target,
    # which buys the last digits the closed-form comparisons ask for.
    small = theta0.size <= 12
    gtol = min(1e-4, max(1e3 * tol, 1e-9)) if small else 1e-4
    try:
        res = minimize(
            objective,
            theta0,
            method="L-BFGS-B",
            jac="3-point" if small else None,
            bounds=bounds,
            callback=callback,
            options={"maxiter": max_iter, "ftol": tol, "gtol": gtol, "maxcor": 20},
        )
        converged = bool(res.success)
        message = str(res.message)
        n_iter = int(res.nit)
        if not np.isfinite(res.fun) or res.fun >= _BAD_OBJECTIVE / 2:
            converged = False
            abnormal = True
        abnormal = abnormal or res.status == 2
    except _DivergenceAbort:
        message = "aborted: log-likelihood diverged"
    if abnormal and not converged:
        # A quasi-Newton step failed outright: derivative-free fallback from
        # the best point seen so far.
        res = minimize(
            objective,
            state["best_theta"] if state["best_f"] < _BAD_OBJECTIVE / 2 else theta0,
            method="Nelder-Mead",
            options={"maxfev": max(200, max_iter * 10), "fatol": 10 * tol, "xatol": 1e-8},
        )
        converged = bool(res.success) and res.fun < _BAD_OBJECTIVE / 2
        message = f"simplex fallback: {res.message}"
        n_iter += int(res.nit)

    theta_hat = state["best_theta"]
    runtime = time.perf_counter() - t0

    parts = likelihood_parts(layout, theta_hat)
    svec, resid = unpack_theta(layout, theta_hat)
    boundary = tuple(t for t, v in resid.items() if v < BOUNDARY_EPS)
    reported = {t: (0.0 if t in boundary else v) for t, v in resid.items()}
    struct_params = layout.struct.params(svec)

    blups = _solve_effects(layout, theta_hat, parts.beta)

    n_params = {
        "VarP": layout.struct.n_free + len(layout.terms.active()),
        "FixedP": layout.n_fixed,
        "SP": sp_count,
    }

    return FittedModel(
        model=model,
        layout=layout,
        theta=theta_hat,
        struct_params=struct_params,
        residual=reported,
        boundary=boundary,
        beta=parts.beta,
        fixed_names=layout.fixed_names,
        loglik_reml=parts.loglik_reml,
        loglik_full=parts.loglik_full,
        info=FitResultInfo(converged, n_iter, state["n_eval"], message, runtime),
        n_params=n_params,
        blups=blups,
    )


def _start_from_items(layout, items, svec0, resid0):
    resid = dict(resid0)
    for t in layout.terms.active():
        if t in items:
            resid[t] = max(float(items[t]), 1e-10)
    if isinstance(layout.struct, SpecStructure):
        try:
            params = st.params_from_items(layout.struct.spec, items)
            svec = st.to_unconstrained(layout.struct.spec, params)
        except (KeyError, ValidationError):
            svec = svec0
    else:
        svec = svec0
    return svec, resid


def aic(fitted: FittedModel) -> float:
    """Information criterion from the full likelihood and parameter counts."""
    k = fitted.n_params["VarP"] + fitted.n_params["FixedP"] + fitted.n_params["SP"]
    return -2.0 * fitted.loglik_full + 2.0 * k


def aic_from_counts(loglik: float, n_params: int) -> float:
    return -2.0 * loglik + 2.0 * n_params


# ---------------------------------------------------------------------------
# Mixed-model equations (dense, assembled once per fit)
# ---------------------------------------------------------------------------


@dataclass
class MmeSystem:
    coef: np.ndarray
    rhs: np.ndarray
    offsets: dict[str, int]
    sizes: dict[str, int]
    latent_dim: int


def assemble_mme(layout: Layout, theta: np.ndarray) -> MmeSystem:
    """Dense Henderson system for the absorbed-interaction model.

    Effect order: fixed, genotype latent blocks, genotype-location,
    genotype-year, location, year, location-year.
    """
    svec, resid = unpack_theta(layout, theta)
    terms = layout.terms
    I, L, M, J = layout.dims
    n = layout.n
    pf = layout.n_fixed
    s_env = resid.get("genotype_location_year", 0.0)
    a = 1.0 / (layout.base_r + s_env)

    t_s = layout.struct.transform(svec)
    g_s = layout.struct.latent_cov(svec)
    dl = t_s.shape[1]

    blocks: list[tuple[str, int]] = [("latent", I * dl)]
    if terms.genotype_location:
        blocks.append(("genotype_location", I * L))
    if terms.genotype_year:
        blocks.append(("genotype_year", I * M))
    if terms.location:
        blocks.append(("location", L))
    if terms.year:
        blocks.append(("year", M))
    if terms.location_year:
        blocks.append(("location_year", J))

    offsets = {}
    sizes = {}
    pos = pf
    for name, size in blocks:
        offsets[name] = pos
        sizes[name] = size
        pos += size
    dim = pos

    eloc = layout.dataset.env_loc_idx[layout.env_idx]
    eyr = layout.dataset.env_year_idx[layout.env_idx]
    struct_rows = layout.struct_base[layout.env_idx] @ t_s  # (n, dl)

    rows = []
    cols = []
    vals = []

    def add_block(col_idx, values):
        rows.append(np.repeat(np.arange(n), values.shape[1]) if values.ndim == 2 else np.arange(n))
        cols.append(col_idx.ravel())
        vals.append(values.ravel())

    lat_cols = offsets["latent"] + layout.geno_idx[:, None] * dl + np.arange(dl)[None, :]
    add_block(lat_cols, struct_rows)
    if terms.genotype_location:
        add_block(offsets["genotype_location"] + layout.geno_idx * L + eloc, np.ones(n))
    if terms.genotype_year:
        add_block(offsets["genotype_year"] + layout.geno_idx * M + eyr, np.ones(n))
    if terms.location:
        add_block(offsets["location"] + eloc, np.ones(n))
    if terms.year:
        add_block(offsets["year"] + eyr, np.ones(n))
    if terms.location_year:
        add_block(offsets["location_year"] + layout.env_idx, np.ones(n))

    z = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols) - pf)),
        shape=(n, dim - pf),
    )
    xf = layout.xf_rows
    aw = sparse.diags(a)
    ztaz = (z.T @ aw @ z).toarray()
    ztax = z.T @ (a[:, None] * xf)
    xtax = xf.T @ (a[:, None] * xf)
    ztay = z.T @ (a * layout.y)
    xtay = xf.T @ (a * layout.y)

    coef = np.zeros((dim, dim))
    coef[:pf, :pf] = xtax
    coef[:pf, pf:] = ztax.T
    coef[pf:, :pf] = ztax
    coef[pf:, pf:] = ztaz

    # add G^{-1}
    gs_inv = np.linalg.inv(g_s)
    for i in range(I):
        o = offsets["latent"] + i * dl - pf
        coef[pf + o : pf + o + dl, pf + o : pf + o + dl] += gs_inv
    for name, key in (
        ("genotype_location", "genotype_location"),
        ("genotype_year", "genotype_year"),
        ("location", "location"),
        ("year", "year"),
        ("location_year", "location_year"),
    ):
        if name in offsets:
            o = offsets[name]
            coef[o : o + sizes[name], o : o + sizes[name]] += (
                np.eye(sizes[name]) / resid[key]
            )

    rhs = np.concatenate([xtay, ztay])
    return MmeSystem(coef=coef, rhs=rhs, offsets=offsets, sizes=sizes, latent_dim=dl)


def _solve_effects(layout: Layout, theta: np.ndarray, beta: np.ndarray) -> dict[str, np.ndarray]:
    """Solve the MME once and unpack BLUPs into named arrays."""
    system = assemble_mme(layout, theta)
    c = cho_factor(system.coef, lower=True, check_finite=False)
    sol = cho_solve(c, system.rhs, check_finite=False)
    I, L, M, J = layout.dims
    dl = system.latent_dim
    out: dict[str, np.ndarray] = {}
    out["latent"] = sol[system.offsets["latent"] : system.offsets["latent"] + I * dl].reshape(I, dl)
    if "genotype_location" in system.offsets:
        o = system.offsets["genotype_location"]
        out["genotype_location"] = sol[o : o + I * L].reshape(I, L)
    if "genotype_year" in system.offsets:
        o = system.offsets["genotype_year"]
        out["genotype_year"] = sol[o : o + I * M].reshape(I, M)
    for name, k in (("location", L), ("year", M), ("location_year", J)):
        if name in system.offsets:
            o = system.offsets[name]
            out[name] = sol[o : o + k]
    # interaction BLUP per record (absorbed term), in sorted order
    svec, resid = unpack_theta(layout, theta)
    s_env = resid.get("genotype_location_year", 0.0)
    if layout.terms.genotype_location_year:
        t_s = layout.struct.transform(svec)
        fitted = layout.xf_rows @ sol[: layout.n_fixed]
        coefs = out["latent"] @ t_s.T
        eloc = layout.dataset.env_loc_idx[layout.env_idx]
        eyr = layout.dataset.env_year_idx[layout.env_idx]
        fitted += np.sum(layout.struct_base[layout.env_idx] * coefs[layout.geno_idx], axis=1)
        if layout.terms.location:
            fitted += out["location"][eloc]
        if layout.terms.year:
            fitted += out["year"][eyr]
        if layout.terms.location_year:
            fitted += out["location_year"][layout.env_idx]
        if layout.terms.genotype_location:
            fitted += out["genotype_location"][layout.geno_idx, eloc]
        if layout.terms.genotype_year:
            fitted += out["genotype_year"][layout.geno_idx, eyr]
        resid_vec = layout.y - fitted
        a = 1.0 / (layout.base_r + s_env)
        out["record_interaction"] = s_env * a * resid_vec
    # replace beta from the MME (identical to the likelihood GLS solution)
    out["_beta"] = sol[: layout.n_fixed]
    return out


def c_inverse_blocks(
    fitted: FittedModel,
    genotypes: Optional[list[int]] = None,
    force: bool = False,
) -> np.ndarray:
    """Joint prediction-error covariance of the genotype coefficient vectors.

    Returns the (len(g) * (d+1)) square matrix for the requested genotypes
    (default: all), including cross-genotype blocks.  Latent-score structures
    are mapped back to coefficient space through their loading matrix.
    """
    if fitted.model is None:
        raise FitError("coefficient covariances are only defined for standard model fits")
    if not fitted.converged and not force:
        raise FitError("fit did not converge; pass force=True to extract variances anyway")
    layout = fitted.layout
    I, L, M, J = layout.dims
    if genotypes is None:
        genotypes = list(range(I))
    svec, _ = unpack_theta(layout, fitted.theta)
    t_s = layout.struct.transform(svec)
    d1 = fitted.model.structure.coef_dim
    dl = t_s.shape[1]

    system = assemble_mme(layout, fitted.theta)
    c = cho_factor(system.coef, lower=True, check_finite=False)

    dim = system.coef.shape[0]
    nb = len(genotypes) * d1
    h = np.zeros((dim, nb))
    for gi, g in enumerate(genotypes):
        cols = slice(gi * d1, (gi + 1) * d1)
        h_block = np.zeros((dim, d1))
        h_block[0, 0] = 1.0  # intercept column of the fixed design
        if fitted.model.mean_regression:
            for k in range(1, d1):
                h_block[k, k] = 1.0
        o = system.offsets["latent"] + g * dl
        h_block[o : o + dl, :] = t_s.T
        h[:, cols] = h_block
    sol = cho_solve(c, h, check_finite=False)
    return h.T @ sol
