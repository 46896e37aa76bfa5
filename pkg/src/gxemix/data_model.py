"""Domain types and data preparation for multi-environment trial analysis.

An *environment* is a (location, year) pair.  Environments are always ordered
lexicographically by (location label, year) so that every run of the pipeline
indexes them identically.  All containers are frozen dataclasses holding
read-only numpy arrays and are safe to share across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import StageOneError, ValidationError

# Stage-1 weights are capped here when a trial fits perfectly (zero residual
# variance would give an infinite weight and an ill-conditioned MME).
MAX_WEIGHT = 1e6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PlotRecord:
    """One plot observation from a single trial (one location-year)."""

    genotype: str
    location: str
    year: int
    block: str
    yield_value: float


@dataclass(frozen=True)
class MetDataset:
    """Genotype x environment table of adjusted means with stage-1 weights.

    ``env_keys`` fixes the environment order; ``geno_idx`` / ``env_idx`` are
    dense indices into ``genotypes`` / ``env_keys`` for each record.
    """

    genotypes: tuple[str, ...]
    locations: tuple[str, ...]
    years: tuple[int, ...]
    env_keys: tuple[tuple[str, int], ...]
    geno_idx: np.ndarray
    env_idx: np.ndarray
    mean: np.ndarray
    weight: np.ndarray
    dropped_genotypes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "geno_idx", _readonly(np.asarray(self.geno_idx, dtype=np.intp)))
        object.__setattr__(self, "env_idx", _readonly(np.asarray(self.env_idx, dtype=np.intp)))
        object.__setattr__(self, "mean", _readonly(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "weight", _readonly(np.asarray(self.weight, dtype=float)))

    @property
    def n_records(self) -> int:
        return self.mean.shape[0]

    @property
    def n_genotypes(self) -> int:
        return len(self.genotypes)

    @property
    def n_envs(self) -> int:
        return len(self.env_keys)

    @property
    def env_loc_idx(self) -> np.ndarray:
        loc_pos = {lab: k for k, lab in enumerate(self.locations)}
        return np.array([loc_pos[loc] for loc, _ in self.env_keys], dtype=np.intp)

    @property
    def env_year_idx(self) -> np.ndarray:
        year_pos = {y: k for k, y in enumerate(self.years)}
        return np.array([year_pos[yr] for _, yr in self.env_keys], dtype=np.intp)

    @staticmethod
    def from_records(
        rows: list[tuple[str, str, int, float, float]],
        require_two_years: bool = True,
    ) -> "MetDataset":
        """Build a dataset from (genotype, location, year, mean, weight) rows.

        Enforces the inclusion rule: genotypes observed in fewer than two
        distinct years are dropped (recorded in ``dropped_genotypes``).
        Cross-validation folds disable the rule to keep the training sets
        intact.
        """
        if not rows:
            raise ValidationError("dataset has no records")
        seen: dict[tuple[str, str, int], int] = {}
        for rownum, (g, loc, yr, m, w) in enumerate(rows, start=1):
            key = (g, loc, int(yr))
            if key in seen:
                raise ValidationError(
                    f"duplicate record for genotype={g} location={loc} year={yr} "
                    f"(rows {seen[key]} and {rownum})"
                )
            seen[key] = rownum
            if not np.isfinite(m):
                raise ValidationError(f"non-finite mean in row {rownum}")
            if not (w > 0):
                raise ValidationError(f"weight must be > 0 (row {rownum}, got {w})")

        dropped: tuple[str, ...] = ()
        if require_two_years:
            years_of: dict[str, set[int]] = {}
            for g, loc, yr, m, w in rows:
                years_of.setdefault(g, set()).add(int(yr))
            dropped = tuple(sorted(g for g, ys in years_of.items() if len(ys) < 2))
            if dropped:
                warnings.warn(
                    f"excluding {len(dropped)} genotype(s) observed in < 2 years: "
                    + ", ".join(dropped)
                )
        kept = [r for r in rows if r[0] not in dropped]
        if not kept:
            raise ValidationError("no genotype appears in at least two distinct years")

        genotypes = tuple(sorted({r[0] for r in kept}))
        locations = tuple(sorted({r[1] for r in kept}))
        years = tuple(sorted({int(r[2]) for r in kept}))
        env_keys = tuple(sorted({(r[1], int(r[2])) for r in kept}))
        g_pos = {g: i for i, g in enumerate(genotypes)}
        e_pos = {e: j for j, e in enumerate(env_keys)}
        order = sorted(range(len(kept)), key=lambda k: (e_pos[(kept[k][1], int(kept[k][2]))], g_pos[kept[k][0]]))
        kept = [kept[k] for k in order]
        return MetDataset(
            genotypes=genotypes,
            locations=locations,
            years=years,
            env_keys=env_keys,
            geno_idx=np.array([g_pos[r[0]] for r in kept]),
            env_idx=np.array([e_pos[(r[1], int(r[2]))] for r in kept]),
            mean=np.array([r[3] for r in kept], dtype=float),
            weight=np.array([r[4] for r in kept], dtype=float),
            dropped_genotypes=dropped,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "genotype": [self.genotypes[i] for i in self.geno_idx],
                "location": [self.env_keys[j][0] for j in self.env_idx],
                "year": [self.env_keys[j][1] for j in self.env_idx],
                "mean": self.mean,
                "weight": self.weight,
            }
        )

    def subset(self, keep: np.ndarray) -> "MetDataset":
        """Restrict to a boolean record mask, keeping label dictionaries."""
        keep = np.asarray(keep, dtype=bool)
        if not keep.any():
            raise ValidationError("subset removes every record")
        return replace(
            self,
            geno_idx=self.geno_idx[keep],
            env_idx=self.env_idx[keep],
            mean=self.mean[keep],
            weight=self.weight[keep],
        )


@dataclass(frozen=True)
class CovariateMatrix:
    """Environmental covariates for the trial environments (rows = env order).

    ``scaling`` maps the original raw inputs to the stored values, so a new
    environment's raw covariates can be transformed identically.
    """

    values: np.ndarray
    names: tuple[str, ...]
    year_constant: tuple[bool, ...]
    scaling: tuple[tuple[float, float], ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValidationError("covariate values must be a 2-d matrix")
        if v.shape[1] != len(self.names):
            raise ValidationError("covariate name count does not match columns")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n_envs(self) -> int:
        return self.values.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.values.shape[1]

    def transform_new(self, raw: dict[str, float] | np.ndarray) -> np.ndarray:
        """Apply the stored (center, scale) to one new environment's raw row."""
        if isinstance(raw, dict):
            missing = [n for n in self.names if n not in raw]
            if missing:
                raise ValidationError("missing covariate value(s): " + ", ".join(missing))
            raw = np.array([raw[n] for n in self.names], dtype=float)
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (self.n_covariates,):
            raise ValidationError("raw covariate row has wrong length")
        c = np.array([s[0] for s in self.scaling])
        s = np.array([s[1] for s in self.scaling])
        return (raw - c) / s

    def select(self, idx: list[int]) -> "CovariateMatrix":
        return CovariateMatrix(
            values=self.values[:, idx],
            names=tuple(self.names[i] for i in idx),
            year_constant=tuple(self.year_constant[i] for i in idx),
            scaling=tuple(self.scaling[i] for i in idx),
        )


@dataclass(frozen=True)
class CovariateHistory:
    """Long-term covariate records per (location, year), raw scale.

    Rows are ordered lexicographically by (location, year).  The table is a
    superset of the trial environments and must be complete (one row per
    location-year cell) before the two-way moments model can be fitted.
    """

    locations: tuple[str, ...]
    years: tuple[int, ...]
    names: tuple[str, ...]
    loc_idx: np.ndarray
    year_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "loc_idx", _readonly(np.asarray(self.loc_idx, dtype=np.intp)))
        object.__setattr__(self, "year_idx", _readonly(np.asarray(self.year_idx, dtype=np.intp)))
        object.__setattr__(self, "values", _readonly(np.asarray(self.values, dtype=float)))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def is_complete(self) -> bool:
        return self.n_rows == len(self.locations) * len(self.years)

    def table(self) -> np.ndarray:
        """Return the (n_locations, n_years, p) complete table."""
        if not self.is_complete():
            have = {(int(l), int(m)) for l, m in zip(self.loc_idx, self.year_idx)}
            missing = [
                f"({self.locations[l]}, {self.years[m]})"
                for l in range(len(self.locations))
                for m in range(len(self.years))
                if (l, m) not in have
            ]
            raise ValidationError(
                "history table is incomplete; missing cells: " + ", ".join(missing)
            )
        out = np.empty((len(self.locations), len(self.years), len(self.names)))
        out[self.loc_idx, self.year_idx] = self.values
        return out

    def standardized(self, reference: CovariateMatrix) -> "CovariateHistory":
        """Transform the history with the trial matrix's scaling record."""
        if tuple(self.names) != tuple(reference.names):
            raise ValidationError("history covariates do not match the trial covariates")
        c = np.array([s[0] for s in reference.scaling])
        s = np.array([s[1] for s in reference.scaling])
        return replace(self, values=(self.values - c) / s)

    def restrict_years(self, keep_years: set[int]) -> "CovariateHistory":
        years = tuple(y for y in self.years if y in keep_years)
        if not years:
            raise ValidationError("year restriction removes the whole history")
        ymap = {self.years.index(y): k for k, y in enumerate(years)}
        keep = np.array([int(m) in ymap for m in self.year_idx])
        return CovariateHistory(
            locations=self.locations,
            years=years,
            names=self.names,
            loc_idx=self.loc_idx[keep],
            year_idx=np.array([ymap[int(m)] for m in self.year_idx[keep]]),
            values=self.values[keep],
        )


# ---------------------------------------------------------------------------
# Stage 1: per-trial plot analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageOneResult:
    genotypes: tuple[str, ...]
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    sigma2_e: float
    residual_df: int
    capped: bool


def fit_stage_one(plots: list[PlotRecord]) -> StageOneResult:
    """Least-squares genotype means and their variances for one trial.

    Fits the two-way fixed model (intercept + block + genotype) by OLS; the
    layout may be incomplete.  The adjusted mean of a genotype is its
    prediction at the average block level; its variance feeds the stage-2
    weight (1/variance, capped at ``MAX_WEIGHT``).
    """
    if not plots:
        raise StageOneError("no plot records")
    genotypes = sorted({p.genotype for p in plots})
    blocks = sorted({p.block for p in plots})
    if len(blocks) < 2:
        raise StageOneError("need at least 2 blocks to separate block effects")
    trials = {(p.location, p.year) for p in plots}
    if len(trials) != 1:
        raise StageOneError("plot records span more than one trial (location, year)")
    seen = set()
    for p in plots:
        key = (p.genotype, p.block)
        if key in seen:
            raise StageOneError(f"duplicate plot for genotype={p.genotype} block={p.block}")
        seen.add(key)
        if not np.isfinite(p.yield_value):
            raise StageOneError(f"non-finite yield for genotype={p.genotype} block={p.block}")

    n = len(plots)
    g_pos = {g: i for i, g in enumerate(genotypes)}
    b_pos = {b: i for i, b in enumerate(blocks)}
    n_g, n_b = len(genotypes), len(blocks)
    # Drop-first dummy coding: columns = [1 | block 2..B | genotype 2..G].
    X = np.zeros((n, 1 + (n_b - 1) + (n_g - 1)))
    X[:, 0] = 1.0
    y = np.empty(n)
    for r, p in enumerate(plots):
        b = b_pos[p.block]
        g = g_pos[p.genotype]
        if b > 0:
            X[r, b] = 1.0
        if g > 0:
            X[r, n_b - 1 + g] = 1.0
        y[r] = p.yield_value

    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise StageOneError("design is disconnected; genotype means are not estimable")
    df = n - rank
    if df < 2:
        raise StageOneError(f"only {df} residual degree(s) of freedom; variance undefined")

    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    sse = float(np.sum((y - X @ beta) ** 2))
    sigma2 = sse / df
    xtx_inv = np.linalg.inv(X.T @ X)

    means = np.empty(n_g)
    variances = np.empty(n_g)
    for g in range(n_g):
        c = np.zeros(X.shape[1])
        c[0] = 1.0
        c[1:n_b] = 1.0 / n_b  # average over blocks
        if g > 0:
            c[n_b - 1 + g] = 1.0
        means[g] = c @ beta
        variances[g] = sigma2 * float(c @ xtx_inv @ c)

    weights = np.full(n_g, MAX_WEIGHT)
    positive = variances > 1.0 / MAX_WEIGHT
    weights[positive] = 1.0 / variances[positive]
    capped = bool((~positive).any())
    if capped:
        warnings.warn(
            "stage-1 residual variance is (near) zero; weights capped at "
            f"{MAX_WEIGHT:g}"
        )
    return StageOneResult(
        genotypes=tuple(genotypes),
        means=means,
        variances=variances,
        weights=weights,
        sigma2_e=sigma2,
        residual_df=df,
        capped=capped,
    )


# ---------------------------------------------------------------------------
# Covariate standardization and pruning
# ---------------------------------------------------------------------------


def standardize(matrix: CovariateMatrix) -> CovariateMatrix:
    """Center each column to mean 0 and scale to unit sample variance.

    Uses the J-1 divisor.  The returned scaling composes with any scaling
    already recorded, so it always maps the original raw inputs.
    """
    v = matrix.values
    center = v.mean(axis=0)
    scale = v.std(axis=0, ddof=1)
    for k, s in enumerate(scale):
        if not (s > 0):
            raise ValidationError(f"constant covariate: {matrix.names[k]}")
    composed = tuple(
        (c0 + float(center[k]) * s0, s0 * float(scale[k]))
        for k, (c0, s0) in enumerate(matrix.scaling)
    )
    return CovariateMatrix(
        values=(v - center) / scale,
        names=matrix.names,
        year_constant=matrix.year_constant,
        scaling=composed,
    )


def prune_covariates(matrix: CovariateMatrix, threshold: float = 0.9) -> list[int]:
    """Indices of columns to retain so no pair has |corr| >= threshold.

    Repeatedly takes the worst offending pair and drops the member with the
    larger mean absolute correlation to all other remaining columns, breaking
    ties toward the later column.
    """
    p = matrix.n_covariates
    if p < 2:
        raise ValidationError("pruning needs at least 2 covariates")
    corr = np.corrcoef(matrix.values, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)
    alive = list(range(p))
    while True:
        sub = np.abs(corr[np.ix_(alive, alive)])
        np.fill_diagonal(sub, 0.0)
        worst = np.unravel_index(np.argmax(sub), sub.shape)
        if sub[worst] < threshold:
            break
        a, b = sorted((worst[0], worst[1]))
        if len(alive) == 2:
            drop_local = b
        else:
            mean_abs = sub.sum(axis=1) / (len(alive) - 1)
            # Drop the pair member more entangled with everything else.
            if mean_abs[a] > mean_abs[b]:
                drop_local = a
            elif mean_abs[b] > mean_abs[a]:
                drop_local = b
            else:
                drop_local = b  # tie: later column goes
        alive.pop(drop_local)
        if len(alive) == 1:
            break
    return alive


# ---------------------------------------------------------------------------
# CSV I/O (UTF-8, header row, '.' decimal)
# ---------------------------------------------------------------------------


def _read_csv(path, required: list[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, comment="#", float_precision="round_trip")
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}")
    except Exception as exc:  # malformed CSV
        raise ValidationError(f"cannot parse {path}: {exc}")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s): " + ", ".join(missing))
    return df


def _numeric(df: pd.DataFrame, col: str, path) -> np.ndarray:
    vals = pd.to_numeric(df[col], errors="coerce")
    bad = vals.isna() & df[col].notna()
    if bad.any() or df[col].isna().any():
        rownum = int(np.flatnonzero(vals.isna())[0]) + 2  # 1-based + header
        raise ValidationError(f"{path}: non-numeric or missing value in column '{col}' at line {rownum}")
    return vals.to_numpy()


def load_plots(path) -> list[PlotRecord]:
    df = _read_csv(path, ["genotype", "location", "year", "block", "yield"])
    years = _numeric(df, "year", path).astype(int)
    yields = _numeric(df, "yield", path)
    return [
        PlotRecord(str(g), str(loc), int(yr), str(b), float(yv))
        for g, loc, yr, b, yv in zip(df["genotype"], df["location"], years, df["block"], yields)
    ]


def load_dataset(path) -> MetDataset:
    df = _read_csv(path, ["genotype", "location", "year", "mean", "weight"])
    years = _numeric(df, "year", path).astype(int)
    means = _numeric(df, "mean", path)
    weights = _numeric(df, "weight", path)
    rows = [
        (str(g), str(loc), int(yr), float(m), float(w))
        for g, loc, yr, m, w in zip(df["genotype"], df["location"], years, means, weights)
    ]
    return MetDataset.from_records(rows)


def write_dataset(dataset: MetDataset, path) -> None:
    dataset.to_frame().to_csv(path, index=False)


def load_manifest(path) -> dict[str, bool]:
    df = _read_csv(path, ["covariate", "year_constant"])
    out = {}
    for cov, flag in zip(df["covariate"], df["year_constant"]):
        out[str(cov)] = str(flag).strip().lower() in ("1", "true", "yes")
    return out


def _covariate_frame(path) -> tuple[pd.DataFrame, list[str]]:
    df = _read_csv(path, ["location", "year"])
    names = [c for c in df.columns if c not in ("location", "year")]
    if not names:
        raise ValidationError(f"{path}: no covariate columns")
    dup = df.duplicated(subset=["location", "year"])
    if dup.any():
        r = df[dup].iloc[0]
        raise ValidationError(f"{path}: duplicate cell (location={r['location']}, year={r['year']})")
    for c in names:
        _numeric(df, c, path)
    return df, names


def load_covariates(path, dataset: MetDataset, manifest: dict[str, bool] | None = None) -> CovariateMatrix:
    """Load trial-environment covariates aligned to the dataset's env order."""
    df, names = _covariate_frame(path)
    df = df.assign(year=_numeric(df, "year", path).astype(int))
    cell = {(str(r.location), int(r.year)): i for i, r in enumerate(df.itertuples())}
    missing = [f"({loc}, {yr})" for loc, yr in dataset.env_keys if (loc, yr) not in cell]
    if missing:
        raise ValidationError(f"{path}: missing trial environment(s): " + ", ".join(missing))
    rows = [cell[key] for key in dataset.env_keys]
    values = df[names].to_numpy(dtype=float)[rows]
    manifest = manifest or {}
    year_constant = tuple(bool(manifest.get(n, False)) for n in names)
    return CovariateMatrix(
        values=values,
        names=tuple(names),
        year_constant=year_constant,
        scaling=tuple((0.0, 1.0) for _ in names),
    )


def load_history(path, manifest: dict[str, bool] | None = None) -> CovariateHistory:
    df, names = _covariate_frame(path)
    years_num = _numeric(df, "year", path).astype(int)
    df = df.assign(year=years_num, location=df["location"].astype(str))
    locations = tuple(sorted(df["location"].unique()))
    years = tuple(sorted(int(y) for y in df["year"].unique()))
    l_pos = {lab: i for i, lab in enumerate(locations)}
    y_pos = {y: i for i, y in enumerate(years)}
    order = np.lexsort((df["year"].to_numpy(), df["location"].to_numpy()))
    df = df.iloc[order]
    hist = CovariateHistory(
        locations=locations,
        years=years,
        names=tuple(names),
        loc_idx=np.array([l_pos[l] for l in df["location"]]),
        year_idx=np.array([y_pos[int(y)] for y in df["year"]]),
        values=df[names].to_numpy(dtype=float),
    )
    if manifest:
        _check_year_constant(hist, manifest)
    return hist


def _check_year_constant(hist: CovariateHistory, manifest: dict[str, bool]) -> None:
    for k, name in enumerate(hist.names):
        if not manifest.get(name, False):
            continue
        for l in range(len(hist.locations)):
            vals = hist.values[hist.loc_idx == l, k]
            if vals.size and not np.allclose(vals, vals[0], rtol=0, atol=1e-12):
                raise ValidationError(
                    f"covariate '{name}' is flagged year-constant but varies at "
                    f"location {hist.locations[l]}"
                )


def write_covariates(path, names, rows: list[tuple[str, int, np.ndarray]]) -> None:
    """Write a wide covariate table; rows are (location, year, values)."""
    data = {
        "location": [r[0] for r in rows],
        "year": [r[1] for r in rows],
    }
    for k, n in enumerate(names):
        data[n] = [float(r[2][k]) for r in rows]
    pd.DataFrame(data).to_csv(path, index=False)
