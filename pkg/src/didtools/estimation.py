"""Weighted least squares with fixed-effect absorption and clustered inference.

The estimation strategy is the standard one for high-dimensional fixed
effects: iterated weighted within-group demeaning (alternating projections)
absorbs the fixed effects, a rank-revealing sweep drops collinear columns
deterministically (first listed wins), and the remaining coefficients solve
the weighted normal equations. Inference uses the cluster-level sandwich
estimator with the CR1-style small-sample factor
``G/(G-1) * (N-1)/(N-K)`` where K counts retained regressors plus the
degrees of freedom used by the absorbed fixed effects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from . import _kernels
from .data import Dataset, FitResult, ModelSpec
from .exceptions import AbsorptionError, EstimationError, ValidationError

ABSORB_TOL = 1e-8
ABSORB_MAX_SWEEPS = 10_000
COLLINEARITY_TOL = 1e-10


def _absorb_matrix(
    mat: np.ndarray,
    codes_list: Sequence[np.ndarray],
    w: np.ndarray,
    tol: float = ABSORB_TOL,
    max_sweeps: int = ABSORB_MAX_SWEEPS,
) -> None:
    """Demean ``mat`` (in place) within every fixed-effect dimension.

    Sweeps across dimensions until the largest weighted within-group mean
    seen during a full sweep falls below ``tol`` times the column scale.
    With a single dimension one pass is exact.
    """
    if not codes_list:
        return
    scales = np.max(np.abs(mat), axis=0)
    scales[scales == 0.0] = 1.0
    group_w = []
    for codes in codes_list:
        nlev = int(codes.max()) + 1 if codes.size else 0
        group_w.append(np.bincount(codes, weights=w, minlength=nlev))
    worst = np.inf
    for _ in range(max_sweeps):
        worst = 0.0
        for codes, gw in zip(codes_list, group_w):
            colmax = _kernels.demean_pass(mat, codes, gw, w)
            worst = max(worst, float(np.max(colmax / scales)))
        if worst < tol:
            return
    raise AbsorptionError(
        f"fixed-effect absorption did not converge in {max_sweeps} sweeps "
        f"(last max within-group weighted mean {worst:.3e} of column scale)",
        max_within_mean=worst,
    )


def absorbed_dof(data: Dataset, fixed_effects: Sequence[str]) -> int:
    """Model degrees of freedom used by the absorbed fixed effects.

    First dimension contributes all its levels, each further dimension one
    fewer (the shared constant); assumes each extra dimension is connected,
    the standard two-way accounting.
    """
    dof = 0
    for i, name in enumerate(fixed_effects):
        nlev = data.categorical(name).n_levels
        dof += nlev if i == 0 else nlev - 1
    return dof


def absorb_fixed_effects(
    data: Dataset,
    fixed_effects: Sequence[str],
    weights: Optional[str] = None,
    columns: Optional[Sequence[str]] = None,
    tol: float = ABSORB_TOL,
    max_sweeps: int = ABSORB_MAX_SWEEPS,
) -> Dataset:
    """Return a dataset whose numeric columns are demeaned within the fixed effects.

    Parameters
    ----------
    data : Dataset
    fixed_effects : sequence of categorical column names
    weights : optional numeric column of positive weights
    columns : numeric columns to demean; all of them when omitted

    Returns
    -------
    Dataset with the selected columns replaced by their within-transformed
    copies; every returned column has weighted mean zero within every
    fixed-effect category up to the convergence tolerance.
    """
    for name in fixed_effects:
        if not data.is_categorical(name):
            raise ValidationError(f"fixed effect '{name}' must be categorical")
    if columns is None:
        columns = [c for c in data.column_names() if not data.is_categorical(c)]
        if weights is not None:
            columns = [c for c in columns if c != weights]
    w = data.numeric(weights).astype(np.float64) if weights else np.ones(data.n_rows)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be strictly positive and finite")
    mat = np.ascontiguousarray(
        np.column_stack([data.numeric(c) for c in columns]), dtype=np.float64
    )
    codes_list = [data.categorical(f).codes for f in fixed_effects]
    _absorb_matrix(mat, codes_list, w, tol=tol, max_sweeps=max_sweeps)
    return data.with_columns({c: mat[:, j] for j, c in enumerate(columns)})


def _retain_columns(
    xw: np.ndarray, ref_norms: np.ndarray, tol: float = COLLINEARITY_TOL
) -> tuple[list[int], list[int]]:
    """Deterministic rank-revealing sweep over whitened columns.

    Processes columns in listed order (first listed kept) with twice-through
    modified Gram-Schmidt; a column is dropped when its residual norm falls
    below ``tol`` times its reference (pre-absorption) norm.
    """
    n, k = xw.shape
    kept: list[int] = []
    dropped: list[int] = []
    basis = np.empty((n, 0))
    for j in range(k):
        col = xw[:, j]
        ref = ref_norms[j] if ref_norms[j] > 0 else 1.0
        r = col.copy()
        for _ in range(2):
            r = r - basis @ (basis.T @ r)
        norm = float(np.linalg.norm(r))
        if norm <= tol * ref:
            dropped.append(j)
        else:
            kept.append(j)
            basis = np.column_stack([basis, r / norm])
    return kept, dropped


def _cluster_sandwich(
    design: np.ndarray,
    residuals: np.ndarray,
    w: np.ndarray,
    codes: np.ndarray,
    n_clusters: int,
    k_model: int,
) -> np.ndarray:
    n, k = design.shape
    if n_clusters < 2:
        raise EstimationError("cluster-robust variance needs at least 2 clusters")
    if n - k_model <= 0:
        raise EstimationError("no residual degrees of freedom")
    xw = design * w[:, None]
    bread = design.T @ xw
    we = w * residuals
    scores = np.empty((n_clusters, k))
    for j in range(k):
        scores[:, j] = np.bincount(codes, weights=design[:, j] * we, minlength=n_clusters)
    meat = scores.T @ scores
    cfac = (n_clusters / (n_clusters - 1.0)) * ((n - 1.0) / (n - k_model))
    try:
        bread_inv = np.linalg.solve(bread, np.eye(k))
    except np.linalg.LinAlgError:
        bread_inv = np.linalg.pinv(bread)
    vce = cfac * bread_inv @ meat @ bread_inv
    return (vce + vce.T) / 2.0


def wls_fit(data: Dataset, spec: ModelSpec) -> FitResult:
    """Weighted least squares of ``spec.outcome`` on ``spec.exog``.

    Fixed effects are absorbed before fitting; perfectly collinear columns
    (including columns absorbed entirely by the fixed effects) are dropped
    deterministically and reported in ``dropped_collinear``. The returned
    ``vce`` is the cluster-robust sandwich.
    """
    spec.validate(data, allow_endog=False)
    if not spec.exog:
        raise EstimationError("no regressors specified")
    y = np.asarray(data.numeric(spec.outcome), dtype=np.float64).copy()
    x = np.column_stack([data.numeric(c) for c in spec.exog]).astype(np.float64)
    w = spec.weight_vector(data)
    sw = np.sqrt(w)
    ref_norms = np.linalg.norm(x * sw[:, None], axis=0)
    fe_dof = 0
    if spec.fixed_effects:
        mat = np.ascontiguousarray(np.column_stack([y, x]))
        codes_list = [data.categorical(f).codes for f in spec.fixed_effects]
        _absorb_matrix(mat, codes_list, w)
        y = mat[:, 0].copy()
        x = mat[:, 1:].copy()
        fe_dof = absorbed_dof(data, spec.fixed_effects)
    kept, dropped = _retain_columns(x * sw[:, None], ref_norms)
    if not kept:
        raise EstimationError("all regressors are collinear with the fixed effects")
    design = x[:, kept]
    names = tuple(spec.exog[j] for j in kept)
    k_model = len(kept) + fe_dof
    n = data.n_rows
    if n <= k_model:
        raise EstimationError(
            f"{n} observations cannot support {k_model} model degrees of freedom"
        )
    params, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    residuals = y - design @ params
    cat = data.categorical(spec.cluster)
    vce = _cluster_sandwich(design, residuals, w, cat.codes, cat.n_levels, k_model)
    return FitResult(
        names=names,
        params=params,
        residuals=residuals,
        vce=vce,
        n_obs=n,
        n_clusters=cat.n_levels,
        dof_residual=n - k_model,
        dropped_collinear=tuple(spec.exog[j] for j in dropped),
        k_model=k_model,
        design=design,
        weights=w,
        cluster_codes=cat.codes,
    )


def cluster_robust_vce(
    fit: FitResult,
    data: Dataset,
    cluster: str,
    weights: Optional[str] = None,
) -> np.ndarray:
    """Liang-Zeger sandwich for an existing fit, clustered on ``cluster``."""
    if fit.design is None:
        raise EstimationError("fit does not carry its design matrix")
    if data.n_rows != fit.n_obs:
        raise ValidationError("dataset row count does not match the fit")
    cat = data.categorical(cluster)
    w = data.numeric(weights).astype(np.float64) if weights else np.ones(data.n_rows)
    return _cluster_sandwich(
        fit.design, fit.residuals, w, cat.codes, cat.n_levels, fit.k_model
    )


@dataclass(frozen=True)
class WaldTest:
    statistic: float
    p: float
    dof: int


def wald_test(
    fit: FitResult,
    restriction: np.ndarray,
    values: Optional[np.ndarray] = None,
    dist: str = "chi2",
) -> WaldTest:
    """Wald test of ``R @ beta = r`` using the fit's cluster-robust VCE.

    ``dist='chi2'`` (default) refers the statistic to chi-squared with
    rank(R) degrees of freedom; ``dist='f'`` divides by rank(R) and refers to
    F(rank(R), G-1).
    """
    r_mat = np.atleast_2d(np.asarray(restriction, dtype=np.float64))
    if r_mat.shape[1] != len(fit.names):
        raise ValidationError(
            f"restriction has {r_mat.shape[1]} columns for {len(fit.names)} coefficients"
        )
    if r_mat.shape[0] > len(fit.names):
        raise ValidationError("more restrictions than coefficients")
    r_vals = (
        np.zeros(r_mat.shape[0])
        if values is None
        else np.atleast_1d(np.asarray(values, dtype=np.float64))
    )
    diff = r_mat @ fit.params - r_vals
    middle = r_mat @ fit.vce @ r_mat.T
    try:
        c, low = scipy.linalg.cho_factor(middle)
        sol = scipy.linalg.cho_solve((c, low), diff)
    except (scipy.linalg.LinAlgError, ValueError):
        raise EstimationError("restriction covariance R V R' is singular") from None
    stat = float(diff @ sol)
    dof = int(np.linalg.matrix_rank(r_mat))
    if dist == "chi2":
        p = float(stats.chi2.sf(stat, dof))
    elif dist == "f":
        p = float(stats.f.sf(stat / dof, dof, fit.n_clusters - 1))
    else:
        raise ValidationError(f"unknown reference distribution '{dist}'")
    return WaldTest(statistic=stat, p=p, dof=dof)


def coefficient_test(fit: FitResult, name: str, value: float = 0.0) -> WaldTest:
    """Single-coefficient cluster-robust z test (chi-squared with 1 dof)."""
    r_mat = np.zeros((1, len(fit.names)))
    r_mat[0, fit.index(name)] = 1.0
    return wald_test(fit, r_mat, np.array([value]))
