"""Two-stage least squares with instrument-strength and validity diagnostics.

The 2SLS coefficients come from regressing the outcome on instrument-projected
endogenous variables; residuals (and hence the sandwich meat) use the original
endogenous values. Instrument strength is summarized by the cluster-robust
first-stage F on the excluded instruments, which with a single endogenous
variable coincides with the rank-based instrument-strength measure. Validity
in overidentified models is tested with the two-step GMM criterion (first
step: 2SLS residuals) against chi-squared with (instruments - endogenous)
degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .data import Dataset, FitResult, ModelSpec
from .estimation import (
    _absorb_matrix,
    _cluster_sandwich,
    _retain_columns,
    absorbed_dof,
    wald_test,
)
from .exceptions import (
    EstimationError,
    NotOveridentifiedError,
    ValidationError,
)


@dataclass(frozen=True)
class HansenResult:
    statistic: float
    p: float
    dof: int


@dataclass
class IVFitResult(FitResult):
    """2SLS fit plus first stages and weak/overidentification diagnostics."""

    first_stage: dict[str, FitResult] = field(default_factory=dict)
    kp_f: Optional[float] = None
    hansen_j: Optional[HansenResult] = None
    endog_names: tuple[str, ...] = ()
    instrument_names: tuple[str, ...] = ()


def _partial_out(basis_w: np.ndarray, mat: np.ndarray, sw: np.ndarray) -> np.ndarray:
    """Weighted least-squares residuals of ``mat`` columns on ``basis_w``."""
    if basis_w.shape[1] == 0:
        return mat
    coefs, *_ = np.linalg.lstsq(basis_w, mat * sw[:, None], rcond=None)
    return mat - (basis_w / sw[:, None]) @ coefs


def tsls_fit(data: Dataset, spec: ModelSpec) -> IVFitResult:
    """Cluster-robust weighted 2SLS of ``spec.outcome`` on exog + endog.

    Requires ``spec.endog`` non-empty and at least as many instruments.
    Raises ``EstimationError`` on rank deficiency of the projected design or
    when fewer than 2 clusters are present.
    """
    spec.validate(data, allow_endog=True)
    if not spec.endog:
        raise ValidationError("field 'endog' is empty; use wls_fit instead")
    n = data.n_rows
    w = spec.weight_vector(data)
    sw = np.sqrt(w)
    y = np.asarray(data.numeric(spec.outcome), dtype=np.float64).copy()
    x_exog = (
        np.column_stack([data.numeric(c) for c in spec.exog]).astype(np.float64)
        if spec.exog
        else np.empty((n, 0))
    )
    x_endog = np.column_stack([data.numeric(c) for c in spec.endog]).astype(np.float64)
    z_excl = np.column_stack([data.numeric(c) for c in spec.instruments]).astype(
        np.float64
    )
    exog_ref = np.linalg.norm(x_exog * sw[:, None], axis=0)
    inst_ref = np.linalg.norm(z_excl * sw[:, None], axis=0)

    fe_dof = 0
    if spec.fixed_effects:
        mat = np.ascontiguousarray(np.column_stack([y, x_exog, x_endog, z_excl]))
        codes_list = [data.categorical(f).codes for f in spec.fixed_effects]
        _absorb_matrix(mat, codes_list, w)
        k1 = 1 + x_exog.shape[1]
        k2 = k1 + x_endog.shape[1]
        y = mat[:, 0].copy()
        x_exog = mat[:, 1:k1].copy()
        x_endog = mat[:, k1:k2].copy()
        z_excl = mat[:, k2:].copy()
        fe_dof = absorbed_dof(data, spec.fixed_effects)

    # Deterministic collinearity handling: exog first, then instruments
    # against the retained exog basis.
    combined = np.column_stack([x_exog, z_excl])
    ref = np.concatenate([exog_ref, inst_ref])
    kept, _ = _retain_columns(combined * sw[:, None], ref)
    kept_exog = [j for j in kept if j < x_exog.shape[1]]
    kept_inst = [j - x_exog.shape[1] for j in kept if j >= x_exog.shape[1]]
    if len(kept_inst) < len(spec.endog):
        raise EstimationError(
            f"order condition fails: {len(kept_inst)} usable instruments for "
            f"{len(spec.endog)} endogenous variables"
        )
    x_exog = x_exog[:, kept_exog]
    exog_names = tuple(spec.exog[j] for j in kept_exog)
    z_excl = z_excl[:, kept_inst]
    inst_names = tuple(spec.instruments[j] for j in kept_inst)
    n_inst = len(inst_names)

    cat = data.categorical(spec.cluster)
    codes, n_clusters = cat.codes, cat.n_levels
    if n_clusters < 2:
        raise EstimationError("2SLS with cluster-robust inference needs >= 2 clusters")

    # First stages: each endogenous variable on exog + excluded instruments.
    z_full = np.column_stack([x_exog, z_excl])
    k_first = z_full.shape[1] + fe_dof
    zw = z_full * sw[:, None]
    first_stage: dict[str, FitResult] = {}
    fitted = np.empty_like(x_endog)
    fs_names = exog_names + inst_names
    for j, name in enumerate(spec.endog):
        coefs, *_ = np.linalg.lstsq(zw, x_endog[:, j] * sw, rcond=None)
        fitted[:, j] = z_full @ coefs
        resid_fs = x_endog[:, j] - fitted[:, j]
        vce_fs = _cluster_sandwich(z_full, resid_fs, w, codes, n_clusters, k_first)
        first_stage[name] = FitResult(
            names=fs_names,
            params=coefs,
            residuals=resid_fs,
            vce=vce_fs,
            n_obs=n,
            n_clusters=n_clusters,
            dof_residual=n - k_first,
            dropped_collinear=(),
            k_model=k_first,
            design=z_full,
            weights=w,
            cluster_codes=codes,
        )

    # Second stage on the projected design.
    design_hat = np.column_stack([fitted, x_exog])
    names = spec.endog + exog_names
    kept2, _ = _retain_columns(
        design_hat * sw[:, None], np.linalg.norm(design_hat * sw[:, None], axis=0)
    )
    if len(kept2) != design_hat.shape[1]:
        raise EstimationError("rank deficiency of the projected 2SLS design")
    k_model = design_hat.shape[1] + fe_dof
    if n <= k_model:
        raise EstimationError(
            f"{n} observations cannot support {k_model} model degrees of freedom"
        )
    params, *_ = np.linalg.lstsq(design_hat * sw[:, None], y * sw, rcond=None)
    design_orig = np.column_stack([x_endog, x_exog])
    residuals = y - design_orig @ params
    vce = _cluster_sandwich(design_hat, residuals, w, codes, n_clusters, k_model)

    fit = IVFitResult(
        names=names,
        params=params,
        residuals=residuals,
        vce=vce,
        n_obs=n,
        n_clusters=n_clusters,
        dof_residual=n - k_model,
        dropped_collinear=(),
        k_model=k_model,
        design=design_hat,
        weights=w,
        cluster_codes=codes,
        first_stage=first_stage,
        endog_names=spec.endog,
        instrument_names=inst_names,
    )
    if len(spec.endog) == 1:
        fit.kp_f = kp_f(fit)
    if n_inst > len(spec.endog):
        fit.hansen_j = _hansen(fit, y, design_orig, z_excl, w)
    return fit


def _instrument_f(fs: FitResult, instrument_names: tuple[str, ...]) -> float:
    n_inst = len(instrument_names)
    r_mat = np.zeros((n_inst, len(fs.names)))
    for i, name in enumerate(instrument_names):
        r_mat[i, fs.index(name)] = 1.0
    return wald_test(fs, r_mat).statistic / n_inst


def kp_f(fit: IVFitResult) -> float:
    """Cluster-robust first-stage F on the excluded instruments.

    Only defined here for a single endogenous variable, where it equals the
    rank-based instrument-strength statistic: the joint Wald statistic for
    zero instrument coefficients in the first stage, divided by the number
    of instruments.
    """
    if len(fit.endog_names) != 1:
        raise EstimationError(
            "instrument-strength F is only supported with one endogenous variable"
        )
    return _instrument_f(fit.first_stage[fit.endog_names[0]], fit.instrument_names)


def first_stage_f(data: Dataset, spec: ModelSpec) -> float:
    """Instrument-strength F computed from the first stage alone.

    Usable even when the projected second-stage design would be degenerate
    (instruments orthogonal to the endogenous variable).
    """
    if len(spec.endog) != 1:
        raise EstimationError(
            "instrument-strength F is only supported with one endogenous variable"
        )
    from .estimation import wls_fit

    fs_spec = ModelSpec(
        outcome=spec.endog[0],
        exog=spec.exog + spec.instruments,
        fixed_effects=spec.fixed_effects,
        cluster=spec.cluster,
        weights=spec.weights,
    )
    fs = wls_fit(data, fs_spec)
    surviving = tuple(n for n in spec.instruments if n in fs.names)
    if not surviving:
        raise EstimationError("all instruments are collinear with the controls")
    return _instrument_f(fs, surviving)


def _hansen(
    fit: IVFitResult,
    y: np.ndarray,
    design_orig: np.ndarray,
    z_excl: np.ndarray,
    w: np.ndarray,
) -> HansenResult:
    sw = np.sqrt(w)
    n_exog = design_orig.shape[1] - len(fit.endog_names)
    x_exog_w = design_orig[:, len(fit.endog_names) :] * sw[:, None] if n_exog else np.empty((len(y), 0))
    y_p = _partial_out(x_exog_w, y[:, None], sw)[:, 0]
    x_p = _partial_out(x_exog_w, design_orig[:, : len(fit.endog_names)], sw)
    z_p = _partial_out(x_exog_w, z_excl, sw)

    def moments(beta: np.ndarray) -> np.ndarray:
        e = y_p - x_p @ beta
        cols = z_p * (w * e)[:, None]
        g = np.empty((fit.n_clusters, z_p.shape[1]))
        for j in range(z_p.shape[1]):
            g[:, j] = np.bincount(
                fit.cluster_codes, weights=cols[:, j], minlength=fit.n_clusters
            )
        return g

    beta_2sls = fit.params[: len(fit.endog_names)]
    g1 = moments(beta_2sls)
    s_mat = g1.T @ g1
    s_inv = np.linalg.pinv(s_mat)
    zwx = z_p.T @ (x_p * w[:, None])
    zwy = z_p.T @ (w * y_p)
    lhs = zwx.T @ s_inv @ zwx
    rhs = zwx.T @ s_inv @ zwy
    try:
        beta_gmm = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        beta_gmm = np.linalg.pinv(lhs) @ rhs
    g2 = moments(beta_gmm).sum(axis=0)
    j_stat = max(float(g2 @ s_inv @ g2), 0.0)
    dof = z_excl.shape[1] - len(fit.endog_names)
    return HansenResult(statistic=j_stat, p=float(stats.chi2.sf(j_stat, dof)), dof=dof)


def hansen_j(fit: IVFitResult) -> HansenResult:
    """Two-step GMM overidentification test; errors when exactly identified."""
    if fit.hansen_j is None:
        raise NotOveridentifiedError(
            "model is exactly identified; the overidentification criterion is "
            "degenerately zero"
        )
    return fit.hansen_j
