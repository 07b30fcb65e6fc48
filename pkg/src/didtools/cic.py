"""Changes-in-changes estimation at quantiles with functional tests.

The counterfactual construction follows the quantile-transport rule: a
treated pre-period outcome is mapped through the control group's pre-period
ECDF and then through the control group's post-period quantile function. The
ECDF is right-continuous and weighted; the quantile function is the
left-continuous generalized inverse. These conventions make small discrete
examples exactly enumerable.

Support: by default a transported value must lie inside the support of the
control pre-period cell; violations raise :class:`SupportError`. Passing
``on_violation='clip'`` clamps to the boundary instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from .exceptions import (
    CollinearityError,
    EstimationError,
    SupportError,
    ValidationError,
)

DEFAULT_PERCENTILES = tuple(np.arange(5, 100, 5) / 100.0)


class WeightedSample:
    """Sorted sample with cumulative weight fractions (last exactly 1)."""

    __slots__ = ("values", "cum", "total")

    def __init__(self, values: np.ndarray, weights: Optional[np.ndarray] = None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValidationError("cell samples must be non-empty vectors")
        if weights is None:
            weights = np.ones(values.size)
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != values.shape:
                raise ValidationError("weights must align with values")
            if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
                raise ValidationError("weights must be strictly positive and finite")
        order = np.argsort(values, kind="stable")
        self.values = values[order]
        self.total = float(weights.sum())
        cum = np.cumsum(weights[order]) / self.total
        cum[-1] = 1.0
        self.cum = cum

    @property
    def min(self) -> float:
        return float(self.values[0])

    @property
    def max(self) -> float:
        return float(self.values[-1])

    def cdf(self, y) -> np.ndarray:
        """Right-continuous weighted ECDF."""
        idx = np.searchsorted(self.values, np.asarray(y, dtype=np.float64), side="right")
        return np.where(idx > 0, self.cum[np.maximum(idx - 1, 0)], 0.0)

    def quantile(self, q) -> np.ndarray:
        """Left-continuous generalized inverse: min value with cdf >= q."""
        j = np.searchsorted(self.cum, np.asarray(q, dtype=np.float64), side="left")
        return self.values[np.minimum(j, self.values.size - 1)]


@dataclass(frozen=True)
class CellData:
    """Outcome samples for the 2x2 layout, with optional weights per cell."""

    control_pre: np.ndarray
    control_post: np.ndarray
    treated_pre: np.ndarray
    treated_post: np.ndarray
    w_control_pre: Optional[np.ndarray] = None
    w_control_post: Optional[np.ndarray] = None
    w_treated_pre: Optional[np.ndarray] = None
    w_treated_post: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("control_pre", "control_post", "treated_pre", "treated_post"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.size == 0:
                raise ValidationError(f"cell '{name}' is empty")
            object.__setattr__(self, name, arr)
            wname = f"w_{name}"
            w = getattr(self, wname)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if w.shape != arr.shape:
                    raise ValidationError(f"weights for '{name}' do not align")
                if np.any(w <= 0):
                    raise ValidationError(f"weights for '{name}' must be positive")
                object.__setattr__(self, wname, w)

    @classmethod
    def from_labels(
        cls,
        outcome: np.ndarray,
        treated: np.ndarray,
        post: np.ndarray,
        weights: Optional[np.ndarray] = None,
    ) -> "CellData":
        outcome = np.asarray(outcome, dtype=np.float64)
        treated = np.asarray(treated, dtype=bool)
        post = np.asarray(post, dtype=bool)
        cells = {}
        for name, mask in (
            ("control_pre", ~treated & ~post),
            ("control_post", ~treated & post),
            ("treated_pre", treated & ~post),
            ("treated_post", treated & post),
        ):
            cells[name] = outcome[mask]
            cells[f"w_{name}"] = None if weights is None else np.asarray(weights)[mask]
        return cls(**cells)


def cic_counterfactual(
    y: Union[float, np.ndarray],
    cell: CellData,
    on_violation: str = "error",
) -> Union[float, np.ndarray]:
    """Map value(s) through the control pre-period ECDF and post quantiles.

    ``on_violation`` is 'error' (default) or 'clip'. Errors mirror the
    estimator's identification requirement: the transported values must lie
    inside the support of the control pre-period outcome distribution.
    """
    scalar = np.isscalar(y) or np.ndim(y) == 0
    arr = np.atleast_1d(np.asarray(y, dtype=np.float64))
    pre = WeightedSample(cell.control_pre, cell.w_control_pre)
    post = WeightedSample(cell.control_post, cell.w_control_post)
    below = arr < pre.min
    above = arr > pre.max
    if below.any() or above.any():
        if on_violation == "error":
            raise SupportError(
                "the support of the control pre-period cell does not cover "
                f"{int(below.sum() + above.sum())} value(s) in "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        if on_violation != "clip":
            raise ValidationError("field 'on_violation' must be 'error' or 'clip'")
        arr = np.clip(arr, pre.min, pre.max)
    out = _kernels.ecdf_transport(
        np.ascontiguousarray(arr), pre.values, pre.cum, post.values, post.cum
    )
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class QuantileEffectCurve:
    """Treatment effects at percentiles, optionally with bootstrap bands."""

    percentiles: np.ndarray
    effects: np.ndarray
    ci_lower: Optional[np.ndarray] = None
    ci_upper: Optional[np.ndarray] = None
    replications: int = 0
    seed: int = 0

    def __post_init__(self):
        q = np.asarray(self.percentiles, dtype=np.float64)
        e = np.asarray(self.effects, dtype=np.float64)
        if q.ndim != 1 or q.shape != e.shape:
            raise ValidationError("percentiles and effects must be aligned vectors")
        if np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ValidationError("percentiles must be strictly ascending in (0, 1)")
        object.__setattr__(self, "percentiles", q)
        object.__setattr__(self, "effects", e)
        if self.ci_lower is not None:
            lo = np.asarray(self.ci_lower, dtype=np.float64)
            hi = np.asarray(self.ci_upper, dtype=np.float64)
            if np.any(lo > e + 1e-12) or np.any(hi < e - 1e-12):
                raise ValidationError("confidence bands must bracket the effects")
            object.__setattr__(self, "ci_lower", lo)
            object.__setattr__(self, "ci_upper", hi)


def _counterfactual_sample(cell: CellData, on_violation: str) -> WeightedSample:
    transported = cic_counterfactual(cell.treated_pre, cell, on_violation)
    return WeightedSample(transported, cell.w_treated_pre)


def cic_effects(
    cell: CellData,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    on_violation: str = "error",
) -> QuantileEffectCurve:
    """Quantile treatment effects: observed treated-post quantiles minus the
    counterfactual quantiles built from transported treated-pre outcomes."""
    q = np.asarray(percentiles, dtype=np.float64)
    cf = _counterfactual_sample(cell, on_violation)
    observed = WeightedSample(cell.treated_post, cell.w_treated_post)
    effects = observed.quantile(q) - cf.quantile(q)
    return QuantileEffectCurve(percentiles=q, effects=effects)


def cic_mean_change(cell: CellData, on_violation: str = "error") -> float:
    """Weighted mean of treated-post minus the counterfactual mean."""
    transported = cic_counterfactual(cell.treated_pre, cell, on_violation)
    mean_obs = np.average(cell.treated_post, weights=cell.w_treated_post)
    mean_cf = np.average(transported, weights=cell.w_treated_pre)
    return float(mean_obs - mean_cf)


def _resample_cell(
    cell: CellData,
    rng: np.random.Generator,
    cluster_ids: Optional["CellClusterIds"],
) -> CellData:
    if cluster_ids is None:
        parts = {}
        for name in ("control_pre", "control_post", "treated_pre", "treated_post"):
            arr = getattr(cell, name)
            w = getattr(cell, f"w_{name}")
            idx = rng.integers(0, arr.size, size=arr.size)
            parts[name] = arr[idx]
            parts[f"w_{name}"] = None if w is None else w[idx]
        return CellData(**parts)
    parts = {}
    for arm, (pre_name, post_name) in (
        ("control", ("control_pre", "control_post")),
        ("treated", ("treated_pre", "treated_post")),
    ):
        ids_pre = np.asarray(getattr(cluster_ids, pre_name))
        ids_post = np.asarray(getattr(cluster_ids, post_name))
        clusters = np.unique(np.concatenate([ids_pre, ids_post]))
        for attempt in range(100):
            chosen = rng.choice(clusters, size=clusters.size, replace=True)
            sel_pre = np.concatenate(
                [np.where(ids_pre == c)[0] for c in chosen]
            )
            sel_post = np.concatenate(
                [np.where(ids_post == c)[0] for c in chosen]
            )
            if sel_pre.size and sel_post.size:
                break
        else:
            raise EstimationError(
                f"cluster resampling cannot populate both periods of the {arm} arm"
            )
        for name, sel in ((pre_name, sel_pre), (post_name, sel_post)):
            arr = getattr(cell, name)
            w = getattr(cell, f"w_{name}")
            parts[name] = arr[sel]
            parts[f"w_{name}"] = None if w is None else w[sel]
    return CellData(**parts)


@dataclass(frozen=True)
class CellClusterIds:
    """Cluster labels aligned with each cell, for group-level resampling."""

    control_pre: np.ndarray
    control_post: np.ndarray
    treated_pre: np.ndarray
    treated_post: np.ndarray


def bootstrap_effect_cis(
    cell: CellData,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    cluster_ids: Optional[CellClusterIds] = None,
    replications: int = 999,
    seed: int = 0,
    level: float = 0.95,
    on_violation: str = "error",
) -> QuantileEffectCurve:
    """Percentile-method bootstrap bands around the quantile effects.

    Resampling is at the cluster level when ``cluster_ids`` is given,
    otherwise observations are resampled independently within each cell.
    """
    curve = cic_effects(cell, percentiles, on_violation)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    draws = np.empty((replications, curve.percentiles.size))
    for b in range(replications):
        boot_cell = _resample_cell(cell, rng, cluster_ids)
        draws[b] = cic_effects(boot_cell, percentiles, "clip").effects
    alpha = 1.0 - level
    lo = np.quantile(draws, alpha / 2, axis=0)
    hi = np.quantile(draws, 1 - alpha / 2, axis=0)
    return QuantileEffectCurve(
        percentiles=curve.percentiles,
        effects=curve.effects,
        ci_lower=np.minimum(lo, curve.effects),
        ci_upper=np.maximum(hi, curve.effects),
        replications=replications,
        seed=seed,
    )


def covariate_adjusted_outcome(
    outcome: np.ndarray,
    covariates: np.ndarray,
    treated: np.ndarray,
    post: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Outcome net of the pooled-regression covariate contribution.

    Regresses the outcome on the four cell intercepts plus covariates
    (weighted) and subtracts the fitted covariate part, leaving the cell
    structure intact. The adjustment is a linear approximation: covariate
    effects are assumed common across cells.
    """
    outcome = np.asarray(outcome, dtype=np.float64)
    covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if covariates.shape[0] != outcome.shape[0]:
        covariates = covariates.T
    treated = np.asarray(treated, dtype=bool)
    post = np.asarray(post, dtype=bool)
    w = np.ones(outcome.size) if weights is None else np.asarray(weights, dtype=np.float64)
    cells = np.column_stack(
        [
            (~treated & ~post),
            (~treated & post),
            (treated & ~post),
            (treated & post),
        ]
    ).astype(np.float64)
    design = np.column_stack([cells, covariates])
    sw = np.sqrt(w)
    if np.linalg.matrix_rank(design * sw[:, None]) < design.shape[1]:
        raise CollinearityError("covariates are collinear with the cell structure")
    coefs, *_ = np.linalg.lstsq(design * sw[:, None], outcome * sw, rcond=None)
    return outcome - covariates @ coefs[4:]


def cic_with_covariates(
    outcome: np.ndarray,
    covariates: np.ndarray,
    treated: np.ndarray,
    post: np.ndarray,
    weights: Optional[np.ndarray] = None,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    on_violation: str = "error",
) -> QuantileEffectCurve:
    """Covariate-adjusted CIC: quantile transport on residualized outcomes.

    See :func:`covariate_adjusted_outcome` for the two-step adjustment.
    """
    adjusted = covariate_adjusted_outcome(outcome, covariates, treated, post, weights)
    cell = CellData.from_labels(
        adjusted, np.asarray(treated, dtype=bool), np.asarray(post, dtype=bool), weights
    )
    return cic_effects(cell, percentiles, on_violation)


@dataclass(frozen=True)
class CvmTests:
    """Functional test p values over the percentile grid."""

    p_no_effect: float
    p_all_positive: float
    p_all_negative: float
    replications: int
    seed: int


def cvm_tests(
    curve: QuantileEffectCurve,
    cell: CellData,
    replications: int = 999,
    seed: int = 0,
    cluster_ids: Optional[CellClusterIds] = None,
) -> CvmTests:
    """Cramer-von Mises style functional tests on the effect curve.

    The no-effect functional is the mean squared effect across percentiles;
    the one-sided functionals penalize only violations of all-positive or
    all-negative effects. Null distributions come from the bootstrap of the
    recentered functional (resampled curve minus the observed one).
    """
    q = curve.percentiles
    observed = curve.effects

    def functionals(e: np.ndarray) -> tuple[float, float, float]:
        return (
            float(np.mean(e**2)),
            float(np.mean(np.minimum(e, 0.0) ** 2)),
            float(np.mean(np.maximum(e, 0.0) ** 2)),
        )

    t_no, t_pos, t_neg = functionals(observed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    hits = np.zeros(3)
    for _ in range(replications):
        boot_cell = _resample_cell(cell, rng, cluster_ids)
        recentered = cic_effects(boot_cell, q, "clip").effects - observed
        b_no, b_pos, b_neg = functionals(recentered)
        hits += (b_no >= t_no, b_pos >= t_pos, b_neg >= t_neg)
    denom = replications + 1.0
    return CvmTests(
        p_no_effect=float((1 + hits[0]) / denom),
        p_all_positive=float((1 + hits[1]) / denom),
        p_all_negative=float((1 + hits[2]) / denom),
        replications=replications,
        seed=seed,
    )


def high_treatment_split(
    group_treatment: np.ndarray,
    group_covariate: np.ndarray,
    on_constant_covariate: str = "error",
) -> np.ndarray:
    """Tag groups as high treatment by the sign of a cross-group residual.

    Regresses treatment on the covariate (with intercept) across groups;
    a group is high-treatment iff its residual is strictly positive. With a
    constant covariate the regression is undefined; pass
    ``on_constant_covariate='intercept_only'`` to fall back to demeaning.
    """
    t = np.asarray(group_treatment, dtype=np.float64)
    c = np.asarray(group_covariate, dtype=np.float64)
    if t.shape != c.shape or t.ndim != 1:
        raise ValidationError("group treatment and covariate must be aligned vectors")
    if t.size < 2:
        raise ValidationError("need at least 2 groups")
    if np.ptp(c) == 0.0:
        if on_constant_covariate == "intercept_only":
            resid = t - t.mean()
            return resid > 0
        raise ValidationError("group covariate is constant")
    design = np.column_stack([np.ones(t.size), c])
    coefs, *_ = np.linalg.lstsq(design, t, rcond=None)
    resid = t - design @ coefs
    return resid > 0


def write_quantile_csv(curve: QuantileEffectCurve, path) -> None:
    """CSV export (percentile, effect, lo, hi) for external plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("percentile,effect,lo,hi\n")
        for i, (q, e) in enumerate(zip(curve.percentiles, curve.effects)):
            lo = "" if curve.ci_lower is None else repr(float(curve.ci_lower[i]))
            hi = "" if curve.ci_upper is None else repr(float(curve.ci_upper[i]))
            fh.write(f"{q!r},{e!r},{lo},{hi}\n")
