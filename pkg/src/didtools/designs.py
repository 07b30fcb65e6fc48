"""Cohort-based DID regressor construction and trend-break designs.

Builders turn a :class:`CohortFrame` (ages at baseline, group-level treatment
intensity) into named regressor columns with role tags, ready to append to a
:class:`~didtools.data.Dataset`:

- young/old experiment and its shifted placebo (binary post dummy),
- by-cohort interactions with a pooled pre-treatment block,
- piecewise-linear trend-break terms with a kink at a configurable age,
- control-by-cohort interactions.

Reference cohort convention: the youngest age is always the omitted
category, so by-cohort designs emit one column per cohort category minus
one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .data import Categorical, Dataset, FitResult, ModelSpec
from .estimation import coefficient_test, wald_test, wls_fit
from .exceptions import CollinearityError, ValidationError


@dataclass(frozen=True)
class CohortFrame:
    """Ages at baseline plus group-level treatment intensity.

    ``treatment`` must be constant within each group; ``young_range`` and
    ``old_range`` are inclusive and disjoint.
    """

    age: np.ndarray
    treatment: np.ndarray
    group: Categorical
    young_range: tuple[int, int]
    old_range: tuple[int, int]

    def __post_init__(self):
        age = np.asarray(self.age)
        if not np.all(age == np.round(age)):
            raise ValidationError("ages must be integers")
        object.__setattr__(self, "age", age.astype(np.int64))
        object.__setattr__(
            self, "treatment", np.asarray(self.treatment, dtype=np.float64)
        )
        ylo, yhi = self.young_range
        olo, ohi = self.old_range
        if ylo > yhi or olo > ohi:
            raise ValidationError("cohort ranges must be (low, high) with low <= high")
        if max(ylo, olo) <= min(yhi, ohi):
            raise ValidationError("young and old ranges must be disjoint")
        for g in range(self.group.n_levels):
            vals = self.treatment[self.group.codes == g]
            if vals.size and np.ptp(vals) > 1e-12 * max(1.0, np.max(np.abs(vals))):
                raise ValidationError(
                    f"treatment intensity varies within group "
                    f"'{self.group.levels[g]}'"
                )

    @classmethod
    def from_dataset(
        cls,
        data: Dataset,
        age: str,
        treatment: str,
        group: str,
        young_range: tuple[int, int],
        old_range: tuple[int, int],
    ) -> "CohortFrame":
        return cls(
            age=data.numeric(age),
            treatment=data.numeric(treatment),
            group=data.categorical(group),
            young_range=tuple(young_range),
            old_range=tuple(old_range),
        )


@dataclass(frozen=True)
class DesignProduct:
    """Generated regressor columns, their roles, and an optional row filter.

    Roles are 'interest', 'instrument', or 'control'.
    """

    columns: dict[str, np.ndarray]
    roles: dict[str, str]
    row_filter: Optional[np.ndarray] = None

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValidationError("design columns have inconsistent lengths")
        if set(self.columns) != set(self.roles):
            raise ValidationError("every design column needs exactly one role tag")

    def names(self, role: Optional[str] = None) -> tuple[str, ...]:
        if role is None:
            return tuple(self.columns)
        return tuple(n for n in self.columns if self.roles[n] == role)

    def apply(self, data: Dataset) -> Dataset:
        """Append the generated columns to ``data`` and apply the row filter."""
        out = data.with_columns(self.columns)
        if self.row_filter is not None:
            out = out.filter(self.row_filter)
        return out


def _in_range(age: np.ndarray, rng: tuple[int, int]) -> np.ndarray:
    return (age >= rng[0]) & (age <= rng[1])


def build_young_old(frame: CohortFrame, name: str = "treat_x_young") -> DesignProduct:
    """Treatment-by-young interaction plus the two-block sample filter."""
    young = _in_range(frame.age, frame.young_range)
    old = _in_range(frame.age, frame.old_range)
    if not young.any():
        raise ValidationError(f"no observations with age in {frame.young_range}")
    if not old.any():
        raise ValidationError(f"no observations with age in {frame.old_range}")
    column = frame.treatment * young.astype(np.float64)
    return DesignProduct(
        columns={name: column},
        roles={name: "interest"},
        row_filter=young | old,
    )


def build_placebo(
    frame: CohortFrame,
    placebo_old_range: tuple[int, int] = (18, 24),
    name: str = "treat_x_young",
) -> DesignProduct:
    """Placebo experiment: the old block becomes 'young', an older block 'old'."""
    shifted = replace(
        frame, young_range=frame.old_range, old_range=tuple(placebo_old_range)
    )
    return build_young_old(shifted, name=name)


def build_by_cohort(
    frame: CohortFrame,
    pooled_old_from: int,
    prefix: str = "treat_x",
    role: str = "interest",
) -> DesignProduct:
    """Treatment-by-cohort interactions with a pooled pre-treatment block.

    Ages below ``pooled_old_from`` get individual interaction columns; ages at
    or above it share one pooled column. The youngest age is the omitted
    reference, so the design has one column per cohort category minus one.
    With ``pooled_old_from`` above the oldest age this degenerates to the
    full-dummies variant (no pooled column).
    """
    ages = np.unique(frame.age)
    individual = [int(a) for a in ages if a < pooled_old_from]
    if not individual:
        raise ValidationError("no cohorts below the pooled block")
    has_pooled = bool((ages >= pooled_old_from).any())
    if not has_pooled and pooled_old_from <= int(ages.max()):
        raise ValidationError("no rows in the pooled cohort block")
    reference = individual[0]
    columns: dict[str, np.ndarray] = {}
    roles: dict[str, str] = {}
    for a in individual:
        if a == reference:
            continue
        col_name = f"{prefix}_age{a}"
        columns[col_name] = frame.treatment * (frame.age == a).astype(np.float64)
        roles[col_name] = role
    if has_pooled:
        col_name = f"{prefix}_old{pooled_old_from}"
        columns[col_name] = frame.treatment * (
            frame.age >= pooled_old_from
        ).astype(np.float64)
        roles[col_name] = role
    return DesignProduct(columns=columns, roles=roles, row_filter=None)


def build_cohort_controls(
    frame: CohortFrame, controls: Mapping[str, np.ndarray]
) -> DesignProduct:
    """Interact each control column with cohort dummies (reference omitted)."""
    ages = np.unique(frame.age)
    columns: dict[str, np.ndarray] = {}
    roles: dict[str, str] = {}
    for cname, values in controls.items():
        values = np.asarray(values, dtype=np.float64)
        for a in ages[1:]:
            col_name = f"{cname}_x_age{int(a)}"
            columns[col_name] = values * (frame.age == a).astype(np.float64)
            roles[col_name] = "control"
    return DesignProduct(columns=columns, roles=roles, row_filter=None)


def spline_term(
    age: Union[int, np.ndarray], kink: int = 12
) -> Union[float, np.ndarray]:
    """Piecewise-linear term ``max(0, kink - age)``: zero at and after the kink."""
    out = np.maximum(0.0, float(kink) - np.asarray(age, dtype=np.float64))
    if np.isscalar(age) or np.ndim(age) == 0:
        return float(out)
    return out


def build_spline_design(
    frame: CohortFrame,
    kink: int = 12,
    quadratic: bool = False,
    kink_role: str = "interest",
    prefix: str = "treat_x",
) -> DesignProduct:
    """Treatment-interacted trend plus a slope change emerging at the kink age.

    The linear trend (and the quadratic, when requested) are controls; the
    spline term carries the ``kink_role`` tag ('interest' for reduced forms,
    'instrument' in 2SLS designs).
    """
    age = frame.age.astype(np.float64)
    columns = {f"{prefix}_trend": frame.treatment * age}
    roles = {f"{prefix}_trend": "control"}
    if quadratic:
        columns[f"{prefix}_trend2"] = frame.treatment * age**2
        roles[f"{prefix}_trend2"] = "control"
    columns[f"{prefix}_kink{kink}"] = frame.treatment * spline_term(frame.age, kink)
    roles[f"{prefix}_kink{kink}"] = kink_role
    return DesignProduct(columns=columns, roles=roles, row_filter=None)


@dataclass(frozen=True)
class TrendBreakImpact:
    tau: float
    se: float
    t: float


def trend_break_impact(
    fit: FitResult, spline_column: str, horizon: int = 10
) -> TrendBreakImpact:
    """Implied full-exposure impact: the kink slope change times the horizon."""
    coef = fit.coef(spline_column)
    se = fit.se(spline_column)
    tau = horizon * coef
    tau_se = horizon * se
    t = tau / tau_se if tau_se > 0 else np.nan
    return TrendBreakImpact(tau=tau, se=tau_se, t=t)


def _frame_dataset(
    frame: CohortFrame,
    data: Dataset,
    outcome: str,
    design: DesignProduct,
    controls: Sequence[str],
    weights: Optional[str],
) -> tuple[Dataset, ModelSpec]:
    """Assemble the regression dataset for a cohort design fit."""
    cols = {outcome: data.numeric(outcome)}
    cols.update(design.columns)
    for c in controls:
        cols[c] = data.numeric(c)
    if weights:
        cols[weights] = data.numeric(weights)
    cols["_group"] = frame.group.levels[frame.group.codes]
    cols["_cohort"] = frame.age.astype(str)
    ds = Dataset.from_columns(cols, categorical=["_group", "_cohort"])
    if design.row_filter is not None:
        ds = ds.filter(design.row_filter)
    spec = ModelSpec(
        outcome=outcome,
        exog=design.names() + tuple(controls),
        fixed_effects=("_group", "_cohort"),
        cluster="_group",
        weights=weights,
    )
    return ds, spec


def fit_design(
    data: Dataset,
    frame: CohortFrame,
    design: DesignProduct,
    outcome: str,
    controls: Sequence[str] = (),
    weights: Optional[str] = None,
) -> FitResult:
    """Two-way fixed-effects fit of a generated design (group + cohort FE)."""
    ds, spec = _frame_dataset(frame, data, outcome, design, controls, weights)
    return wls_fit(ds, spec)


@dataclass(frozen=True)
class HorseraceResult:
    p_kink: float
    p_quadratic: float
    fit: FitResult


def horserace(
    data: Dataset,
    frame: CohortFrame,
    outcome: str,
    controls: Sequence[str] = (),
    kink: int = 12,
    weights: Optional[str] = None,
) -> HorseraceResult:
    """Omnibus trend-break-versus-quadratic fit.

    One regression containing the treatment-interacted linear trend,
    quadratic trend, and kink spline (plus fixed effects and controls);
    returns the cluster-robust p value for each model's distinctive term.
    """
    design = build_spline_design(frame, kink=kink, quadratic=True)
    fit = fit_design(data, frame, design, outcome, controls, weights)
    kink_name = f"treat_x_kink{kink}"
    quad_name = "treat_x_trend2"
    for name in (kink_name, quad_name):
        if name not in fit.names:
            raise CollinearityError(
                f"omnibus term '{name}' is collinear; the design needs more "
                "distinct ages on both sides of the kink"
            )
    return HorseraceResult(
        p_kink=coefficient_test(fit, kink_name).p,
        p_quadratic=coefficient_test(fit, quad_name).p,
        fit=fit,
    )


@dataclass(frozen=True)
class WeightEndogeneityResult:
    t_stat: float
    p: float
    fit: FitResult


def weight_endogeneity_test(
    data: Dataset, spec: ModelSpec, weight_column: str
) -> WeightEndogeneityResult:
    """Add the sampling-weight column to an unweighted refit and test it.

    A large cluster-robust t statistic indicates that sampling probability
    is related to the outcome, so unweighted fits are inconsistent.
    """
    if weight_column in spec.exog or weight_column in spec.endog:
        raise ValidationError(
            f"weight column '{weight_column}' is already a regressor"
        )
    test_spec = replace(spec, weights=None, exog=spec.exog + (weight_column,))
    fit = wls_fit(data, test_spec)
    if weight_column not in fit.names:
        raise CollinearityError(
            f"weight column '{weight_column}' is collinear with the regressors "
            "or fixed effects"
        )
    t = fit.tstat(weight_column)
    p = 2.0 * float(stats.norm.sf(abs(t)))
    return WeightEndogeneityResult(t_stat=t, p=p, fit=fit)


@dataclass(frozen=True)
class EqualityTestResult:
    statistic: float
    p: float
    coef_experiment: float
    coef_placebo: float


def placebo_equality_test(
    data: Dataset,
    frame: CohortFrame,
    outcome: str,
    controls: Sequence[str] = (),
    weights: Optional[str] = None,
    placebo_old_range: tuple[int, int] = (18, 24),
) -> EqualityTestResult:
    """Wald test that the experiment and placebo effects are equal.

    The two samples (which share the middle cohort block) are stacked into
    one regression with sample-specific interactions, fixed effects, and
    controls; clustering stays at the group level across both copies.
    """
    exp_design = build_young_old(frame)
    plac_design = build_placebo(frame, placebo_old_range)
    mask_e = exp_design.row_filter
    mask_p = plac_design.row_filter
    idx = np.concatenate([np.where(mask_e)[0], np.where(mask_p)[0]])
    n_e = int(mask_e.sum())
    sample = np.zeros(len(idx))
    sample[n_e:] = 1.0

    col_e = exp_design.columns["treat_x_young"]
    col_p = plac_design.columns["treat_x_young"]
    int_exp = np.concatenate([col_e[mask_e], np.zeros(int(mask_p.sum()))])
    int_plac = np.concatenate([np.zeros(n_e), col_p[mask_p]])

    tag = np.where(sample == 0.0, "e", "p")
    group_labels = frame.group.levels[frame.group.codes][idx].astype(str)
    age = frame.age[idx]
    cols = {
        outcome: data.numeric(outcome)[idx],
        "int_exp": int_exp,
        "int_plac": int_plac,
        "_group": group_labels,
        "_group_s": np.char.add(np.char.add(group_labels, "|"), tag),
        "_cohort_s": np.char.add(np.char.add(age.astype(str), "|"), tag),
    }
    exog = ["int_exp", "int_plac"]
    for cname in controls:
        vals = data.numeric(cname)[idx]
        for s, smask in (("e", sample == 0.0), ("p", sample == 1.0)):
            ages_in = np.unique(age[smask])
            for a in ages_in[1:]:
                col_name = f"{cname}_x_age{int(a)}|{s}"
                cols[col_name] = vals * ((age == a) & smask).astype(np.float64)
                exog.append(col_name)
    if weights:
        cols[weights] = data.numeric(weights)[idx]
    ds = Dataset.from_columns(cols, categorical=["_group", "_group_s", "_cohort_s"])
    spec = ModelSpec(
        outcome=outcome,
        exog=tuple(exog),
        fixed_effects=("_group_s", "_cohort_s"),
        cluster="_group",
        weights=weights,
    )
    fit = wls_fit(ds, spec)
    r_mat = np.zeros((1, len(fit.names)))
    r_mat[0, fit.index("int_exp")] = 1.0
    r_mat[0, fit.index("int_plac")] = -1.0
    wald = wald_test(fit, r_mat)
    return EqualityTestResult(
        statistic=wald.statistic,
        p=wald.p,
        coef_experiment=fit.coef("int_exp"),
        coef_placebo=fit.coef("int_plac"),
    )
