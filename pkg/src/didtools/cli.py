"""Command-line interface.

Subcommands: ``fit`` (reduced-form cohort designs), ``iv`` (2SLS with
design-generated or explicit instruments), ``ar-curve`` (trial-value
confidence curve), ``cic`` (quantile treatment effects), ``simulate``
(the endogenous-treatment Monte Carlo study), and ``horserace`` (kink vs
quadratic omnibus test). Each takes a plain-text spec file; common flags are
``--spec``, ``--seed``, ``--threads``, ``--out-dir``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .cic import (
    CellClusterIds,
    CellData,
    bootstrap_effect_cis,
    covariate_adjusted_outcome,
    cvm_tests,
    high_treatment_split,
    write_quantile_csv,
)
from .data import Dataset, ModelSpec
from .designs import (
    CohortFrame,
    DesignProduct,
    build_by_cohort,
    build_cohort_controls,
    build_placebo,
    build_spline_design,
    build_young_old,
    fit_design,
    horserace,
    placebo_equality_test,
    trend_break_impact,
    weight_endogeneity_test,
)
from .exceptions import (
    AbsorptionError,
    CollinearityError,
    DidtoolsError,
    EstimationError,
    SupportError,
    ValidationError,
)
from .io import (
    format_confidence_set,
    format_simulation_table,
    load_csv,
    write_coefficients_csv,
    write_simulation_csv,
)
from .iv import tsls_fit
from .simulation import SimConfig, run_simulation
from .specfile import DESIGNS, SpecFile
from .weakiv import ARBootstrap, confidence_curve, extract_confidence_set, write_curve_csv

_NUMERICAL_ERRORS = (
    AbsorptionError,
    CollinearityError,
    EstimationError,
    SupportError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


@dataclass
class RunReport:
    """Text report assembled by a command; rendered to standard output."""

    command: str
    spec_echo: list[tuple[str, str]] = field(default_factory=list)
    coefficients: list[tuple[str, float, float, float]] = field(default_factory=list)
    diagnostics: list[tuple[str, str]] = field(default_factory=list)
    confidence_sets: list[tuple[str, str]] = field(default_factory=list)
    body: list[str] = field(default_factory=list)
    emitted: list[str] = field(default_factory=list)

    def render(self) -> str:
        lines = [f"didtools {self.command} report", "=" * (len(self.command) + 16)]
        lines.append("spec:")
        for key, value in self.spec_echo:
            lines.append(f"  {key} = {value}")
        if self.coefficients:
            lines.append("coefficients:")
            lines.append(f"  {'name':28s}{'estimate':>14s}{'cluster_se':>14s}{'p':>10s}")
            for name, est, se, p in self.coefficients:
                lines.append(f"  {name:28s}{est:>14.6g}{se:>14.6g}{p:>10.4f}")
        if self.diagnostics:
            lines.append("diagnostics:")
            for key, value in self.diagnostics:
                lines.append(f"  {key} = {value}")
        if self.confidence_sets:
            lines.append("confidence sets:")
            for name, rendered in self.confidence_sets:
                lines.append(f"  {name}: {rendered}")
        lines.extend(self.body)
        if self.emitted:
            lines.append("emitted:")
            for path in self.emitted:
                lines.append(f"  {path}")
        return "\n".join(lines) + "\n"


def _echo(spec: SpecFile, seed: Optional[int] = None) -> list[tuple[str, str]]:
    echo = sorted(spec.values.items())
    if seed is not None:
        echo = [(k, v) for k, v in echo if k != "seed"] + [("seed", str(seed))]
        echo.sort()
    return echo


def _coefficient_rows(fit) -> list[tuple[str, float, float, float]]:
    rows = []
    for name in fit.names:
        est = fit.coef(name)
        se = fit.se(name)
        p = 2.0 * float(stats.norm.sf(abs(est / se))) if se > 0 else float("nan")
        rows.append((name, est, se, p))
    return rows


def _load_data(spec: SpecFile, referenced: list[str]) -> Dataset:
    group = spec.get_str("group", required=True)
    categorical = [group]
    referenced = [c for c in referenced if c]
    data = load_csv(
        spec.data_path(), categorical=categorical, require=sorted(set(referenced))
    )
    if spec.get_bool("intercept"):
        data = data.with_columns({"const": np.ones(data.n_rows)})
    return data


def _frame(spec: SpecFile, data: Dataset) -> CohortFrame:
    return CohortFrame.from_dataset(
        data,
        age=spec.get_str("age", required=True),
        treatment=spec.get_str("treatment", required=True),
        group=spec.get_str("group", required=True),
        young_range=spec.get_int_pair("young_range", default=(2, 6)),
        old_range=spec.get_int_pair("old_range", default=(12, 17)),
    )


def _merge_products(*products: DesignProduct) -> DesignProduct:
    columns: dict[str, np.ndarray] = {}
    roles: dict[str, str] = {}
    row_filter = None
    for product in products:
        for name in product.columns:
            if name in columns:
                raise ValidationError(f"design column '{name}' generated twice")
        columns.update(product.columns)
        roles.update(product.roles)
        if product.row_filter is not None:
            row_filter = product.row_filter
    return DesignProduct(columns=columns, roles=roles, row_filter=row_filter)


def _design_product(
    spec: SpecFile, frame: CohortFrame, as_instrument: bool
) -> DesignProduct:
    design = spec.get_str("design", required=True, choices=DESIGNS)
    kink = spec.get_int("kink", default=12)
    role = "instrument" if as_instrument else "interest"
    if design == "young_old":
        product = build_young_old(frame)
    elif design == "placebo":
        product = build_placebo(
            frame, spec.get_int_pair("placebo_old_range", default=(18, 24))
        )
    elif design == "by_cohort":
        product = build_by_cohort(
            frame, spec.get_int("pooled_old_from", required=True), role=role
        )
        return product
    elif design == "spline":
        return build_spline_design(frame, kink=kink, kink_role=role)
    elif design == "quadratic":
        return build_spline_design(frame, kink=kink, quadratic=True, kink_role=role)
    else:
        raise ValidationError("field 'design': 'omnibus' runs via the horserace command")
    if as_instrument:
        roles = {name: "instrument" for name in product.columns}
        return DesignProduct(product.columns, roles, product.row_filter)
    return product


def _controls_product(
    spec: SpecFile, frame: CohortFrame, data: Dataset
) -> Optional[DesignProduct]:
    controls = spec.get_list("controls")
    if not controls:
        return None
    return build_cohort_controls(
        frame, {name: data.numeric(name) for name in controls}
    )


def _iv_table(
    spec: SpecFile, data: Dataset, frame: CohortFrame
) -> tuple[Dataset, ModelSpec]:
    """Dataset + model spec for the 2SLS and trial-value commands."""
    outcome = spec.get_str("outcome", required=True)
    endog = spec.get_str("endog", required=True)
    weights = spec.get_str("weights")
    if spec.has("design"):
        inst_product = _design_product(spec, frame, as_instrument=True)
    else:
        explicit = spec.get_list("instruments")
        if not explicit:
            raise ValidationError(
                "field 'instruments': required when no design is given"
            )
        inst_product = DesignProduct(
            columns={name: data.numeric(name) for name in explicit},
            roles={name: "instrument" for name in explicit},
        )
    products = [inst_product]
    controls = _controls_product(spec, frame, data)
    if controls is not None:
        products.append(controls)
    merged = _merge_products(*products)
    cols = {outcome: data.numeric(outcome), endog: data.numeric(endog)}
    cols.update(merged.columns)
    for name in spec.get_list("exog"):
        cols[name] = data.numeric(name)
    if weights:
        cols[weights] = data.numeric(weights)
    cols["_group"] = frame.group.levels[frame.group.codes]
    cols["_cohort"] = frame.age.astype(str)
    table = Dataset.from_columns(cols, categorical=["_group", "_cohort"])
    if merged.row_filter is not None:
        table = table.filter(merged.row_filter)
    model = ModelSpec(
        outcome=outcome,
        exog=merged.names("control") + spec.get_list("exog"),
        endog=(endog,),
        instruments=merged.names("instrument"),
        fixed_effects=("_group", "_cohort"),
        cluster="_group",
        weights=weights,
    )
    return table, model


def _referenced_columns(spec: SpecFile) -> list[str]:
    names = [
        spec.get_str("outcome"),
        spec.get_str("endog"),
        spec.get_str("age"),
        spec.get_str("treatment"),
        spec.get_str("group"),
        spec.get_str("weights"),
        spec.get_str("group_covariate"),
    ]
    for key in ("controls", "covariates", "exog", "instruments"):
        names.extend(spec.get_list(key))
    return [n for n in names if n]


# -- commands -----------------------------------------------------------------


def _cmd_fit(spec: SpecFile, seed, threads, out_dir: Path) -> RunReport:
    report = RunReport(command="fit", spec_echo=_echo(spec))
    data = _load_data(spec, _referenced_columns(spec))
    frame = _frame(spec, data)
    outcome = spec.get_str("outcome", required=True)
    weights = spec.get_str("weights")
    design_name = spec.get_str("design", required=True, choices=DESIGNS)
    product = _design_product(spec, frame, as_instrument=False)
    controls = _controls_product(spec, frame, data)
    merged = _merge_products(*filter(None, [product, controls]))
    fit = fit_design(data, frame, merged, outcome, controls=(), weights=weights)
    report.coefficients = _coefficient_rows(fit)
    if design_name in ("spline", "quadratic"):
        kink = spec.get_int("kink", default=12)
        horizon = spec.get_int("horizon", default=10)
        impact = trend_break_impact(fit, f"treat_x_kink{kink}", horizon)
        report.diagnostics.append(("tau", f"{impact.tau:.6g}"))
        report.diagnostics.append(("tau_se", f"{impact.se:.6g}"))
        report.diagnostics.append(("tau_t", f"{impact.t:.4f}"))
    if spec.get_bool("test_placebo_equality"):
        eq = placebo_equality_test(
            data,
            frame,
            outcome,
            controls=spec.get_list("controls"),
            weights=weights,
            placebo_old_range=spec.get_int_pair("placebo_old_range", default=(18, 24)),
        )
        report.diagnostics.append(("experiment_eq_placebo_p", f"{eq.p:.4f}"))
    if spec.get_bool("test_weight_endogeneity"):
        if not weights:
            raise ValidationError(
                "field 'test_weight_endogeneity': needs a 'weights' column"
            )
        from .designs import _frame_dataset

        table, model = _frame_dataset(
            frame, data, outcome, merged, (), weights
        )
        wtest = weight_endogeneity_test(table, model, weights)
        report.diagnostics.append(("weight_endogeneity_t", f"{wtest.t_stat:.4f}"))
        report.diagnostics.append(("weight_endogeneity_p", f"{wtest.p:.4f}"))
    out = out_dir / "coefficients.csv"
    write_coefficients_csv(fit, out)
    report.emitted.append(out.name)
    return report


def _cmd_iv(spec: SpecFile, seed, threads, out_dir: Path) -> RunReport:
    data = _load_data(spec, _referenced_columns(spec))
    frame = _frame(spec, data)
    table, model = _iv_table(spec, data, frame)
    fit = tsls_fit(table, model)
    report = RunReport(command="iv", spec_echo=_echo(spec))
    report.coefficients = _coefficient_rows(fit)
    if fit.kp_f is not None:
        report.diagnostics.append(("kp_f", f"{fit.kp_f:.4f}"))
    if fit.hansen_j is not None:
        report.diagnostics.append(("hansen_j", f"{fit.hansen_j.statistic:.4f}"))
        report.diagnostics.append(("hansen_p", f"{fit.hansen_j.p:.4f}"))
    out = out_dir / "coefficients.csv"
    write_coefficients_csv(fit, out)
    report.emitted.append(out.name)
    if spec.has("replications"):
        curve, cset = _ar_curve(spec, table, model, seed, threads)
        report.confidence_sets.append(
            (
                model.endog[0],
                f"{format_confidence_set(cset)}  (level {cset.level:g}, "
                f"replications {curve.replications}, seed {curve.seed})",
            )
        )
        curve_path = out_dir / "curve.csv"
        write_curve_csv(curve, curve_path)
        report.emitted.append(curve_path.name)
    return report


def _ar_curve(spec: SpecFile, table: Dataset, model: ModelSpec, seed, threads):
    replications = spec.get_int("replications", default=999)
    if replications < 1:
        raise ValidationError("field 'replications': must be >= 1")
    resolved_seed = spec.seed(seed)
    grid_spec = spec.get_float_list("grid")
    grid = None
    if grid_spec:
        if len(grid_spec) != 3 or int(grid_spec[2]) < 1:
            raise ValidationError("field 'grid': expected 'low high points'")
        grid = np.linspace(grid_spec[0], grid_spec[1], int(grid_spec[2]))
    curve = confidence_curve(
        table,
        model,
        grid=grid,
        replications=replications,
        seed=resolved_seed,
        threads=threads,
    )
    level = spec.get_float("level", default=0.95)
    prep = ARBootstrap(table, model)
    if prep.should_enumerate(replications):
        refine = lambda b0: prep.bootstrap_p(b0, replications, enumeration="always")
    else:
        shared = prep.draw_weights(replications, resolved_seed)
        refine = lambda b0: prep.bootstrap_p(b0, weights_matrix=shared)
    cset = extract_confidence_set(curve, level=level, refine=refine)
    return curve, cset


def _cmd_ar_curve(spec: SpecFile, seed, threads, out_dir: Path) -> RunReport:
    data = _load_data(spec, _referenced_columns(spec))
    frame = _frame(spec, data)
    table, model = _iv_table(spec, data, frame)
    curve, cset = _ar_curve(spec, table, model, seed, threads)
    report = RunReport(
        command="ar-curve", spec_echo=_echo(spec, spec.seed(seed))
    )
    report.confidence_sets.append(
        (
            model.endog[0],
            f"{format_confidence_set(cset)}  (level {cset.level:g}, "
            f"replications {curve.replications}, seed {curve.seed})",
        )
    )
    out = out_dir / "curve.csv"
    write_curve_csv(curve, out)
    report.emitted.append(out.name)
    return report


def _cmd_cic(spec: SpecFile, seed, threads, out_dir: Path) -> RunReport:
    data = _load_data(spec, _referenced_columns(spec))
    frame = _frame(spec, data)
    outcome = spec.get_str("outcome", required=True)
    weights_col = spec.get_str("weights")
    covariate_col = spec.get_str("group_covariate", required=True)

    # group-level treatment intensity and covariate for the high/low split
    codes = frame.group.codes
    n_groups = frame.group.n_levels
    counts = np.bincount(codes, minlength=n_groups)
    g_treat = np.bincount(codes, weights=frame.treatment, minlength=n_groups) / counts
    g_cov = (
        np.bincount(codes, weights=data.numeric(covariate_col), minlength=n_groups)
        / counts
    )
    high = high_treatment_split(g_treat, g_cov)

    young = (frame.age >= frame.young_range[0]) & (frame.age <= frame.young_range[1])
    old = (frame.age >= frame.old_range[0]) & (frame.age <= frame.old_range[1])
    rows = young | old
    post = young[rows]  # analytical time runs from the old to the young block
    treated = high[codes[rows]]
    outcome_values = data.numeric(outcome)[rows]
    weights = data.numeric(weights_col)[rows] if weights_col else None

    percentiles = tuple(
        q / 100.0 for q in spec.get_float_list("percentiles", default=range(5, 100, 5))
    )
    covariates = spec.get_list("covariates")
    if covariates:
        cov_matrix = np.column_stack([data.numeric(c)[rows] for c in covariates])
        outcome_values = covariate_adjusted_outcome(
            outcome_values, cov_matrix, treated, post, weights
        )
    cell = CellData.from_labels(outcome_values, treated, post, weights)
    group_rows = codes[rows]
    ids = CellClusterIds(
        control_pre=group_rows[~treated & ~post],
        control_post=group_rows[~treated & post],
        treated_pre=group_rows[treated & ~post],
        treated_post=group_rows[treated & post],
    )
    replications = spec.get_int("replications", default=999)
    resolved_seed = spec.seed(seed)
    on_violation = spec.get_str("support", default="error", choices=("error", "clip"))
    curve = bootstrap_effect_cis(
        cell,
        percentiles,
        cluster_ids=ids,
        replications=replications,
        seed=resolved_seed,
        level=spec.get_float("level", default=0.95),
        on_violation=on_violation,
    )
    tests = cvm_tests(
        curve, cell, replications=replications, seed=resolved_seed, cluster_ids=ids
    )
    report = RunReport(command="cic", spec_echo=_echo(spec, resolved_seed))
    report.diagnostics = [
        ("n_high_treatment_groups", str(int(high.sum()))),
        ("n_low_treatment_groups", str(int((~high).sum()))),
        ("cvm_p_no_effect", f"{tests.p_no_effect:.4f}"),
        ("cvm_p_all_positive", f"{tests.p_all_positive:.4f}"),
        ("cvm_p_all_negative", f"{tests.p_all_negative:.4f}"),
    ]
    report.body.append("quantile effects:")
    report.body.append(f"  {'percentile':>10s}{'effect':>14s}{'lo':>14s}{'hi':>14s}")
    for i, q in enumerate(curve.percentiles):
        report.body.append(
            f"  {q:>10.2f}{curve.effects[i]:>14.6g}"
            f"{curve.ci_lower[i]:>14.6g}{curve.ci_upper[i]:>14.6g}"
        )
    out = out_dir / "quantile_effects.csv"
    write_quantile_csv(curve, out)
    report.emitted.append(out.name)
    return report


def _cmd_simulate(spec: SpecFile, seed, threads, out_dir: Path) -> RunReport:
    resolved_seed = spec.seed(seed)
    config = SimConfig(
        n_groups=spec.get_int("n_groups", default=100),
        n_per_group=spec.get_int("n_per_group", default=100),
        rho=spec.get_float("rho", default=0.0),
        beta=spec.get_float("beta", default=0.0),
        n_sims=spec.get_int("n_sims", default=100),
        p_threshold=spec.get_float("p_threshold", default=0.5),
        seed=resolved_seed,
        trend_test=spec.get_str(
            "trend_test", default="chi2", choices=("chi2", "t", "contingency")
        ),
    )
    summary = run_simulation(config, threads=threads)
    report = RunReport(command="simulate", spec_echo=_echo(spec, resolved_seed))
    report.body.extend(format_simulation_table(summary).splitlines())
    out = out_dir / "simulation.csv"
    write_simulation_csv(summary, out)
    report.emitted.append(out.name)
    return report


def _cmd_horserace(spec: SpecFile, seed, threads, out_dir: Path) -> RunReport:
    data = _load_data(spec, _referenced_columns(spec))
    frame = _frame(spec, data)
    outcome = spec.get_str("outcome", required=True)
    weights = spec.get_str("weights")
    control_names: list[str] = []
    controls = _controls_product(spec, frame, data)
    if controls is not None:
        data = data.with_columns(controls.columns)
        control_names = list(controls.columns)
    result = horserace(
        data,
        frame,
        outcome,
        controls=control_names,
        kink=spec.get_int("kink", default=12),
        weights=weights,
    )
    report = RunReport(command="horserace", spec_echo=_echo(spec))
    report.coefficients = _coefficient_rows(result.fit)
    report.diagnostics = [
        ("p_kink", f"{result.p_kink:.4f}"),
        ("p_quadratic", f"{result.p_quadratic:.4f}"),
    ]
    out = out_dir / "coefficients.csv"
    write_coefficients_csv(result.fit, out)
    report.emitted.append(out.name)
    return report


_COMMANDS = {
    "fit": _cmd_fit,
    "iv": _cmd_iv,
    "ar-curve": _cmd_ar_curve,
    "cic": _cmd_cic,
    "simulate": _cmd_simulate,
    "horserace": _cmd_horserace,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="didtools",
        description="Cohort DID designs, cluster-robust 2SLS, weak-instrument "
        "bootstrap inference, and changes-in-changes estimation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--spec", required=True, help="path to a key=value spec file")
        cmd.add_argument("--seed", type=int, default=None, help="override the spec seed")
        cmd.add_argument("--threads", type=int, default=1, help="worker thread cap")
        cmd.add_argument("--out-dir", default=".", help="directory for emitted CSVs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = SpecFile.parse(args.spec)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        report = _COMMANDS[args.command](spec, args.seed, args.threads, out_dir)
    except ValidationError as err:
        print(f"didtools: validation error: {err}", file=sys.stderr)
        return 1
    except _NUMERICAL_ERRORS as err:
        print(f"didtools: numerical failure: {err}", file=sys.stderr)
        return 2
    except DidtoolsError as err:
        print(f"didtools: error: {err}", file=sys.stderr)
        return 2
    sys.stdout.write(report.render())
    return 0


if __name__ == "__main__":
    sys.exit(main())
