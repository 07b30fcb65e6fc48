"""CSV ingestion/emission, interval-notation formatting, and result tables."""

from __future__ import annotations

import csv
import math
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .exceptions import ValidationError
from .simulation import SimulationSummary
from .weakiv import ConfidenceSet

_MISSING_TOKENS = {"", "na", "nan", "."}


def _is_missing(token: str) -> bool:
    return token.strip().lower() in _MISSING_TOKENS


def load_csv(
    path,
    categorical: Sequence[str] = (),
    numeric: Sequence[str] = (),
    require: Sequence[str] = (),
) -> Dataset:
    """Load a UTF-8 CSV with a header row into a typed dataset.

    Column types are inferred (all-parseable-as-float means numeric) unless
    forced via ``categorical``/``numeric`` hints. Columns listed in
    ``require`` must be complete: missing cells there fail with the offending
    row numbers. Unparseable cells in forced-numeric columns report their
    line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"'{path}': file is empty") from None
        rows = list(reader)
    if len(set(header)) != len(header):
        raise ValidationError(f"'{path}': duplicate column names in header")
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(
                f"'{path}': line {i + 2} has {len(row)} fields, expected {len(header)}"
            )
    for name in list(categorical) + list(numeric) + list(require):
        if name not in header:
            raise ValidationError(f"column '{name}' not found in '{path}'")
    columns: dict[str, object] = {}
    cat_names: list[str] = []
    for j, name in enumerate(header):
        tokens = [row[j] for row in rows]
        missing = [i for i, t in enumerate(tokens) if _is_missing(t)]
        if name in require and missing:
            where = ", ".join(str(i + 2) for i in missing[:3])
            raise ValidationError(
                f"column '{name}': {len(missing)} row(s) with missing values "
                f"rejected (first at line {where.split(',')[0]}; lines {where}"
                + (", ..." if len(missing) > 3 else "")
                + ")"
            )
        if name in categorical:
            columns[name] = np.array(tokens)
            cat_names.append(name)
            continue
        values = np.full(len(tokens), np.nan)
        failed: Optional[tuple[int, str]] = None
        for i, t in enumerate(tokens):
            if _is_missing(t):
                continue
            try:
                values[i] = float(t)
            except ValueError:
                failed = (i, t)
                break
        if failed is None:
            columns[name] = values
        elif name in numeric:
            raise ValidationError(
                f"column '{name}': cannot parse '{failed[1]}' as a number "
                f"(line {failed[0] + 2})"
            )
        else:
            columns[name] = np.array(tokens)
            cat_names.append(name)
    return Dataset.from_columns(columns, categorical=cat_names)


def write_dataset_csv(data: Dataset, path) -> None:
    """Emit a dataset as CSV; floats use shortest round-trip representation."""
    names = data.column_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        rendered = []
        for name in names:
            if data.is_categorical(name):
                cat = data.categorical(name)
                rendered.append([str(v) for v in cat.levels[cat.codes]])
            else:
                rendered.append([repr(float(v)) for v in data.numeric(name)])
        for i in range(data.n_rows):
            writer.writerow([col[i] for col in rendered])


# -- interval notation -------------------------------------------------------


def _format_number(x: float) -> str:
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return repr(float(x))


def format_confidence_set(cset: ConfidenceSet) -> str:
    """Render as e.g. ``[-0.58, 0.97]`` or ``(-inf, -0.37] U [0.04, inf)``."""
    if cset.is_empty:
        return "{}"
    parts = []
    for lo, hi in cset.intervals:
        left = "(" if math.isinf(lo) else "["
        right = ")" if math.isinf(hi) else "]"
        parts.append(f"{left}{_format_number(lo)}, {_format_number(hi)}{right}")
    return " U ".join(parts)


def parse_confidence_set(text: str, level: float = 0.95) -> ConfidenceSet:
    """Inverse of :func:`format_confidence_set`."""
    text = text.strip()
    if text == "{}":
        return ConfidenceSet(intervals=(), level=level)
    intervals = []
    for part in text.split(" U "):
        part = part.strip()
        if len(part) < 2 or part[0] not in "([" or part[-1] not in ")]":
            raise ValidationError(f"malformed interval '{part}'")
        body = part[1:-1].split(",")
        if len(body) != 2:
            raise ValidationError(f"malformed interval '{part}'")
        try:
            lo = float(body[0])
            hi = float(body[1])
        except ValueError:
            raise ValidationError(f"malformed interval '{part}'") from None
        if part[0] == "(" and not math.isinf(lo):
            raise ValidationError(f"finite ends must be closed in '{part}'")
        if part[-1] == ")" and not math.isinf(hi):
            raise ValidationError(f"finite ends must be closed in '{part}'")
        intervals.append((lo, hi))
    return ConfidenceSet(intervals=tuple(intervals), level=level)


# -- simulation summary rendering --------------------------------------------


def format_simulation_table(summary: SimulationSummary) -> str:
    cfg = summary.config
    lines = [
        f"simulation summary (rho={cfg.rho:g}, beta={cfg.beta:g}, "
        f"{summary.n_sims} sims, seed={cfg.seed})",
        "",
        f"{'supergroup sizes':38s}{'mean':>10s}{'sd':>10s}",
    ]
    for lab in ("decreasing", "flat", "increasing"):
        lines.append(
            f"  {lab:36s}{summary.size_mean[lab]:10.1f}{summary.size_sd[lab]:10.1f}"
        )
    lines.append("")
    lines.append(f"{'estimates of the effect':38s}{'mean':>10s}{'sd':>10s}{'sims':>8s}")
    for name, est in summary.estimate_rows():
        lines.append(
            f"  {name:36s}{est.mean:10.3f}{est.sd:10.3f}{est.completed:8d}"
        )
    return "\n".join(lines)


def write_simulation_csv(summary: SimulationSummary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "name", "mean", "sd", "completed"])
        for lab in ("decreasing", "flat", "increasing"):
            writer.writerow(
                [
                    "supergroup_size",
                    lab,
                    repr(summary.size_mean[lab]),
                    repr(summary.size_sd[lab]),
                    summary.n_sims,
                ]
            )
        for name, est in summary.estimate_rows():
            writer.writerow(
                ["estimate", name, repr(est.mean), repr(est.sd), est.completed]
            )


def write_coefficients_csv(fit, path) -> None:
    """Coefficient table (name, estimate, cluster_se, p) as CSV."""
    from scipy import stats

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "estimate", "cluster_se", "p"])
        for name in fit.names:
            est = fit.coef(name)
            se = fit.se(name)
            p = 2.0 * float(stats.norm.sf(abs(est / se))) if se > 0 else float("nan")
            writer.writerow([name, repr(est), repr(se), repr(p)])
