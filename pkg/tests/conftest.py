import csv
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def build_survey_rows(seed=42, n_groups=40, rows_per_group=40):
    """Synthetic cohort survey with a planted schooling effect of 0.8."""
    rng = np.random.default_rng(seed)
    n = n_groups * rows_per_group
    group = np.repeat(np.arange(n_groups), rows_per_group)
    age = rng.integers(2, 25, size=n)
    inpres = rng.uniform(0.0, 2.5, size=n_groups)[group]
    nchild = rng.uniform(10.0, 60.0, size=n_groups)[group]
    young = (age >= 2) & (age <= 6)
    g_eff = rng.normal(size=n_groups)[group]
    schooling = (
        6.0 + 0.8 * inpres * young + 0.3 * g_eff - 0.05 * age + rng.normal(size=n)
    )
    lwage = 0.08 * schooling + 0.5 * g_eff + 0.02 * age + 0.6 * rng.normal(size=n)
    weights = rng.uniform(0.5, 2.0, size=n)
    header = ["regency", "age74", "inpres", "nchild", "schooling", "lwage", "w"]
    rows = [
        [
            f"R{group[i]:03d}",
            str(age[i]),
            repr(float(inpres[i])),
            repr(float(nchild[i])),
            repr(float(schooling[i])),
            repr(float(lwage[i])),
            repr(float(weights[i])),
        ]
        for i in range(n)
    ]
    return header, rows


def write_survey_csv(path, seed=42, n_groups=40, rows_per_group=40):
    header, rows = build_survey_rows(seed, n_groups, rows_per_group)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


@pytest.fixture
def survey_csv(tmp_path):
    return write_survey_csv(tmp_path / "survey.csv")


@pytest.fixture
def write_spec(tmp_path):
    def _write(name, **fields):
        path = tmp_path / name
        lines = [f"{key} = {value}" for key, value in fields.items()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write
