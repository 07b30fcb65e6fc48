"""Plain-text key-value spec files describing a full analysis run.

Format: one ``key = value`` pair per line; ``#`` starts a comment; list
values are whitespace- or comma-separated. Every validation failure names
the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .exceptions import ValidationError

DESIGNS = ("young_old", "placebo", "by_cohort", "spline", "quadratic", "omnibus")

KNOWN_FIELDS = {
    "data",
    "design",
    "outcome",
    "exog",
    "endog",
    "instruments",
    "controls",
    "cluster",
    "weights",
    "intercept",
    "age",
    "treatment",
    "group",
    "young_range",
    "old_range",
    "placebo_old_range",
    "pooled_old_from",
    "kink",
    "horizon",
    "replications",
    "seed",
    "grid",
    "level",
    "percentiles",
    "covariates",
    "group_covariate",
    "support",
    "test_placebo_equality",
    "test_weight_endogeneity",
    "rho",
    "beta",
    "n_groups",
    "n_per_group",
    "n_sims",
    "p_threshold",
    "trend_test",
}


@dataclass
class SpecFile:
    """Parsed key-value document with typed, validating accessors."""

    values: dict[str, str]
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def parse(cls, path) -> "SpecFile":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as err:
            raise ValidationError(f"cannot read spec file '{path}': {err}") from None
        spec = cls.parse_text(text)
        spec.base_dir = path.parent
        return spec

    @classmethod
    def parse_text(cls, text: str) -> "SpecFile":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(
                    f"line {lineno}: expected 'key = value', got '{raw.strip()}'"
                )
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ValidationError(f"line {lineno}: empty field name")
            if key not in KNOWN_FIELDS:
                raise ValidationError(f"field '{key}': unknown field")
            if key in values:
                raise ValidationError(f"field '{key}': given more than once")
            values[key] = value.strip()
        return cls(values=values)

    # -- typed accessors ------------------------------------------------

    def has(self, key: str) -> bool:
        return key in self.values and self.values[key] != ""

    def get_str(
        self,
        key: str,
        default: Optional[str] = None,
        required: bool = False,
        choices: Optional[Sequence[str]] = None,
    ) -> Optional[str]:
        if not self.has(key):
            if required:
                raise ValidationError(f"field '{key}': required but not given")
            return default
        value = self.values[key]
        if choices is not None and value not in choices:
            raise ValidationError(
                f"field '{key}': '{value}' is not one of {', '.join(choices)}"
            )
        return value

    def get_float(
        self, key: str, default: Optional[float] = None, required: bool = False
    ) -> Optional[float]:
        raw = self.get_str(key, required=required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ValidationError(f"field '{key}': '{raw}' is not a number") from None

    def get_int(
        self, key: str, default: Optional[int] = None, required: bool = False
    ) -> Optional[int]:
        raw = self.get_str(key, required=required)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ValidationError(f"field '{key}': '{raw}' is not an integer") from None

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.get_str(key)
        if raw is None:
            return default
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValidationError(f"field '{key}': '{raw}' is not a boolean")

    def get_list(self, key: str, default: Sequence[str] = ()) -> tuple[str, ...]:
        raw = self.get_str(key)
        if raw is None:
            return tuple(default)
        return tuple(t for t in raw.replace(",", " ").split() if t)

    def get_float_list(self, key: str, default: Sequence[float] = ()) -> tuple[float, ...]:
        out = []
        for token in self.get_list(key):
            try:
                out.append(float(token))
            except ValueError:
                raise ValidationError(
                    f"field '{key}': '{token}' is not a number"
                ) from None
        return tuple(out) if out else tuple(default)

    def get_int_pair(
        self, key: str, default: Optional[tuple[int, int]] = None, required: bool = False
    ) -> Optional[tuple[int, int]]:
        tokens = self.get_list(key)
        if not tokens:
            if required:
                raise ValidationError(f"field '{key}': required but not given")
            return default
        if len(tokens) != 2:
            raise ValidationError(f"field '{key}': expected two integers")
        try:
            lo, hi = int(tokens[0]), int(tokens[1])
        except ValueError:
            raise ValidationError(f"field '{key}': expected two integers") from None
        return (lo, hi)

    def data_path(self) -> Path:
        raw = self.get_str("data", required=True)
        path = Path(raw)
        return path if path.is_absolute() else self.base_dir / path

    def seed(self, override: Optional[int] = None) -> int:
        if override is not None:
            return override
        value = self.get_int("seed")
        if value is None:
            raise ValidationError(
                "field 'seed': required whenever a stochastic procedure runs"
            )
        return value
