"""Columnar dataset, declarative model spec, and fit-result containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .exceptions import ValidationError


class Categorical(NamedTuple):
    """Integer codes in [0, len(levels)) plus the original level labels."""

    codes: np.ndarray
    levels: np.ndarray

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Dataset:
    """Immutable table of named numeric and categorical columns.

    Numeric columns are float64 vectors; categorical columns store integer
    codes against a level array. All columns share the same length. Rows are
    never mutated after construction: transformations (``filter``,
    ``with_columns``) return new datasets.
    """

    __slots__ = ("n_rows", "_numeric", "_categorical")

    def __init__(
        self,
        numeric: Mapping[str, np.ndarray],
        categorical: Mapping[str, Categorical],
        n_rows: int,
    ):
        self.n_rows = n_rows
        self._numeric = dict(numeric)
        self._categorical = dict(categorical)

    @classmethod
    def from_columns(
        cls,
        columns: Mapping[str, Sequence],
        categorical: Sequence[str] = (),
    ) -> "Dataset":
        """Build a dataset from raw columns.

        Columns named in ``categorical``, and columns whose values do not
        coerce to float, become categorical. Everything else is stored as
        float64.
        """
        numeric: dict[str, np.ndarray] = {}
        cats: dict[str, Categorical] = {}
        n_rows: Optional[int] = None
        for name, values in columns.items():
            arr = np.asarray(values)
            if n_rows is None:
                n_rows = arr.shape[0]
            elif arr.shape[0] != n_rows:
                raise ValidationError(
                    f"column '{name}': length {arr.shape[0]} != {n_rows}"
                )
            if name in categorical or arr.dtype.kind in "USOb":
                levels, codes = np.unique(arr, return_inverse=True)
                cats[name] = Categorical(
                    _freeze(codes.astype(np.int64)), _freeze(levels)
                )
            else:
                numeric[name] = _freeze(np.asarray(arr, dtype=np.float64))
        return cls(numeric, cats, 0 if n_rows is None else int(n_rows))

    # -- lookups ------------------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self._numeric or name in self._categorical

    def column_names(self) -> tuple[str, ...]:
        return tuple(self._numeric) + tuple(self._categorical)

    def is_categorical(self, name: str) -> bool:
        return name in self._categorical

    def numeric(self, name: str) -> np.ndarray:
        if name in self._numeric:
            return self._numeric[name]
        if name in self._categorical:
            raise ValidationError(f"column '{name}' is categorical, not numeric")
        raise ValidationError(f"column '{name}' not found")

    def categorical(self, name: str) -> Categorical:
        if name in self._categorical:
            return self._categorical[name]
        if name in self._numeric:
            raise ValidationError(f"column '{name}' is numeric, not categorical")
        raise ValidationError(f"column '{name}' not found")

    # -- transformations ----------------------------------------------------

    def with_columns(self, columns: Mapping[str, Sequence]) -> "Dataset":
        """Return a new dataset with numeric ``columns`` added or replaced."""
        numeric = dict(self._numeric)
        for name, values in columns.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape[0] != self.n_rows:
                raise ValidationError(
                    f"column '{name}': length {arr.shape[0]} != {self.n_rows}"
                )
            if name in self._categorical:
                raise ValidationError(f"column '{name}' already exists as categorical")
            numeric[name] = _freeze(arr.copy())
        return Dataset(numeric, self._categorical, self.n_rows)

    def filter(self, mask: np.ndarray) -> "Dataset":
        """Return the row subset where ``mask`` is true.

        Categorical codes are recompacted so every level is non-empty.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != self.n_rows:
            raise ValidationError("filter mask length does not match row count")
        numeric = {k: _freeze(v[mask].copy()) for k, v in self._numeric.items()}
        cats = {}
        for k, cat in self._categorical.items():
            sub = cat.codes[mask]
            kept, new_codes = np.unique(sub, return_inverse=True)
            cats[k] = Categorical(
                _freeze(new_codes.astype(np.int64)), _freeze(cat.levels[kept])
            )
        return Dataset(numeric, cats, int(mask.sum()))


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a single regression."""

    outcome: str
    exog: tuple[str, ...] = ()
    endog: tuple[str, ...] = ()
    instruments: tuple[str, ...] = ()
    fixed_effects: tuple[str, ...] = ()
    cluster: str = ""
    weights: Optional[str] = None

    def __post_init__(self):
        for name in ("exog", "endog", "instruments", "fixed_effects"):
            value = getattr(self, name)
            if isinstance(value, str):
                raise ValidationError(f"field '{name}' must be a sequence of names")
            object.__setattr__(self, name, tuple(value))

    def validate(self, data: Dataset, allow_endog: bool = True) -> None:
        """Check that the spec is internally coherent and resolves in ``data``."""
        if not self.cluster:
            raise ValidationError("field 'cluster' is required")
        if self.endog and not allow_endog:
            raise ValidationError("field 'endog' must be empty for this operation")
        if self.endog and len(self.instruments) < len(self.endog):
            raise ValidationError(
                "field 'instruments': need at least as many instruments "
                f"({len(self.instruments)}) as endogenous variables ({len(self.endog)})"
            )
        overlap = set(self.exog) & set(self.endog)
        if overlap:
            raise ValidationError(
                f"field 'exog'/'endog': columns {sorted(overlap)} appear in both"
            )
        for field_name, names, want_cat in (
            ("outcome", (self.outcome,), False),
            ("exog", self.exog, False),
            ("endog", self.endog, False),
            ("instruments", self.instruments, False),
            ("fixed_effects", self.fixed_effects, True),
            ("cluster", (self.cluster,), True),
            ("weights", (self.weights,) if self.weights else (), False),
        ):
            for name in names:
                if name not in data:
                    raise ValidationError(f"field '{field_name}': column '{name}' not found")
                if want_cat and not data.is_categorical(name):
                    raise ValidationError(
                        f"field '{field_name}': column '{name}' must be categorical"
                    )
                if not want_cat:
                    col = data.numeric(name)
                    if not np.all(np.isfinite(col)):
                        raise ValidationError(
                            f"field '{field_name}': column '{name}' has missing or "
                            "non-finite values"
                        )
        if self.weights:
            w = data.numeric(self.weights)
            if not np.all(w > 0):
                raise ValidationError(
                    f"field 'weights': column '{self.weights}' must be strictly positive"
                )
        if data.n_rows == 0:
            raise ValidationError("dataset has no rows")

    def weight_vector(self, data: Dataset) -> np.ndarray:
        if self.weights:
            return data.numeric(self.weights).astype(np.float64)
        return np.ones(data.n_rows)


@dataclass
class FitResult:
    """Coefficients, residuals, and cluster-robust covariance from one fit."""

    names: tuple[str, ...]
    params: np.ndarray
    residuals: np.ndarray
    vce: np.ndarray
    n_obs: int
    n_clusters: int
    dof_residual: int
    dropped_collinear: tuple[str, ...]
    k_model: int
    design: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)
    cluster_codes: np.ndarray = field(repr=False, default=None)

    @property
    def coefficients(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.params)}

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"coefficient '{name}' not in fit") from None

    def coef(self, name: str) -> float:
        return float(self.params[self.index(name)])

    def se(self, name: str) -> float:
        i = self.index(name)
        return float(np.sqrt(self.vce[i, i]))

    def tstat(self, name: str) -> float:
        return self.coef(name) / self.se(name)
