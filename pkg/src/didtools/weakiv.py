"""Weak-identification-robust inference: AR tests, wild cluster bootstrap,
confidence curves, and confidence-set extraction.

The trial-value test regresses ``y - x * beta0`` on controls, fixed effects,
and the excluded instruments, and forms the cluster-robust Wald statistic for
joint nullity of the instrument coefficients. Its bootstrap distribution is
simulated with the wild restricted cluster scheme: residuals from the
null-imposed regression (instruments excluded) are flipped with cluster-level
Rademacher draws and the statistic is recomputed. Because the statistic is
invariant to shifts in the span of the controls, the rebuilt regression
depends on a draw only through per-cluster linear maps of the sign vector;
those maps are precomputed once, which also makes them affine in ``beta0`` so
a single precompute serves an entire confidence curve. The same auxiliary
draws are reused across trial values (common random numbers), which keeps the
p-value curve coherent for endpoint bisection.

When ``2^G <= replications`` the Rademacher distribution is enumerated
exactly instead of sampled, and the p value is the exact tail fraction.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .data import Dataset, ModelSpec
from .estimation import _absorb_matrix, _retain_columns, absorbed_dof
from .exceptions import EstimationError, ValidationError
from .iv import tsls_fit

DEFAULT_REPLICATIONS = 99_999


@dataclass(frozen=True)
class ConfidenceCurve:
    """Bootstrap p values over an ascending grid of trial coefficients."""

    trial_values: np.ndarray
    p_values: np.ndarray
    replications: int
    seed: int

    def __post_init__(self):
        tv = np.asarray(self.trial_values, dtype=np.float64)
        pv = np.asarray(self.p_values, dtype=np.float64)
        if tv.ndim != 1 or tv.shape != pv.shape:
            raise ValidationError("curve grids and p values must be aligned vectors")
        if tv.size and np.any(np.diff(tv) <= 0):
            raise ValidationError("trial values must be ascending and duplicate-free")
        if pv.size and (np.min(pv) < 0 or np.max(pv) > 1):
            raise ValidationError("p values must lie in [0, 1]")
        object.__setattr__(self, "trial_values", tv)
        object.__setattr__(self, "p_values", pv)


@dataclass(frozen=True)
class ConfidenceSet:
    """Finite union of disjoint closed intervals, ends possibly infinite."""

    intervals: tuple[tuple[float, float], ...]
    level: float

    def __post_init__(self):
        prev_hi = -np.inf
        for lo, hi in self.intervals:
            if lo > hi:
                raise ValidationError(f"interval [{lo}, {hi}] is empty")
            if lo < prev_hi:
                raise ValidationError("intervals must be ordered and disjoint")
            prev_hi = hi

    def contains(self, x: float) -> bool:
        return any(lo <= x <= hi for lo, hi in self.intervals)

    @property
    def is_empty(self) -> bool:
        return not self.intervals


class ARBootstrap:
    """Precomputed state for trial-value tests on one model.

    Restricting to a single endogenous variable, everything needed to
    evaluate the statistic and its wild cluster bootstrap at any ``beta0``
    is affine in ``beta0``, so construction cost is paid once per model.
    """

    def __init__(self, data: Dataset, spec: ModelSpec):
        spec.validate(data, allow_endog=True)
        if len(spec.endog) != 1:
            raise ValidationError(
                "trial-value inference supports exactly one endogenous variable"
            )
        if not spec.instruments:
            raise ValidationError("field 'instruments' must be non-empty")
        n = data.n_rows
        w = spec.weight_vector(data)
        sw = np.sqrt(w)
        cat = data.categorical(spec.cluster)
        codes, n_clusters = cat.codes, cat.n_levels
        if n_clusters < 2:
            raise EstimationError("bootstrap inference needs at least 2 clusters")

        y = np.asarray(data.numeric(spec.outcome), dtype=np.float64).copy()
        x = np.asarray(data.numeric(spec.endog[0]), dtype=np.float64).copy()
        exog = (
            np.column_stack([data.numeric(c) for c in spec.exog]).astype(np.float64)
            if spec.exog
            else np.empty((n, 0))
        )
        z = np.column_stack([data.numeric(c) for c in spec.instruments]).astype(
            np.float64
        )
        exog_ref = np.linalg.norm(exog * sw[:, None], axis=0)
        inst_ref = np.linalg.norm(z * sw[:, None], axis=0)

        fe_codes = [data.categorical(f).codes for f in spec.fixed_effects]
        fe_dof = absorbed_dof(data, spec.fixed_effects) if spec.fixed_effects else 0
        if fe_codes:
            mat = np.ascontiguousarray(np.column_stack([y, x, exog, z]))
            _absorb_matrix(mat, fe_codes, w)
            y = mat[:, 0].copy()
            x = mat[:, 1].copy()
            exog = mat[:, 2 : 2 + exog.shape[1]].copy()
            z = mat[:, 2 + exog.shape[1] :].copy()

        combined = np.column_stack([exog, z])
        kept, _ = _retain_columns(
            combined * sw[:, None], np.concatenate([exog_ref, inst_ref])
        )
        kept_exog = [j for j in kept if j < exog.shape[1]]
        kept_inst = [j - exog.shape[1] for j in kept if j >= exog.shape[1]]
        if not kept_inst:
            raise EstimationError("all instruments are collinear with the controls")
        exog = exog[:, kept_exog]
        z = z[:, kept_inst]
        n_inst = z.shape[1]

        def residualize(mat: np.ndarray) -> np.ndarray:
            """Residual maker of [fixed effects, retained exog], weighted."""
            out = np.ascontiguousarray(mat, dtype=np.float64).copy()
            if fe_codes:
                _absorb_matrix(out, fe_codes, w)
            if exog.shape[1]:
                coefs, *_ = np.linalg.lstsq(
                    exog * sw[:, None], out * sw[:, None], rcond=None
                )
                out -= exog @ coefs
            return out

        # exog and z are already FE-absorbed; z still needs exog partialled
        zp = residualize(z) if exog.shape[1] else z
        zpw = zp * w[:, None]
        e_y = residualize(y[:, None])[:, 0]
        e_x = residualize(x[:, None])[:, 0]

        # Per-cluster restricted-residual columns passed through the
        # control-space residual maker.
        masks = codes[:, None] == np.arange(n_clusters)[None, :]
        ey_cols = e_y[:, None] * masks
        ex_cols = e_x[:, None] * masks
        mey = residualize(ey_cols)
        mex = residualize(ex_cols)

        q_y = zpw.T @ ey_cols
        q_x = zpw.T @ ex_cols
        a_mat = zpw.T @ zp
        try:
            a_inv = np.linalg.solve(a_mat, np.eye(n_inst))
        except np.linalg.LinAlgError:
            raise EstimationError("instrument cross-product matrix is singular")
        p_y = a_inv @ q_y
        p_x = a_inv @ q_x

        k_y = np.empty((n_clusters, n_inst, n_clusters))
        k_x = np.empty((n_clusters, n_inst, n_clusters))
        for g in range(n_clusters):
            rows = masks[:, g]
            zw_g = zpw[rows]
            a_g = zw_g.T @ zp[rows]
            k_y[g] = zw_g.T @ mey[rows] - a_g @ p_y
            k_x[g] = zw_g.T @ mex[rows] - a_g @ p_x

        k_model = n_inst + exog.shape[1] + fe_dof
        if n - k_model <= 0:
            raise EstimationError("no residual degrees of freedom for the AR design")
        self.n_obs = n
        self.n_clusters = n_clusters
        self.n_instruments = n_inst
        self.cfac = (n_clusters / (n_clusters - 1.0)) * ((n - 1.0) / (n - k_model))
        self._k_y, self._k_x = k_y, k_x
        self._q_y, self._q_x = q_y, q_x
        self._ones = np.ones((n_clusters, 1))

    # -- statistic evaluation ------------------------------------------------

    def _parts(self, beta0: float) -> tuple[np.ndarray, np.ndarray]:
        kmats = self._k_y - beta0 * self._k_x
        qmat = self._q_y - beta0 * self._q_x
        return np.ascontiguousarray(kmats), np.ascontiguousarray(qmat)

    def statistic(self, beta0: float) -> float:
        """Observed trial-value Wald statistic at ``beta0``."""
        kmats, qmat = self._parts(beta0)
        return float(_kernels.wild_ar_stats(kmats, qmat, self._ones, self.cfac)[0])

    def draw_weights(self, replications: int, seed: int) -> np.ndarray:
        """Cluster-level Rademacher matrix, deterministic in ``seed``."""
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        return (
            rng.integers(0, 2, size=(self.n_clusters, replications)).astype(np.float64)
            * 2.0
            - 1.0
        )

    def enumerated_weights(self) -> np.ndarray:
        """All 2^G sign patterns, one column per pattern."""
        count = 1 << self.n_clusters
        idx = np.arange(count, dtype=np.uint64)
        bits = (idx[None, :] >> np.arange(self.n_clusters, dtype=np.uint64)[:, None]) & 1
        return bits.astype(np.float64) * 2.0 - 1.0

    def should_enumerate(self, replications: int) -> bool:
        return self.n_clusters < 63 and (1 << self.n_clusters) <= replications

    def bootstrap_p(
        self,
        beta0: float,
        replications: int = DEFAULT_REPLICATIONS,
        seed: int = 0,
        enumeration: str = "auto",
        weights_matrix: Optional[np.ndarray] = None,
    ) -> float:
        """Wild restricted cluster bootstrap p value for ``beta0``.

        ``enumeration`` is 'auto' (enumerate when 2^G <= replications),
        'always', or 'never'. ``weights_matrix`` lets a caller share one set
        of auxiliary draws across many trial values.
        """
        if replications < 1:
            raise ValidationError("field 'replications' must be >= 1")
        kmats, qmat = self._parts(beta0)
        observed = float(
            _kernels.wild_ar_stats(kmats, qmat, self._ones, self.cfac)[0]
        )
        if not math.isfinite(observed):
            raise EstimationError("observed statistic is not finite")
        if weights_matrix is not None:
            v = weights_matrix
            exact = False
        elif enumeration == "always" or (
            enumeration == "auto" and self.should_enumerate(replications)
        ):
            v = self.enumerated_weights()
            exact = True
        elif enumeration in ("auto", "never"):
            v = self.draw_weights(replications, seed)
            exact = False
        else:
            raise ValidationError(
                "field 'enumeration' must be 'auto', 'always', or 'never'"
            )
        stats = _kernels.wild_ar_stats(kmats, qmat, v, self.cfac)
        hits = int(np.sum(stats >= observed))
        if exact:
            return hits / v.shape[1]
        return (1.0 + hits) / (v.shape[1] + 1.0)


def ar_statistic(data: Dataset, spec: ModelSpec, beta0: float) -> float:
    """Cluster-robust AR-style Wald statistic at the trial value ``beta0``."""
    return ARBootstrap(data, spec).statistic(beta0)


def wre_bootstrap_p(
    data: Dataset,
    spec: ModelSpec,
    beta0: float,
    replications: int = DEFAULT_REPLICATIONS,
    seed: int = 0,
    enumeration: str = "auto",
) -> float:
    """One-shot bootstrap p value; see :class:`ARBootstrap` for the scheme."""
    return ARBootstrap(data, spec).bootstrap_p(
        beta0, replications=replications, seed=seed, enumeration=enumeration
    )


def default_grid(data: Dataset, spec: ModelSpec, points: int = 201) -> np.ndarray:
    """Grid spanning the 2SLS estimate +/- 8 classical cluster-robust SEs."""
    fit = tsls_fit(data, spec)
    center = fit.coef(spec.endog[0])
    se = fit.se(spec.endog[0])
    if not (math.isfinite(center) and math.isfinite(se)) or se <= 0:
        raise EstimationError("2SLS point estimate cannot anchor a default grid")
    return np.linspace(center - 8 * se, center + 8 * se, points)


def confidence_curve(
    data: Dataset,
    spec: ModelSpec,
    grid: Optional[Sequence[float]] = None,
    replications: int = DEFAULT_REPLICATIONS,
    seed: int = 0,
    threads: int = 1,
) -> ConfidenceCurve:
    """Bootstrap p values over a grid of trial coefficient values.

    The same auxiliary draws are used at every grid point, so the curve is
    deterministic given the seed and invariant to evaluation order and
    ``threads``.
    """
    prep = ARBootstrap(data, spec)
    if grid is None:
        grid_arr = default_grid(data, spec)
    else:
        grid_arr = np.asarray(list(grid), dtype=np.float64)
    if grid_arr.size == 0:
        raise ValidationError("field 'grid' must be non-empty")
    if prep.should_enumerate(replications):
        shared = prep.enumerated_weights()
        evaluate = lambda b0: prep.bootstrap_p(b0, enumeration="always")
    else:
        shared = prep.draw_weights(replications, seed)
        evaluate = lambda b0: prep.bootstrap_p(b0, weights_matrix=shared)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            p_values = np.array(list(pool.map(evaluate, grid_arr)))
    else:
        p_values = np.array([evaluate(b0) for b0 in grid_arr])
    return ConfidenceCurve(
        trial_values=grid_arr,
        p_values=p_values,
        replications=replications,
        seed=seed,
    )


def extract_confidence_set(
    curve: ConfidenceCurve,
    level: float = 0.95,
    refine: Optional[Callable[[float], float]] = None,
    tol: float = 1e-4,
) -> ConfidenceSet:
    """Level set of the confidence curve as a union of closed intervals.

    The set is the closure of ``{beta0 : p(beta0) > 1 - level}``. Boundary
    points between grid neighbors are sharpened by bisection, using
    ``refine`` (a callable returning the p value at any trial value) when
    supplied and linear interpolation of the grid otherwise. Runs that are
    still inside the set at a grid edge emit an infinite end.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError("field 'level' must be in (0, 1)")
    alpha = 1.0 - level
    tv, pv = curve.trial_values, curve.p_values
    inside = pv > alpha
    if not inside.any():
        warnings.warn(
            f"confidence curve never exceeds {alpha:.4g}; the {level:.0%} set is empty",
            stacklevel=2,
        )
        return ConfidenceSet(intervals=(), level=level)
    scale = max(1.0, float(np.max(np.abs(tv))))
    tol_abs = tol * scale

    def crossing(lo: float, hi: float, lo_inside: bool) -> float:
        """Boundary of the level set inside (lo, hi)."""
        if refine is None:
            p_lo = pv[np.searchsorted(tv, lo)]
            p_hi = pv[np.searchsorted(tv, hi)]
            if p_hi == p_lo:
                return (lo + hi) / 2.0
            return lo + (alpha - p_lo) * (hi - lo) / (p_hi - p_lo)
        while hi - lo > tol_abs:
            mid = (lo + hi) / 2.0
            if (refine(mid) > alpha) == lo_inside:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2.0

    intervals: list[tuple[float, float]] = []
    i = 0
    n = len(tv)
    while i < n:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and inside[j + 1]:
            j += 1
        lower = -np.inf if i == 0 else crossing(tv[i - 1], tv[i], lo_inside=False)
        upper = np.inf if j == n - 1 else crossing(tv[j], tv[j + 1], lo_inside=True)
        intervals.append((float(lower), float(upper)))
        i = j + 1
    return ConfidenceSet(intervals=tuple(intervals), level=level)


def write_curve_csv(curve: ConfidenceCurve, path) -> None:
    """Two-column CSV (trial_value, p) for external plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("trial_value,p\n")
        for t, p in zip(curve.trial_values, curve.p_values):
            fh.write(f"{t!r},{p!r}\n")
