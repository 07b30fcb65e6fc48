"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The numba path is used whenever numba imports cleanly; setting the
environment variable ``DIDTOOLS_DISABLE_NUMBA`` to ``1``/``true`` forces the
numpy path. Both paths implement identical arithmetic and agree to floating
round-off; within one process a single backend is used consistently so that
bootstrap tie-breaking is reproducible.

Kernels operate on plain float64/int64 arrays prepared by the calling
modules; no validation happens here.
"""

from __future__ import annotations

import os

import numpy as np


def _numba_disabled() -> bool:
    return os.environ.get("DIDTOOLS_DISABLE_NUMBA", "").strip().lower() in {
        "1",
        "true",
        "yes",
        "on",
    }


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _demean_pass_numpy(values, codes, group_w, w):
    """One weighted within-group demeaning pass, in place.

    values: (n, k) C-contiguous float64, mutated.
    codes: (n,) int64 group codes in [0, m).
    group_w: (m,) float64 positive group weight totals.
    w: (n,) float64 positive observation weights.

    Returns the per-column max absolute weighted group mean seen *before*
    subtraction, used by the caller's convergence test.
    """
    m = group_w.shape[0]
    k = values.shape[1]
    colmax = np.zeros(k)
    for j in range(k):
        sums = np.bincount(codes, weights=values[:, j] * w, minlength=m)
        means = sums / group_w
        values[:, j] -= means[codes]
        colmax[j] = np.max(np.abs(means)) if m else 0.0
    return colmax


def _wild_ar_stats_numpy(kmats, qmat, v, cfac):
    """Cluster-wild Wald statistics for a batch of sign vectors.

    kmats: (G, L, G) per-cluster score maps; cluster g's score under sign
        vector v is ``kmats[g] @ v``.
    qmat: (L, G); the tested coefficient block solves ``A b = qmat @ v``.
    v: (G, B) sign (or more general auxiliary weight) vectors.
    cfac: small-sample factor multiplying the variance.

    Returns (B,) Wald statistics ``q' M^{-1} q / cfac`` with
    ``M = sum_g s_g s_g'``.
    """
    n_clusters, n_coef, _ = kmats.shape
    n_reps = v.shape[1]
    out = np.empty(n_reps)
    # Chunk over replications to bound the (G, L, B) intermediate.
    chunk = max(1, int(4_000_000 // max(1, n_clusters * n_coef)))
    for start in range(0, n_reps, chunk):
        vv = v[:, start : start + chunk]
        scores = np.einsum("glh,hb->glb", kmats, vv)
        meat = np.einsum("glb,gmb->lmb", scores, scores)
        q = qmat @ vv
        if n_coef == 1:
            m00 = meat[0, 0]
            qq = q[0] * q[0]
            res = np.empty(m00.shape)
            ok = m00 > 0.0
            res[ok] = qq[ok] / (m00[ok] * cfac)
            res[~ok] = np.where(qq[~ok] <= 0.0, 0.0, np.inf)
            out[start : start + chunk] = res
        else:
            mb = meat.transpose(2, 0, 1)
            qb = q.T
            res = np.empty(qb.shape[0])
            for i in range(qb.shape[0]):
                qi = qb[i]
                if not np.any(qi):
                    res[i] = 0.0
                    continue
                try:
                    sol = np.linalg.solve(mb[i], qi)
                except np.linalg.LinAlgError:
                    sol = np.linalg.pinv(mb[i]) @ qi
                res[i] = float(qi @ sol) / cfac
            out[start : start + chunk] = res
    return out


def _ecdf_transport_numpy(y, src_vals, src_cum, dst_vals, dst_cum):
    """Map values through src ECDF then dst quantile function.

    src_vals/dst_vals are ascending; src_cum/dst_cum are the matching
    cumulative weight fractions with final element 1. Uses the
    right-continuous ECDF and the left-continuous generalized inverse.
    Out-of-support inputs clamp to the boundary; callers enforce any
    stricter support policy beforehand.
    """
    idx = np.searchsorted(src_vals, y, side="right")
    q = np.where(idx > 0, src_cum[np.maximum(idx - 1, 0)], 0.0)
    j = np.searchsorted(dst_cum, q, side="left")
    j = np.minimum(j, dst_vals.shape[0] - 1)
    return dst_vals[j]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

_demean_pass_numba = None
_wild_ar_stats_numba = None
_ecdf_transport_numba = None

if not _numba_disabled():
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        njit = None

    if njit is not None:

        @njit(cache=True)
        def _demean_pass_numba(values, codes, group_w, w):
            n, k = values.shape
            m = group_w.shape[0]
            colmax = np.zeros(k)
            sums = np.empty(m)
            for j in range(k):
                sums[:] = 0.0
                for i in range(n):
                    sums[codes[i]] += values[i, j] * w[i]
                mx = 0.0
                for g in range(m):
                    sums[g] /= group_w[g]
                    a = abs(sums[g])
                    if a > mx:
                        mx = a
                for i in range(n):
                    values[i, j] -= sums[codes[i]]
                colmax[j] = mx
            return colmax

        @njit(cache=True)
        def _wild_ar_stats_numba(kmats, qmat, v, cfac):
            n_clusters, n_coef, _ = kmats.shape
            n_reps = v.shape[1]
            out = np.empty(n_reps)
            s = np.empty(n_coef)
            meat = np.empty((n_coef, n_coef))
            q = np.empty(n_coef)
            for b in range(n_reps):
                for l in range(n_coef):
                    acc = 0.0
                    for h in range(n_clusters):
                        acc += qmat[l, h] * v[h, b]
                    q[l] = acc
                meat[:, :] = 0.0
                for g in range(n_clusters):
                    for l in range(n_coef):
                        acc = 0.0
                        for h in range(n_clusters):
                            acc += kmats[g, l, h] * v[h, b]
                        s[l] = acc
                    for l in range(n_coef):
                        for m2 in range(n_coef):
                            meat[l, m2] += s[l] * s[m2]
                if n_coef == 1:
                    qq = q[0] * q[0]
                    if meat[0, 0] > 0.0:
                        out[b] = qq / (meat[0, 0] * cfac)
                    elif qq <= 0.0:
                        out[b] = 0.0
                    else:
                        out[b] = np.inf
                else:
                    nonzero = False
                    for l in range(n_coef):
                        if q[l] != 0.0:
                            nonzero = True
                    if not nonzero:
                        out[b] = 0.0
                    else:
                        sol = np.linalg.pinv(meat) @ q
                        out[b] = (q @ sol) / cfac
            return out

        @njit(cache=True)
        def _ecdf_transport_numba(y, src_vals, src_cum, dst_vals, dst_cum):
            m = y.shape[0]
            out = np.empty(m)
            last = dst_vals.shape[0] - 1
            for i in range(m):
                idx = np.searchsorted(src_vals, y[i], side="right")
                q = src_cum[idx - 1] if idx > 0 else 0.0
                j = np.searchsorted(dst_cum, q, side="left")
                if j > last:
                    j = last
                out[i] = dst_vals[j]
            return out


if _demean_pass_numba is not None:
    BACKEND = "numba"
    demean_pass = _demean_pass_numba
    wild_ar_stats = _wild_ar_stats_numba
    ecdf_transport = _ecdf_transport_numba
else:
    BACKEND = "numpy"
    demean_pass = _demean_pass_numpy
    wild_ar_stats = _wild_ar_stats_numpy
    ecdf_transport = _ecdf_transport_numpy
