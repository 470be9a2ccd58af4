"""Weighted two-way regression with a nuclear-norm-penalized low-rank term.

The central objective, for outcomes ``Y`` and per-cell loss weights ``w``, is

    sum_js w_js (Y_js - alpha_j - beta_s - L_js)^2 + lambda_nn * ||L||_*

solved by block-coordinate descent: an exact alternating solve for the fixed
effects given L, and proximal-gradient steps (singular-value soft-thresholding)
on L given the fixed effects.  ``lambda_nn = inf`` drops L entirely and
reduces to weighted two-way fixed effects.

A plain best rank-r fit (truncated SVD) is also provided; it is used for
calibrating simulation designs, not by the estimator itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import EmptyRowOrColumn

__all__ = [
    "WeightMask",
    "TwoWayFactorFit",
    "fit_weighted_twfe",
    "fit_weighted_lowrank",
    "fit_truncated_rank",
    "deterministic_svd",
    "nuclear_norm",
    "svt",
]

TWFE_TOL = 1e-10
TWFE_MAX_ITER = 200
OUTER_TOL = 1e-7
OUTER_MAX_ITER = 500


@dataclass(frozen=True)
class WeightMask:
    """Validated nonnegative per-cell loss weights."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2:
            raise ValueError("weight mask must be an N x T matrix")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "w", w)


@dataclass
class TwoWayFactorFit:
    """Solution of the weighted penalized regression plus convergence trace.

    ``alpha``/``beta``/``L`` use the centered-L identification; ``raw_state``
    holds the pre-sweep iterate (same predictions, representation preferred
    by the optimizer) and is what warm starts should resume from.
    """

    alpha: np.ndarray
    beta: np.ndarray
    L: np.ndarray
    objective: float
    iterations: int
    converged: bool
    lambda_nn: float
    trace: list[float] = field(default_factory=list, repr=False)
    zero_weight_units: tuple[int, ...] = ()
    zero_weight_periods: tuple[int, ...] = ()
    raw_state: tuple[np.ndarray, np.ndarray, np.ndarray] | None = field(
        default=None, repr=False
    )

    def predict(self) -> np.ndarray:
        return self.alpha[:, None] + self.beta[None, :] + self.L

    def warm_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.raw_state is not None:
            return self.raw_state
        return self.alpha, self.beta, self.L


def _as_weights(w) -> np.ndarray:
    return w.w if isinstance(w, WeightMask) else np.asarray(w, dtype=float)


def _twfe_alternate(Y, w, alpha, beta, tol=TWFE_TOL, max_iter=TWFE_MAX_ITER):
    """Alternating weighted-mean updates; mutates alpha/beta in place.

    The weighted sums are expanded so each half-step is two matvecs instead
    of full elementwise N x T work.
    """
    row_w = w.sum(axis=1)
    col_w = w.sum(axis=0)
    pos_r = row_w > 0
    pos_c = col_w > 0
    safe_r = np.where(pos_r, row_w, 1.0)
    safe_c = np.where(pos_c, col_w, 1.0)
    wy = w * Y
    wy_row = wy.sum(axis=1)
    wy_col = wy.sum(axis=0)
    for it in range(max_iter):
        a_new = (wy_row - w @ beta) / safe_r
        a_new[~pos_r] = 0.0
        b_new = (wy_col - a_new @ w) / safe_c
        b_new[~pos_c] = 0.0
        delta = max(np.abs(a_new - alpha).max(), np.abs(b_new - beta).max())
        alpha[:] = a_new
        beta[:] = b_new
        if delta < tol:
            break
    # pin the weighted mean of beta at zero, level absorbed into alpha
    if col_w.sum() > 0:
        shift = float((col_w * beta).sum() / col_w.sum())
        beta -= shift
        alpha[pos_r] += shift
    return alpha, beta, tuple(np.nonzero(~pos_r)[0]), tuple(np.nonzero(~pos_c)[0])


def fit_weighted_twfe(
    Y: np.ndarray,
    w,
    strict: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Minimize sum_js w_js (Y_js - alpha_j - beta_s)^2.

    Identification: the weighted mean of beta is zero (column-total weights);
    the grand level lives in alpha.  Units or periods with zero total weight
    get effect 0, or raise :class:`EmptyRowOrColumn` when ``strict``.
    """
    Y = np.asarray(Y, dtype=float)
    w = _as_weights(w)
    alpha = np.zeros(Y.shape[0])
    beta = np.zeros(Y.shape[1])
    alpha, beta, zr, zc = _twfe_alternate(Y, w, alpha, beta)
    if strict and (zr or zc):
        raise EmptyRowOrColumn(f"zero-weight units {zr} / periods {zc}")
    return alpha, beta


def _robust_svd(A: np.ndarray):
    """Thin SVD; falls back to the QR-based LAPACK driver when the default
    divide-and-conquer one fails to converge (it occasionally does)."""
    try:
        return np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")


def deterministic_svd(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD with a fixed sign convention: in each left singular vector the
    largest-magnitude entry is positive (right vectors flipped to match)."""
    u, s, vt = _robust_svd(A)
    for k in range(s.size):
        j = int(np.argmax(np.abs(u[:, k])))
        if u[j, k] < 0:
            u[:, k] = -u[:, k]
            vt[k, :] = -vt[k, :]
    return u, s, vt


def svt(A: np.ndarray, tau: float) -> np.ndarray:
    """Singular-value soft-thresholding at level tau."""
    return _svt_with_norm(A, tau)[0]


def _svt_with_norm(A: np.ndarray, tau: float) -> tuple[np.ndarray, float]:
    """Soft-threshold and return the result's nuclear norm for free."""
    u, s, vt = _robust_svd(A)
    s = np.maximum(s - tau, 0.0)
    nz = s > 0
    if not nz.any():
        return np.zeros_like(A), 0.0
    return (u[:, nz] * s[nz]) @ vt[nz, :], float(s.sum())


def nuclear_norm(A: np.ndarray) -> float:
    return float(_robust_svd(A)[1].sum())


def _objective(Y, w, alpha, beta, L, lambda_nn) -> float:
    resid = Y - alpha[:, None] - beta[None, :] - L
    loss = float((w * resid**2).sum())
    if lambda_nn == math.inf or not L.any():
        return loss
    return loss + lambda_nn * nuclear_norm(L)


def fit_weighted_lowrank(
    Y: np.ndarray,
    w,
    lambda_nn: float,
    warm: TwoWayFactorFit | None = None,
    tol: float = OUTER_TOL,
    max_iter: int = OUTER_MAX_ITER,
    keep_trace: bool = False,
) -> TwoWayFactorFit:
    """Block-coordinate solve of the weighted nuclear-norm regression.

    Each outer iteration refits (alpha, beta) on Y - L, then takes one
    proximal-gradient step on L with the conservative step 1/(2 max w).
    The objective is monotone nonincreasing across iterations; termination
    on relative decrease < ``tol`` or ``max_iter``.  After convergence the
    weighted two-way projection of L is swept into (alpha, beta) so the
    reported L is centered (predictions are unaffected).
    """
    Y = np.asarray(Y, dtype=float)
    w = _as_weights(w)
    if lambda_nn < 0:
        raise ValueError("lambda_nn must be nonnegative")

    if warm is not None:
        wa, wb, wl = warm.warm_arrays()
        alpha = wa.copy()
        beta = wb.copy()
        L = wl.copy()
    else:
        alpha = np.zeros(Y.shape[0])
        beta = np.zeros(Y.shape[1])
        L = np.zeros_like(Y)

    if lambda_nn == math.inf:
        L = np.zeros_like(Y)
        alpha, beta, zr, zc = _twfe_alternate(Y, w, alpha, beta)
        obj = _objective(Y, w, alpha, beta, L, lambda_nn)
        return TwoWayFactorFit(
            alpha, beta, L, obj, 1, True, lambda_nn,
            trace=[obj] if keep_trace else [],
            zero_weight_units=zr, zero_weight_periods=zc,
        )

    wmax = float(w.max())
    if wmax <= 0:
        raise EmptyRowOrColumn("all loss weights are zero")
    step = 1.0 / (2.0 * wmax)

    trace: list[float] = []
    obj = _objective(Y, w, alpha, beta, L, lambda_nn)
    zr: tuple[int, ...] = ()
    zc: tuple[int, ...] = ()
    converged = False
    it = 0
    tau = lambda_nn * step
    L_prev = L.copy()
    t_acc = 1.0
    for it in range(1, max_iter + 1):
        alpha, beta, zr, zc = _twfe_alternate(Y - L, w, alpha, beta)
        R = Y - alpha[:, None] - beta[None, :]
        # accelerated proximal step with a monotone safeguard: extrapolate,
        # threshold, and fall back to the plain step if the objective rises
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc**2))
        Z = L + ((t_acc - 1.0) / t_next) * (L - L_prev)
        G = Z - step * 2.0 * w * (Z - R)
        if lambda_nn > 0:
            L_new, nuc = _svt_with_norm(G, tau)
        else:
            L_new, nuc = G, 0.0
        new_obj = float((w * (R - L_new) ** 2).sum()) + lambda_nn * nuc
        if new_obj > obj:  # rejected: plain prox step from L, restart momentum
            G = L - step * 2.0 * w * (L - R)
            if lambda_nn > 0:
                L_new, nuc = _svt_with_norm(G, tau)
            else:
                L_new, nuc = G, 0.0
            new_obj = float((w * (R - L_new) ** 2).sum()) + lambda_nn * nuc
            t_acc = 1.0
        else:
            t_acc = t_next
        L_prev = L
        L = L_new
        if keep_trace:
            trace.append(new_obj)
        if obj - new_obj < tol * max(abs(obj), 1e-12):
            obj = new_obj
            converged = True
            break
        obj = new_obj

    # identification sweep: move the two-way projection of L into (alpha,
    # beta) for reporting; keep the optimizer's own iterate for warm starts
    # (predictions agree, but the centered representation is not the one the
    # penalty prefers)
    raw = (alpha, beta, L)
    out_alpha, out_beta, out_L = alpha, beta, L
    if L.any():
        a_l = np.zeros(Y.shape[0])
        b_l = np.zeros(Y.shape[1])
        a_l, b_l, _, _ = _twfe_alternate(L, w, a_l, b_l)
        out_L = L - a_l[:, None] - b_l[None, :]
        out_alpha = alpha + a_l
        out_beta = beta + b_l
        obj = _objective(Y, w, out_alpha, out_beta, out_L, lambda_nn)

    return TwoWayFactorFit(
        out_alpha, out_beta, out_L, obj, it, converged, lambda_nn,
        trace=trace, zero_weight_units=zr, zero_weight_periods=zc,
        raw_state=raw,
    )


def fit_truncated_rank(Y: np.ndarray, r: int) -> np.ndarray:
    """Best rank-r approximation of Y in Frobenius norm (truncated SVD)."""
    Y = np.asarray(Y, dtype=float)
    if not 1 <= r <= min(Y.shape):
        raise ValueError(f"rank must be in [1, {min(Y.shape)}], got {r}")
    u, s, vt = deterministic_svd(Y)
    return (u[:, :r] * s[:r]) @ vt[:r, :]
