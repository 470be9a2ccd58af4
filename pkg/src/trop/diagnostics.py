"""Empirical diagnostics: fixed-effect stability, factor gain, and weight
concentration summaries.

These answer two practical questions about a panel before estimation: do the
unit effects drift over time (evidence of interactive structure a two-way
model misses), and where do the cross-validated kernels concentrate their
mass?
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import NotBlockDesign, TooFewPeriods
from .panel import Panel, detect_block
from .solver import fit_weighted_twfe
from .weights import TuningTriple, UnitDistances, cell_weights

__all__ = [
    "DiagnosticReport",
    "split_half_fe_test",
    "factor_gain",
    "weight_concentration",
    "diagnostic_report",
]


@dataclass
class DiagnosticReport:
    rejection_pct: float
    rmse_twfe: float
    rmse_plus_factor: float
    pct_decrease: float
    cum_time_last5: float | None = None
    cum_unit_closest5: float | None = None
    cum_unit_closest_half: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def split_half_fe_test(panel: Panel, level: float = 0.05) -> float:
    """Share of units (percent) rejecting equality of their fixed effect
    across the two halves of the time axis.

    Each half gets its own two-way fit on control cells; per unit, a Wald
    z-statistic compares the demeaned unit effects, with variance from the
    half-specific residual variances over that unit's control-period counts.
    """
    n, T = panel.Y.shape
    if T < 6:
        raise TooFewPeriods(f"need at least 6 periods, got {T}")
    half = T // 2
    slices = [slice(0, half), slice(half, T)]

    alphas, variances, counts = [], [], []
    for sl in slices:
        Y = panel.Y[:, sl]
        w = 1.0 - panel.W[:, sl]
        alpha, beta = fit_weighted_twfe(Y, w)
        resid = Y - alpha[:, None] - beta[None, :]
        m = w.sum()
        dof = max(m - n - w.shape[1] + 1, 1.0)
        sigma2 = float((w * resid**2).sum() / dof)
        alphas.append(alpha - alpha.mean())
        counts.append(np.maximum(w.sum(axis=1), 1.0))
        variances.append(sigma2)

    z = (alphas[0] - alphas[1]) / np.sqrt(
        variances[0] / counts[0] + variances[1] / counts[1]
    )
    crit = norm.ppf(1.0 - level / 2.0)
    return float(100.0 * np.mean(np.abs(z) > crit))


def _rank_one_als(R: np.ndarray, w: np.ndarray, iters: int = 200, tol: float = 1e-10):
    """Best rank-one fit of R on the weighted support, alternating u/v."""
    from .solver import deterministic_svd

    u = np.zeros(R.shape[0])
    _, _, vt = deterministic_svd(w * R)
    v = vt[0]
    prev = float((w * R**2).sum())
    for _ in range(iters):
        denom_u = w @ (v**2)
        u = np.where(denom_u > 0, (w * R) @ v / np.where(denom_u > 0, denom_u, 1.0), 0.0)
        denom_v = (u**2) @ w
        v = np.where(denom_v > 0, u @ (w * R) / np.where(denom_v > 0, denom_v, 1.0), 0.0)
        loss = float((w * (R - np.outer(u, v)) ** 2).sum())
        if prev - loss < tol * max(prev, 1.0):
            break
        prev = loss
    return np.outer(u, v)


def factor_gain(
    panel: Panel, holdout_frac: float = 0.1, seed: int = 42
) -> tuple[float, float]:
    """Out-of-sample RMSE of a two-way fit versus two-way plus one factor.

    Holds out a random fraction of control cells, fits both models on the
    rest, and scores predictions on the holdout.  Deterministic given seed.
    """
    rng = np.random.default_rng(seed)
    control = np.argwhere(panel.W == 0)
    k = max(1, int(round(holdout_frac * control.shape[0])))
    pick = rng.choice(control.shape[0], size=k, replace=False)
    held = control[pick]

    w = (1.0 - panel.W).astype(float)
    w[held[:, 0], held[:, 1]] = 0.0

    alpha, beta = fit_weighted_twfe(panel.Y, w)
    pred = alpha[:, None] + beta[None, :]
    resid = panel.Y - pred
    err_twfe = resid[held[:, 0], held[:, 1]]

    factor = _rank_one_als(resid, w)
    err_plus = (resid - factor)[held[:, 0], held[:, 1]]
    return (
        float(np.sqrt(np.mean(err_twfe**2))),
        float(np.sqrt(np.mean(err_plus**2))),
    )


def weight_concentration(panel: Panel, lam: TuningTriple) -> dict[str, float]:
    """Cumulative kernel mass near the treatment boundary, averaged over
    treated cells: time mass on the 5 pre periods closest to treatment, unit
    mass on the 5 (and half the) control units closest in outcome distance.
    """
    block = detect_block(panel)
    if block is None:
        raise NotBlockDesign("weight concentration is defined for block designs")
    pre = np.asarray(block.pre_periods)
    controls = np.asarray(block.control_units)
    dist = UnitDistances(panel)

    boundary = min(block.post_periods)
    near5 = np.isin(pre, pre[np.argsort(np.abs(pre - boundary), kind="stable")[:5]])
    time_shares, unit5, unit_half = [], [], []
    n_half = max(1, math.ceil(controls.size / 2))
    for i in block.treated_units:
        d = dist.distances_to(i, block.post_periods[0])[controls]
        order = np.argsort(d, kind="stable")
        for t in block.post_periods:
            cw = cell_weights(panel, (i, t), lam, distances=dist)
            th = cw.theta[pre]
            th = th / th.sum()
            time_shares.append(th[near5].sum())
            om = cw.omega[controls]
            om = om / om.sum()
            unit5.append(om[order[:5]].sum())
            unit_half.append(om[order[:n_half]].sum())
    return {
        "cum_time_last5": float(np.mean(time_shares)),
        "cum_unit_closest5": float(np.mean(unit5)),
        "cum_unit_closest_half": float(np.mean(unit_half)),
    }


def diagnostic_report(
    panel: Panel,
    lam: TuningTriple | None = None,
    level: float = 0.05,
    holdout_frac: float = 0.1,
    seed: int = 42,
) -> DiagnosticReport:
    """Bundle the three diagnostics into one report; weight concentration is
    included only when a tuning triple is supplied and W is a block."""
    rej = split_half_fe_test(panel, level=level)
    rmse_twfe, rmse_plus = factor_gain(panel, holdout_frac=holdout_frac, seed=seed)
    report = DiagnosticReport(
        rejection_pct=rej,
        rmse_twfe=rmse_twfe,
        rmse_plus_factor=rmse_plus,
        pct_decrease=100.0 * (1.0 - rmse_plus / rmse_twfe) if rmse_twfe > 0 else 0.0,
    )
    if lam is not None and detect_block(panel) is not None and panel.W.any():
        conc = weight_concentration(panel, lam)
        report.cum_time_last5 = conc["cum_time_last5"]
        report.cum_unit_closest5 = conc["cum_unit_closest5"]
        report.cum_unit_closest_half = conc["cum_unit_closest_half"]
    return report
