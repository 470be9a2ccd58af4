"""Comparison estimators: DID/TWFE, SC, DIFP, SDID, and MC.

Each produces per-cell counterfactual predictions for the treated cells and
the implied average effect.  DID, SC, DIFP, and SDID require block (product)
assignment; MC accepts any pattern.

Simplex-constrained least squares (SC / SDID weights) is solved by an
accelerated projected-gradient method with restart, initialized at the
uniform vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NotBlockDesign
from .estimator import TuningGrid, _CellEngine, default_grid, tune
from .panel import BlockAssignment, Panel, detect_block, normalize_outcomes
from .solver import fit_weighted_twfe
from .weights import TuningTriple

__all__ = [
    "CounterfactualGrid",
    "did",
    "sc",
    "sdid",
    "mc",
    "simplex_lstsq",
    "project_simplex",
]

SIMPLEX_TOL = 1e-10
SIMPLEX_MAX_ITER = 10000


@dataclass
class CounterfactualGrid:
    """Per-cell counterfactual predictions for the treated cells."""

    yhat0: dict[tuple[int, int], float]
    att: float
    method: str
    unit_weights: dict[int, np.ndarray] = field(default_factory=dict)
    time_weights: np.ndarray | None = None
    lam: TuningTriple | None = None

    def errors(self, Y: np.ndarray) -> dict[tuple[int, int], float]:
        return {(i, t): float(Y[i, t] - v) for (i, t), v in self.yhat0.items()}


def _require_block(panel: Panel) -> BlockAssignment:
    block = detect_block(panel)
    if block is None:
        raise NotBlockDesign("estimator requires block treatment assignment")
    return block


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    return project_simplex_columns(np.asarray(v, dtype=float)[:, None])[:, 0]


def project_simplex_columns(V: np.ndarray) -> np.ndarray:
    """Column-wise Euclidean projection onto the probability simplex."""
    m, k = V.shape
    U = -np.sort(-V, axis=0)
    css = np.cumsum(U, axis=0)
    idx = np.arange(1, m + 1, dtype=float)[:, None]
    cond = U + (1.0 - css) / idx > 0
    rho = m - 1 - np.argmax(cond[::-1, :], axis=0)  # last True row per column
    cols = np.arange(k)
    lam = (1.0 - css[rho, cols]) / (rho + 1.0)
    return np.maximum(V + lam[None, :], 0.0)


def _apg_simplex_batch(
    AtA: np.ndarray,
    AtB: np.ndarray,
    btb: np.ndarray,
    ridge: float = 0.0,
    tol: float = SIMPLEX_TOL,
    max_iter: int = SIMPLEX_MAX_ITER,
) -> np.ndarray:
    """Column-wise accelerated projected gradient over the simplex.

    Minimizes w' AtA w - 2 AtB[:,j]' w + btb[j] + ridge ||w||^2 for every
    column j simultaneously; deterministic uniform start, momentum with
    gradient-based restart, exit on objective stall plus a unit-step
    projected-gradient residual below 1e-7.
    """
    m, k = AtB.shape
    lip = 2.0 * (float(np.linalg.eigvalsh(AtA)[-1]) + ridge)
    lip = max(lip, 1e-12)
    step = 1.0 / lip

    def fvals(W_, AtAW):
        return np.einsum("mk,mk->k", W_, AtAW) - 2.0 * np.einsum(
            "mk,mk->k", AtB, W_
        ) + btb + ridge * np.einsum("mk,mk->k", W_, W_)

    W = np.full((m, k), 1.0 / m)
    obj = fvals(W, AtA @ W)
    Z = W.copy()
    t_acc = np.ones(k)
    stall = np.zeros(k, dtype=int)
    done = np.zeros(k, dtype=bool)
    for _ in range(max_iter):
        G = 2.0 * (AtA @ Z - AtB + ridge * Z)
        W_new = project_simplex_columns(Z - step * G)
        new_obj = fvals(W_new, AtA @ W_new)
        dW = W_new - W
        uphill = np.einsum("mk,mk->k", G, dW) > 0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
        coef = np.where(uphill, 0.0, (t_acc - 1.0) / t_next)
        Z = W_new + coef[None, :] * dW
        t_acc = np.where(uphill, 1.0, t_next)
        stalled = np.abs(obj - new_obj) < tol * np.maximum(1.0, np.abs(new_obj))
        stall = np.where(stalled, stall + 1, 0)
        better = new_obj <= obj
        W = np.where(better[None, :], W_new, W)
        obj = np.where(better, new_obj, obj)
        check = (stall >= 3) & ~done
        if check.any():
            Gw = 2.0 * (AtA @ W - AtB + ridge * W)
            kkt = np.linalg.norm(W - project_simplex_columns(W - Gw), axis=0)
            done |= check & (kkt < 1e-7)
            stall[check] = 0
        if done.all():
            break
    return W


def _apg_simplex(AtA, Atb, btb, ridge=0.0, tol=SIMPLEX_TOL, max_iter=SIMPLEX_MAX_ITER):
    return _apg_simplex_batch(
        AtA, np.asarray(Atb, dtype=float)[:, None], np.asarray([btb]), ridge, tol, max_iter
    )[:, 0]


def simplex_lstsq(
    A: np.ndarray,
    b: np.ndarray,
    ridge: float = 0.0,
    intercept: bool = False,
    tol: float = SIMPLEX_TOL,
    max_iter: int = SIMPLEX_MAX_ITER,
) -> tuple[np.ndarray, float]:
    """min_w ||A w - b||^2 + ridge ||w||^2 over the simplex, optional free
    intercept (handled by centering).  Returns (w, intercept)."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if intercept:
        a_mean = A.mean(axis=0)
        b_mean = b.mean()
        Ac, bc = A - a_mean, b - b_mean
    else:
        Ac, bc = A, b
    w = _apg_simplex(Ac.T @ Ac, Ac.T @ bc, float(bc @ bc), ridge, tol, max_iter)
    mu = float(b_mean - a_mean @ w) if intercept else 0.0
    return w, mu


def did(panel: Panel) -> CounterfactualGrid:
    """Unweighted two-way fixed effects fit on control cells, predicted into
    the treated block; the ATT equals the four-group-means formula."""
    _require_block(panel)
    alpha, beta = fit_weighted_twfe(panel.Y, 1.0 - panel.W)
    pred = alpha[:, None] + beta[None, :]
    yhat0 = {cell: float(pred[cell]) for cell in panel.treated_cells()}
    att = float(np.mean([panel.Y[c] - v for c, v in yhat0.items()]))
    return CounterfactualGrid(yhat0=yhat0, att=att, method="did")


def sc(panel: Panel, intercept: bool = False) -> CounterfactualGrid:
    """Synthetic control: one simplex weight vector per treated unit fitted
    to its pre-period outcomes.  ``intercept=True`` is the mean-recentered
    variant (DIFP)."""
    block = _require_block(panel)
    Y = panel.Y
    co = list(block.control_units)
    pre = list(block.pre_periods)
    post = list(block.post_periods)
    A = Y[np.ix_(co, pre)].T  # T0 x N0
    if intercept:
        a_mean = A.mean(axis=0)
        Ac = A - a_mean
    else:
        a_mean = np.zeros(A.shape[1])
        Ac = A
    B = Y[np.ix_(block.treated_units, pre)].T  # T0 x N1, one column per unit
    Bc = B - B.mean(axis=0) if intercept else B
    Wsol = _apg_simplex_batch(Ac.T @ Ac, Ac.T @ Bc, np.einsum("tk,tk->k", Bc, Bc))

    yhat0: dict[tuple[int, int], float] = {}
    unit_weights: dict[int, np.ndarray] = {}
    for j, i in enumerate(block.treated_units):
        w = Wsol[:, j]
        mu = float(B[:, j].mean() - a_mean @ w) if intercept else 0.0
        unit_weights[i] = w
        fitted = mu + w @ Y[np.ix_(co, post)]
        for k, t in enumerate(post):
            yhat0[(i, t)] = float(fitted[k])
    att = float(np.mean([Y[c] - v for c, v in yhat0.items()]))
    return CounterfactualGrid(
        yhat0=yhat0,
        att=att,
        method="difp" if intercept else "sc",
        unit_weights=unit_weights,
    )


def sdid_zeta(panel: Panel, block: BlockAssignment) -> float:
    """Published SDID ridge scale: (N_tr * T_post)^(1/4) times the standard
    deviation of first differences of control outcomes over pre periods."""
    Y = panel.Y
    co = list(block.control_units)
    pre = list(block.pre_periods)
    diffs = np.diff(Y[np.ix_(co, pre)], axis=1)
    sigma = float(diffs.std())
    return (block.n1 * block.t1) ** 0.25 * sigma


def sdid(panel: Panel) -> CounterfactualGrid:
    """Synthetic difference in differences.

    Unit weights: simplex + intercept + ridge (zeta^2 * T0 * ||w||^2) matching
    the treated units' average pre trajectory.  Time weights: simplex +
    intercept matching control units' post averages from their pre periods.
    Per-cell counterfactuals use the balancing form; the ATT is the weighted
    double difference.
    """
    block = _require_block(panel)
    Y = panel.Y
    co = list(block.control_units)
    tr = list(block.treated_units)
    pre = list(block.pre_periods)
    post = list(block.post_periods)

    zeta = sdid_zeta(panel, block)
    A_unit = Y[np.ix_(co, pre)].T  # T0 x N0
    b_unit = Y[np.ix_(tr, pre)].mean(axis=0)
    omega, _ = simplex_lstsq(A_unit, b_unit, ridge=zeta**2 * block.t0, intercept=True)

    A_time = Y[np.ix_(co, pre)]  # N0 x T0
    b_time = Y[np.ix_(co, post)].mean(axis=1)
    theta, _ = simplex_lstsq(A_time, b_time, intercept=True)

    Yco = Y[co, :]
    yhat0: dict[tuple[int, int], float] = {}
    cross = float(omega @ Yco[:, pre] @ theta)
    for i in tr:
        row_pre = float(Y[i, pre] @ theta)
        for t in post:
            col_ctrl = float(omega @ Yco[:, t])
            yhat0[(i, t)] = row_pre + col_ctrl - cross
    att = float(np.mean([Y[c] - v for c, v in yhat0.items()]))
    return CounterfactualGrid(
        yhat0=yhat0,
        att=att,
        method="sdid",
        unit_weights={i: omega for i in tr},
        time_weights=theta,
    )


def mc(
    panel: Panel,
    lam_nn: float | None = None,
    grid: TuningGrid | None = None,
    q_cells: list[tuple[int, int]] | None = None,
) -> CounterfactualGrid:
    """Matrix completion: uniform weights, nuclear-norm penalty chosen by the
    same cross-validation restricted to the lambda_nn axis.  Accepts any
    assignment pattern."""
    work, mean, sd = normalize_outcomes(panel)
    if lam_nn is None:
        base = grid if grid is not None else default_grid(work)
        nn_only = TuningGrid(time=(0.0,), unit=(0.0,), nn=base.nn)
        lam_nn = tune(work, grid=nn_only, cells=q_cells, normalize=False).best.lambda_nn
    lam = TuningTriple(lambda_unit=0.0, lambda_time=0.0, lambda_nn=lam_nn)
    engine = _CellEngine(work)
    taus = engine.tau_block_uniform(panel.treated_cells(), lam)
    yhat0 = {c: float(panel.Y[c] - sd * tau) for c, tau in taus.items()}
    att = float(np.mean([panel.Y[c] - v for c, v in yhat0.items()]))
    return CounterfactualGrid(yhat0=yhat0, att=att, method="mc", lam=lam)
