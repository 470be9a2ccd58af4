"""The triply robust panel (TROP) estimator.

Per-cell effects come from a doubly weighted two-way regression with a
nuclear-norm-penalized low-rank term: for a target cell (i, t) the loss puts
weight ``omega_j * theta_s`` on every control cell, zero on all treated cells
and on the target itself, and the effect is the target's prediction residual

    tau_it = Y_it - alpha_i - beta_t - L_it.

Zeroing the target's loss weight is exactly equivalent to minimizing jointly
over a free per-target effect: the free parameter absorbs the target residual
at any (alpha, beta, L), so both formulations share their minimizer.

The three regularizers are tuned by leave-one-out cross validation: Q(lambda)
sums the squared pseudo-effects over control cells, minimized by three 1-d
sweeps followed by coordinate-wise cycling over refined grids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoTreatedCells, RankDeficientCovariates
from .panel import Panel, normalize_outcomes
from .solver import TwoWayFactorFit, fit_weighted_lowrank
from .weights import CellWeights, TuningTriple, UnitDistances, cell_weights

__all__ = [
    "AttResult",
    "TuningGrid",
    "default_grid",
    "estimate_cell",
    "estimate_cell_with_covariates",
    "loocv_q",
    "tune",
    "TuneResult",
    "estimate_att",
    "att_result_to_json",
]

DEFAULT_DECAY_GRID = (0.0, 0.025, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 2.0, 4.0)
Q_SUBSAMPLE_CUTOFF = 4000
Q_SUBSAMPLE_SIZE = 2000
Q_SUBSAMPLE_SEED = 981633
MAX_CYCLES = 10


@dataclass
class AttResult:
    """Average effect on the treated plus the per-cell estimates behind it."""

    att: float
    tau_cells: dict[tuple[int, int], float]
    lam: TuningTriple
    q_surface: list[tuple[TuningTriple, float]] = field(default_factory=list)
    se: float | None = None
    method: str = "trop"
    unit_labels: tuple[str, ...] = ()
    time_labels: tuple[str, ...] = ()
    converged: bool = True


@dataclass(frozen=True)
class TuningGrid:
    """Candidate values per coordinate for the cross-validation search."""

    time: tuple[float, ...]
    unit: tuple[float, ...]
    nn: tuple[float, ...]

    def __post_init__(self):
        for name in ("time", "unit", "nn"):
            vals = tuple(sorted(float(v) for v in getattr(self, name)))
            if not vals:
                raise ValueError(f"empty grid for lambda_{name}")
            object.__setattr__(self, name, vals)


@dataclass(frozen=True)
class TuneResult:
    best: TuningTriple
    trace: tuple[tuple[TuningTriple, float], ...]

    @property
    def q_min(self) -> float:
        return min(q for _, q in self.trace)


def default_grid(panel: Panel) -> TuningGrid:
    """Default search grid; the nuclear-norm axis is scaled by the TWFE
    residual standard deviation of the panel's control cells."""
    mask = 1.0 - panel.W
    alpha, beta = _twfe(panel.Y, mask)
    resid = (panel.Y - alpha[:, None] - beta[None, :])[mask > 0]
    sigma = float(resid.std())
    if sigma <= 0:
        sigma = 1.0
    nn = (math.inf,) + tuple(np.logspace(-3, 0, 13) * sigma)
    return TuningGrid(time=DEFAULT_DECAY_GRID, unit=DEFAULT_DECAY_GRID, nn=nn)


def _twfe(Y, mask):
    from .solver import fit_weighted_twfe

    return fit_weighted_twfe(Y, mask)


class _CellEngine:
    """Shared per-panel state for repeated cell estimates: pairwise distance
    sums, warm starts chained across targets, and an optional covariate path."""

    def __init__(self, panel: Panel, tol: float | None = None, max_iter: int | None = None):
        self.panel = panel
        self.Y = panel.Y
        self.W = panel.W
        self.control = 1.0 - panel.W
        self._distances: UnitDistances | None = None
        self._warm: TwoWayFactorFit | None = None
        self._cell_warm: dict[tuple[int, int], TwoWayFactorFit] = {}
        self.tol = tol
        self.max_iter = max_iter
        self.nonconverged = 0

    @property
    def distances(self) -> UnitDistances:
        if self._distances is None:
            self._distances = UnitDistances(self.panel)
        return self._distances

    def weights_for(self, target, lam: TuningTriple) -> CellWeights:
        dist = self.distances if lam.lambda_unit > 0 else None
        return cell_weights(self.panel, target, lam, distances=dist)

    def mask_for(self, target, lam: TuningTriple) -> np.ndarray:
        cw = self.weights_for(target, lam)
        mask = np.outer(cw.omega, cw.theta) * self.control
        mask[target] = 0.0
        return mask

    def _fit(self, mask, lambda_nn: float, warm) -> TwoWayFactorFit:
        kw = {}
        if self.tol is not None:
            kw["tol"] = self.tol
        if self.max_iter is not None:
            kw["max_iter"] = self.max_iter
        fit = fit_weighted_lowrank(self.Y, mask, lambda_nn, warm=warm, **kw)
        if not fit.converged:
            self.nonconverged += 1
        return fit

    def reset_warm(self):
        self._warm = None

    def tau(self, target, lam: TuningTriple, warm_ok=True) -> float:
        """Pseudo-effect for one target cell.

        Leave-one-out hygiene: a control target's fit may only warm-start
        from that same cell's earlier fits (their masks also excluded it),
        never from fits whose loss saw the target's outcome.  Treated
        targets carry no loss weight anywhere, so any chain is safe.
        """
        i, t = target
        treated = self.W[i, t] > 0
        warm = None
        if warm_ok and lam.lambda_nn != math.inf:
            warm = self._cell_warm.get(target)
            if warm is None and treated:
                warm = self._warm
        fit = self._fit(self.mask_for(target, lam), lam.lambda_nn, warm)
        if lam.lambda_nn != math.inf:
            self._cell_warm[target] = fit
            if treated:
                self._warm = fit
        return float(self.Y[i, t] - fit.alpha[i] - fit.beta[t] - fit.L[i, t])

    def tau_block_uniform(self, targets, lam: TuningTriple) -> dict[tuple[int, int], float]:
        """Fast path for lambda_unit = lambda_time = 0 and treated targets:
        the loss mask is (1 - W) for every such target, so one fit serves all."""
        warm = self._warm if lam.lambda_nn != math.inf else None
        fit = self._fit(self.control, lam.lambda_nn, warm)
        if lam.lambda_nn != math.inf:
            self._warm = fit
        pred = fit.predict()
        return {(i, t): float(self.Y[i, t] - pred[i, t]) for i, t in targets}

    def tau_treated_grouped(self, targets, lam: TuningTriple) -> dict[tuple[int, int], float]:
        """Treated targets whose loss masks coincide share one fit.

        All treated cells already carry zero loss weight, so the mask for a
        treated target depends only on its unit's distance profile (only when
        lambda_unit > 0) and its period (only when lambda_time > 0).
        """
        taus: dict[tuple[int, int], float] = {}
        groups: dict[tuple, list[tuple[int, int]]] = {}
        for i, t in sorted(targets):
            key = (i if lam.lambda_unit > 0 else None, t if lam.lambda_time > 0 else None)
            groups.setdefault(key, []).append((i, t))
        def _key(k):
            return (-1 if k[0] is None else k[0], -1 if k[1] is None else k[1])

        for key in sorted(groups, key=_key):
            members = groups[key]
            rep = members[0]
            warm = self._warm if lam.lambda_nn != math.inf else None
            fit = self._fit(self.mask_for(rep, lam), lam.lambda_nn, warm)
            if lam.lambda_nn != math.inf:
                self._warm = fit
            pred = fit.predict()
            for i, t in members:
                taus[(i, t)] = float(self.Y[i, t] - pred[i, t])
        return taus


def estimate_cell(
    panel: Panel,
    target: tuple[int, int],
    lam: TuningTriple,
    engine: _CellEngine | None = None,
    tol: float | None = None,
    max_iter: int | None = None,
) -> float:
    """Effect estimate for one cell (treated or pseudo-treated control)."""
    fresh = engine is None
    if fresh:
        engine = _CellEngine(panel, tol=tol, max_iter=max_iter)
    return engine.tau(target, lam, warm_ok=not fresh)


def loocv_q(
    panel: Panel,
    lam: TuningTriple,
    cells: list[tuple[int, int]] | None = None,
    engine: _CellEngine | None = None,
) -> float:
    """Cross-validation criterion: sum of squared pseudo-effects over control
    cells, each computed as if that cell were the treated one.

    ``cells`` restricts the sum to a subsample (speed knob); the default uses
    every control cell when N*T <= 4000 and a fixed-seed subsample of 2000
    otherwise.
    """
    if engine is None:
        engine = _CellEngine(panel)
    if cells is None:
        cells = default_q_cells(panel)
    engine.reset_warm()
    total = 0.0
    for target in cells:
        total += engine.tau(target, lam) ** 2
    return total


def default_q_cells(panel: Panel, limit: int | None = None) -> list[tuple[int, int]]:
    """Control cells entering Q, row-major; subsampled with a fixed seed when
    the panel is large (or when ``limit`` is given)."""
    ii, tt = np.nonzero(panel.W == 0)
    cells = list(zip(ii.tolist(), tt.tolist()))
    cap = limit
    if cap is None and panel.Y.size > Q_SUBSAMPLE_CUTOFF:
        cap = Q_SUBSAMPLE_SIZE
    if cap is not None and len(cells) > cap:
        rng = np.random.default_rng(Q_SUBSAMPLE_SEED)
        keep = rng.choice(len(cells), size=cap, replace=False)
        cells = [cells[k] for k in sorted(keep.tolist())]
    return cells


def _refine_axis(values: tuple[float, ...], bound: float, log_scale: bool) -> tuple[float, ...]:
    """Grid values at or below the stage-1 optimum, densified with midpoints."""
    kept = [v for v in values if v <= bound]
    if not kept:
        kept = [values[0]]
    mids = []
    for a, b in zip(kept, kept[1:]):
        if not (math.isfinite(a) and math.isfinite(b)):
            continue
        if log_scale and a > 0:
            mids.append(math.sqrt(a * b))
        else:
            mids.append(0.5 * (a + b))
    return tuple(sorted(set(kept) | set(mids)))


def tune(
    panel: Panel,
    grid: TuningGrid | None = None,
    cells: list[tuple[int, int]] | None = None,
    normalize: bool = True,
    max_cycles: int = MAX_CYCLES,
    fit_max_iter: int | None = 150,
) -> TuneResult:
    """Cross-validate the tuning triple.

    Stage 1 runs three independent 1-d sweeps (each remaining coordinate at
    its "off" value); the optima bound refined grids for stage 2, which cycles
    through the coordinates until a full cycle leaves the triple unchanged.
    Ties always break toward the smaller value.

    Criterion fits use a reduced iteration budget (``fit_max_iter``); the
    criterion only ranks candidate triples, and the final estimates are
    refit at the solver's full budget.
    """
    if normalize:
        panel, _, _ = normalize_outcomes(panel)
    if grid is None:
        grid = default_grid(panel)
    if cells is None:
        cells = default_q_cells(panel)
    engine = _CellEngine(panel, max_iter=fit_max_iter)
    cache: dict[TuningTriple, float] = {}
    trace: list[tuple[TuningTriple, float]] = []

    def q_of(lam: TuningTriple) -> float:
        if lam not in cache:
            val = loocv_q(panel, lam, cells=cells, engine=engine)
            cache[lam] = val
            trace.append((lam, val))
        return cache[lam]

    def sweep(axis: str, values, current: TuningTriple) -> TuningTriple:
        best = None
        best_q = math.inf
        for v in values:
            lam = current.replace(**{axis: float(v)})
            q = q_of(lam)
            if q < best_q:
                best_q, best = q, lam
        return best

    off = TuningTriple(lambda_unit=0.0, lambda_time=0.0, lambda_nn=math.inf)
    t_best = sweep("lambda_time", grid.time, off)
    u_best = sweep("lambda_unit", grid.unit, off)
    n_best = sweep("lambda_nn", grid.nn, off)

    refined_time = _refine_axis(grid.time, t_best.lambda_time, log_scale=False)
    refined_unit = _refine_axis(grid.unit, u_best.lambda_unit, log_scale=False)
    refined_nn = _refine_axis(grid.nn, n_best.lambda_nn, log_scale=True)

    current = TuningTriple(
        lambda_unit=u_best.lambda_unit,
        lambda_time=t_best.lambda_time,
        lambda_nn=n_best.lambda_nn,
    )
    q_of(current)
    for _ in range(max_cycles):
        before = current
        current = sweep("lambda_time", refined_time, current)
        current = sweep("lambda_unit", refined_unit, current)
        current = sweep("lambda_nn", refined_nn, current)
        if current == before:
            break

    # final pick: minimal Q over everything evaluated, ties toward smaller lambda
    q_min = min(q for _, q in trace)
    winners = [lam for lam, q in trace if q == q_min]
    best = min(winners, key=lambda l: l.sort_key())
    return TuneResult(best=best, trace=tuple(trace))


def estimate_att(
    panel: Panel,
    lam: TuningTriple | None = None,
    grid: TuningGrid | None = None,
    q_cells: list[tuple[int, int]] | None = None,
    normalize: bool = True,
    tol: float | None = None,
    max_iter: int | None = None,
) -> AttResult:
    """Average treatment effect on the treated: tunes lambda when absent,
    estimates every treated cell, and averages with equal cell weights.

    Outcomes are internally rescaled to mean 0 / sd 1 (tuning values refer to
    that scale); estimates are mapped back before returning.
    """
    targets = panel.treated_cells()
    if not targets:
        raise NoTreatedCells("panel has no treated cells")

    scale = 1.0
    work = panel
    if normalize:
        work, _, scale = normalize_outcomes(panel)

    trace: list[tuple[TuningTriple, float]] = []
    if lam is None:
        tuned = tune(work, grid=grid, cells=q_cells, normalize=False)
        lam = tuned.best
        trace = list(tuned.trace)

    engine = _CellEngine(work, tol=tol, max_iter=max_iter)
    if lam.lambda_unit == 0.0 and lam.lambda_time == 0.0:
        taus = engine.tau_block_uniform(targets, lam)
    else:
        taus = engine.tau_treated_grouped(targets, lam)
    taus = {k: v * scale for k, v in taus.items()}
    att = float(np.mean(list(taus.values())))
    return AttResult(
        att=att,
        tau_cells=taus,
        lam=lam,
        q_surface=trace,
        method="trop",
        unit_labels=panel.unit_labels,
        time_labels=panel.time_labels,
        converged=engine.nonconverged == 0,
    )


def estimate_cell_with_covariates(
    panel: Panel,
    target: tuple[int, int],
    lam: TuningTriple,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> float:
    """Like :func:`estimate_cell` with an additive covariate term X beta in
    the regression, beta refit by weighted least squares inside the loop."""
    if panel.X is None:
        raise ValueError("panel has no covariates")
    engine = _CellEngine(panel)
    mask = engine.mask_for(target, lam)
    Y, X = panel.Y, panel.X
    p = X.shape[2]
    Xf = X.reshape(-1, p)
    wf = mask.ravel()

    gram = Xf.T @ (wf[:, None] * Xf)
    if p and np.linalg.matrix_rank(gram) < p:
        raise RankDeficientCovariates("singular weighted covariate Gram matrix")

    beta_x = np.zeros(p)
    fit = None
    obj = math.inf
    for _ in range(max_iter):
        adj = Y - (X @ beta_x)
        fit = fit_weighted_lowrank(adj, mask, lam.lambda_nn, warm=fit, max_iter=50)
        resid = (Y - fit.predict()).ravel()
        beta_x = np.linalg.solve(gram, Xf.T @ (wf * resid))
        full_resid = resid - Xf @ beta_x
        new_obj = float(wf @ full_resid**2)
        if lam.lambda_nn != math.inf:
            from .solver import nuclear_norm

            new_obj += lam.lambda_nn * nuclear_norm(fit.L)
        if abs(obj - new_obj) < tol * max(abs(obj), 1e-12):
            break
        obj = new_obj
    i, t = target
    pred = fit.alpha[i] + fit.beta[t] + fit.L[i, t] + float(X[i, t] @ beta_x)
    return float(Y[i, t] - pred)


def att_result_to_json(result: AttResult) -> str:
    """The JSON result document: att, se, lambda, per-cell effects, Q trace."""

    def lam_doc(lam: TuningTriple):
        return {
            "unit": lam.lambda_unit,
            "time": lam.lambda_time,
            "nn": "inf" if lam.lambda_nn == math.inf else lam.lambda_nn,
        }

    cells = [
        {
            "unit": result.unit_labels[i] if result.unit_labels else i,
            "time": result.time_labels[t] if result.time_labels else t,
            "tau": tau,
        }
        for (i, t), tau in sorted(result.tau_cells.items())
    ]
    doc = {
        "method": result.method,
        "att": result.att,
        "se": result.se,
        "lambda": lam_doc(result.lam),
        "cells": cells,
        "q_surface": [{"lambda": lam_doc(l), "q": q} for l, q in result.q_surface],
    }
    return json.dumps(doc, indent=2)
