"""Semi-synthetic simulation laboratory.

``calibrate`` fits a rank-4 factor model to a seed panel, splits it into
additive and interactive parts, models residual serial correlation with a
pooled AR(2), and fits a logistic assignment model on the per-unit additive
and interactive scores.  ``generate`` then draws placebo panels (outcomes =
fitted factor structure + Gaussian noise with the AR(2) autocovariance;
treatment assigned by one of four modes), and ``run_study`` scores any set of
estimators on per-cell counterfactual error across replications.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import toeplitz

from .baselines import did, mc, sc, sdid, simplex_lstsq
from .errors import (
    InfeasibleSweepValue,
    InsufficientControls,
    NonStationaryAR,
    SeparationInLogistic,
)
from .estimator import TuningGrid, default_q_cells, estimate_att, tune
from .panel import Panel, detect_block, normalize_outcomes
from .solver import deterministic_svd, fit_truncated_rank
from .weights import TuningTriple

__all__ = [
    "DgpSpec",
    "SimReport",
    "calibrate",
    "generate",
    "run_study",
    "ablate",
    "sweep",
    "ar2_autocov",
    "spec_to_json",
    "spec_from_json",
]

TUNE_STREAM = 1_000_003  # reserved replication index for the tuning draw
STATIONARITY_MARGIN = 0.02
METHODS = ("did", "difp", "mc", "sc", "sdid", "trop")


@dataclass(frozen=True, eq=False)
class DgpSpec:
    """Calibrated design: factor structure, noise law, and assignment model."""

    L: np.ndarray  # N x T rank-r fit
    F: np.ndarray  # additive part of L
    M: np.ndarray  # interactive part of L
    ar: tuple[float, float, float]  # (rho1, rho2, innovation variance)
    Sigma: np.ndarray  # T x T noise covariance per unit row
    phi: tuple[float, float]  # assignment coefficients (phi_alpha, phi_M)
    unit_scores: np.ndarray  # N x 2 columns (alpha_i, M_i)
    n_tr: int
    t_post: int
    assignment_mode: str = "logistic"
    effect: float = 0.0
    rank: int = 4
    unit_labels: tuple[str, ...] = ()
    time_labels: tuple[str, ...] = ()
    actual_treated_unit: int | None = None
    seed_pre_periods: int | None = None
    sc_probs: np.ndarray | None = None
    ar_clipped: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.L.shape


@dataclass
class SimReport:
    """Per-method RMSE / bias of counterfactual prediction on treated cells."""

    rmse: dict[str, float]
    bias: dict[str, float]
    rmse_normalized: dict[str, float]
    reps: int
    seed: int
    best_method: str
    lambdas: dict[str, object]
    axis: str | None = None
    value: float | None = None

    def rows(self) -> list[dict]:
        out = []
        for m in sorted(self.rmse):
            row = {
                "method": m,
                "rmse": self.rmse[m],
                "bias": self.bias[m],
                "rmse_normalized": self.rmse_normalized[m],
                "reps": self.reps,
                "seed": self.seed,
            }
            if self.axis is not None:
                row["axis"] = self.axis
                row["value"] = self.value
            out.append(row)
        return out


def ar2_autocov(rho1: float, rho2: float, sigma2: float, T: int) -> np.ndarray:
    """Stationary AR(2) autocovariance Toeplitz matrix of order T."""
    if sigma2 <= 0:
        return np.zeros((T, T))
    denom = (1.0 + rho2) * ((1.0 - rho2) ** 2 - rho1**2)
    g0 = sigma2 * (1.0 - rho2) / denom
    g = np.empty(T)
    g[0] = g0
    if T > 1:
        g[1] = rho1 * g0 / (1.0 - rho2) if rho2 != 1.0 else 0.0
    for k in range(2, T):
        g[k] = rho1 * g[k - 1] + rho2 * g[k - 2]
    return toeplitz(g)


def _stationarity_gap(rho1: float, rho2: float) -> float:
    """Largest of the three AR(2) stationarity constraint values (<1 means
    stationary)."""
    return max(rho1 + rho2, rho2 - rho1, abs(rho2))


def _clip_ar(rho1: float, rho2: float, margin: float = STATIONARITY_MARGIN):
    gap = _stationarity_gap(rho1, rho2)
    if gap <= 1.0 - margin:
        return rho1, rho2, False
    c = (1.0 - margin) / gap
    return c * rho1, c * rho2, True


def _fit_pooled_ar2(resid: np.ndarray) -> tuple[float, float, float]:
    """Least-squares AR(2) on residual rows, pooled across units."""
    y = resid[:, 2:].ravel()
    x1 = resid[:, 1:-1].ravel()
    x2 = resid[:, :-2].ravel()
    X = np.column_stack([x1, x2])
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    rho1, rho2 = float(coef[0]), float(coef[1])
    sigma2 = float(np.mean((y - X @ coef) ** 2))
    return rho1, rho2, sigma2


def _fit_logit(D: np.ndarray, scores: np.ndarray, ridge: float = 0.0):
    """Newton logistic fit of D on scores (no intercept); returns (coef,
    converged)."""
    phi = np.zeros(scores.shape[1])
    for _ in range(100):
        eta = scores @ phi
        p = 1.0 / (1.0 + np.exp(-eta))
        g = scores.T @ (D - p) - ridge * phi
        s = np.maximum(p * (1.0 - p), 1e-12)
        H = scores.T @ (s[:, None] * scores) + ridge * np.eye(scores.shape[1])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return phi, False
        phi = phi + step
        if np.abs(step).max() < 1e-10:
            if np.abs(phi).max() > 50.0:
                return phi, False  # separation: diverging coefficients
            return phi, True
    return phi, False


def calibrate(
    panel: Panel,
    rank: int = 4,
    n_tr: int = 10,
    t_post: int = 10,
    assignment_mode: str = "logistic",
    effect: float = 0.0,
    strict_ar: bool = False,
    strict_logit: bool = False,
) -> DgpSpec:
    """Fit the simulation design to a seed panel.

    Outcomes are normalized (mean 0, sd 1) before fitting.  The policy
    indicator for the assignment logit is "unit ever treated" in the seed;
    seeds without treated units can only use the uniform_random mode.
    """
    if panel.n_periods < 5:
        raise InfeasibleSweepValue("calibration needs at least 5 periods")
    work, _, _ = normalize_outcomes(panel)
    Y = work.Y
    n, T = Y.shape

    L = fit_truncated_rank(Y, rank)
    row = L.mean(axis=1, keepdims=True)
    col = L.mean(axis=0, keepdims=True)
    grand = L.mean()
    F = row + col - grand
    M = L - F
    L = F + M  # recompose so the stored parts sum to L bitwise

    rho1, rho2, sigma2 = _fit_pooled_ar2(Y - L)
    if strict_ar and _stationarity_gap(rho1, rho2) >= 1.0:
        raise NonStationaryAR(f"fitted AR(2) ({rho1:.3f}, {rho2:.3f}) is non-stationary")
    rho1, rho2, clipped = _clip_ar(rho1, rho2)
    Sigma = ar2_autocov(rho1, rho2, sigma2, T)

    alpha_scores = F.mean(axis=1) - F.mean()
    u, s, _ = deterministic_svd(M)
    m_scores = u[:, 0] * s[0]
    scores = np.column_stack([alpha_scores, m_scores])

    D = work.W.any(axis=1).astype(float)
    phi = (0.0, 0.0)
    if D.any() and not D.all():
        coef, ok = _fit_logit(D, scores)
        if not ok:
            if strict_logit:
                raise SeparationInLogistic("assignment logit did not converge")
            coef, _ = _fit_logit(D, scores, ridge=1e-4)
        phi = (float(coef[0]), float(coef[1]))

    treated_units = np.nonzero(work.W.any(axis=1))[0]
    actual = int(treated_units[0]) if treated_units.size else None
    pre_mask = ~work.W.any(axis=0)
    seed_pre = int(pre_mask.sum()) if treated_units.size else T

    sc_probs = None
    if actual is not None and seed_pre >= 2:
        block = detect_block(work)
        if block is not None and block.n0 >= 2:
            co = list(block.control_units)
            pre = list(block.pre_periods)
            A = Y[np.ix_(co, pre)].T
            zeta2 = (len(pre)) * np.var(np.diff(Y[np.ix_(co, pre)], axis=1))
            w, _ = simplex_lstsq(A, Y[actual, pre], ridge=zeta2, intercept=True)
            sc_probs = np.zeros(n)
            sc_probs[co] = w + 1e-6
            sc_probs /= sc_probs.sum()

    return DgpSpec(
        L=L, F=F, M=M,
        ar=(rho1, rho2, sigma2),
        Sigma=Sigma,
        phi=phi,
        unit_scores=scores,
        n_tr=n_tr, t_post=t_post,
        assignment_mode=assignment_mode,
        effect=effect,
        rank=rank,
        unit_labels=work.unit_labels,
        time_labels=work.time_labels,
        actual_treated_unit=actual,
        seed_pre_periods=seed_pre,
        sc_probs=sc_probs,
        ar_clipped=clipped,
    )


def _chol(Sigma: np.ndarray) -> np.ndarray:
    if not Sigma.any():
        return np.zeros_like(Sigma)
    jitter = 0.0
    scale = float(np.trace(Sigma)) / Sigma.shape[0]
    for _ in range(6):
        try:
            return np.linalg.cholesky(Sigma + jitter * np.eye(Sigma.shape[0]))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12 * scale)
    raise np.linalg.LinAlgError("noise covariance is not positive semidefinite")


def generate(spec: DgpSpec, seed) -> tuple[Panel, np.ndarray]:
    """Draw one placebo panel and its untreated truth.

    Noise rows are mean-zero Gaussian with covariance Sigma, independent
    across units; treatment follows ``spec.assignment_mode`` with exactly
    ``n_tr`` treated units in the last ``t_post`` periods.  ``actual_unit``
    mode restricts the panel to the seed's pre-treatment window and treats
    the seed's own treated unit in its last ``t_post`` periods.
    """
    rng = np.random.default_rng(seed)
    n, T = spec.shape
    mode = spec.assignment_mode

    if mode == "actual_unit":
        if spec.actual_treated_unit is None:
            raise InfeasibleSweepValue("seed panel has no treated unit to replay")
        T_use = spec.seed_pre_periods or T
        if spec.t_post >= T_use:
            raise InfeasibleSweepValue("t_post exceeds the held-out pre window")
        treated_units = np.array([spec.actual_treated_unit])
        n_tr = 1
    else:
        T_use = T
        n_tr = spec.n_tr
        if n_tr >= n:
            raise InsufficientControls(f"n_tr={n_tr} leaves no controls out of {n}")
        if mode == "logistic":
            eta = spec.unit_scores @ np.asarray(spec.phi)
            p = 1.0 / (1.0 + np.exp(-eta))
            treated_units = rng.choice(n, size=n_tr, replace=False, p=p / p.sum())
        elif mode == "uniform_random":
            treated_units = rng.choice(n, size=n_tr, replace=False)
        elif mode == "sc_weighted":
            if spec.sc_probs is None:
                raise InfeasibleSweepValue("seed design carries no SC-weighted probabilities")
            p = spec.sc_probs / spec.sc_probs.sum()
            treated_units = rng.choice(n, size=n_tr, replace=False, p=p)
        else:
            raise ValueError(f"unknown assignment mode {mode!r}")

    L = spec.L[:, :T_use]
    Sigma = spec.Sigma[:T_use, :T_use]
    chol = _chol(Sigma)
    eps = rng.standard_normal((n, T_use)) @ chol.T
    truth = L + eps

    W = np.zeros((n, T_use))
    W[np.sort(treated_units)[:, None], np.arange(T_use - spec.t_post, T_use)] = 1.0
    Y = truth + spec.effect * W

    units = spec.unit_labels or tuple(f"u{i}" for i in range(n))
    times = (spec.time_labels or tuple(f"t{s}" for s in range(T)))[:T_use]
    return Panel(Y, W, units, times), truth


def _method_errors(panel, truth, method, effect, lam_trop, lam_nn_mc, grid):
    """Per-cell counterfactual errors (estimate minus true effect)."""
    if method == "trop":
        res = estimate_att(panel, lam=lam_trop, grid=grid)
        return [tau - effect for _, tau in sorted(res.tau_cells.items())]
    if method == "did":
        g = did(panel)
    elif method == "sc":
        g = sc(panel, intercept=False)
    elif method == "difp":
        g = sc(panel, intercept=True)
    elif method == "sdid":
        g = sdid(panel)
    elif method == "mc":
        g = mc(panel, lam_nn=lam_nn_mc)
    else:
        raise ValueError(f"unknown method {method!r}")
    errs = g.errors(panel.Y)
    return [errs[c] - effect for c in sorted(errs)]


def _one_replication(args):
    spec, seed, rep, methods, lam_trop, lam_nn_mc, n_control = args
    panel, truth = generate(spec, [seed, rep])
    if n_control is not None:
        panel, truth = _subsample_controls(panel, truth, n_control, [seed, rep, 7])
    return {
        m: _method_errors(panel, truth, m, spec.effect, lam_trop, lam_nn_mc, None)
        for m in methods
    }


def _subsample_controls(panel, truth, n_control, seed):
    rng = np.random.default_rng(seed)
    treated = np.nonzero(panel.W.any(axis=1))[0]
    controls = np.nonzero(~panel.W.any(axis=1))[0]
    if n_control > controls.size:
        raise InfeasibleSweepValue(f"only {controls.size} control units available")
    keep = np.sort(np.concatenate([treated, rng.choice(controls, n_control, replace=False)]))
    sub = Panel(
        panel.Y[keep], panel.W[keep],
        [panel.unit_labels[k] for k in keep], panel.time_labels,
        None if panel.X is None else panel.X[keep],
    )
    return sub, truth[keep]


def tune_for_study(
    spec: DgpSpec,
    seed: int,
    q_cells_limit: int | None = None,
    grid: TuningGrid | None = None,
    want_trop: bool = True,
    want_mc: bool = True,
) -> tuple[TuningTriple | None, float | None]:
    """Cross-validate TROP's triple and/or MC's penalty once, on a dedicated
    tuning replication (paper-style: a single CV per design)."""
    panel, _ = generate(spec, [seed, TUNE_STREAM])
    work, _, _ = normalize_outcomes(panel)
    cells = default_q_cells(work, limit=q_cells_limit)
    lam = tune(work, grid=grid, cells=cells, normalize=False).best if want_trop else None
    lam_nn_mc = None
    if want_mc:
        from .estimator import default_grid as _dg

        base = grid if grid is not None else _dg(work)
        nn_only = TuningGrid(time=(0.0,), unit=(0.0,), nn=base.nn)
        lam_nn_mc = tune(work, grid=nn_only, cells=cells, normalize=False).best.lambda_nn
    return lam, lam_nn_mc


def run_study(
    spec: DgpSpec,
    methods=METHODS,
    reps: int = 200,
    seed: int = 42,
    lam_trop: TuningTriple | None = None,
    lam_nn_mc: float | None = None,
    q_cells_limit: int | None = None,
    grid: TuningGrid | None = None,
    jobs: int = 1,
    n_control: int | None = None,
) -> SimReport:
    """Monte Carlo placebo study: RMSE and bias of per-cell counterfactual
    prediction for each method, normalized by the best method's RMSE.

    TROP / MC penalties are cross-validated once on a dedicated tuning draw
    unless supplied.  Deterministic for fixed (spec, seed, reps, methods),
    and identical for any ``jobs``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    methods = sorted(set(methods))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods: {bad}")

    need_trop = "trop" in methods and lam_trop is None
    need_mc = "mc" in methods and lam_nn_mc is None
    if need_trop or need_mc:
        tuned_lam, tuned_nn = tune_for_study(
            spec, seed, q_cells_limit, grid, want_trop=need_trop, want_mc=need_mc
        )
        lam_trop = lam_trop if lam_trop is not None else tuned_lam
        lam_nn_mc = lam_nn_mc if lam_nn_mc is not None else tuned_nn

    tasks = [
        (spec, seed, rep, methods, lam_trop, lam_nn_mc, n_control)
        for rep in range(reps)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_replication, tasks, chunksize=4))
    else:
        results = [_one_replication(t) for t in tasks]

    errors = {m: [] for m in methods}
    for res in results:
        for m in methods:
            errors[m].extend(res[m])
    rmse = {m: float(np.sqrt(np.mean(np.square(errors[m])))) for m in methods}
    bias = {m: float(np.mean(errors[m])) for m in methods}
    best = min(methods, key=lambda m: (rmse[m], m))
    norm = {m: rmse[m] / rmse[best] for m in methods}
    lambdas: dict[str, object] = {}
    if "trop" in methods:
        lambdas["trop"] = lam_trop
    if "mc" in methods:
        lambdas["mc_nn"] = lam_nn_mc
    return SimReport(
        rmse=rmse, bias=bias, rmse_normalized=norm,
        reps=reps, seed=seed, best_method=best, lambdas=lambdas,
    )


def ablate(spec: DgpSpec, component: str) -> DgpSpec:
    """Zero one outcome-model component: ``no_ar`` (white noise, marginal
    variance kept), ``no_M``, ``no_F``, or ``only_noise``."""
    if component == "no_ar":
        g0 = float(spec.Sigma[0, 0])
        T = spec.shape[1]
        return replace(spec, ar=(0.0, 0.0, g0), Sigma=g0 * np.eye(T), ar_clipped=False)
    if component == "no_M":
        return replace(spec, L=spec.F.copy(), M=np.zeros_like(spec.M))
    if component == "no_F":
        return replace(spec, L=spec.M.copy(), F=np.zeros_like(spec.F))
    if component == "only_noise":
        z = np.zeros_like(spec.L)
        return replace(spec, L=z, F=z.copy(), M=z.copy())
    raise ValueError(f"unknown ablation {component!r}")


def sweep(
    spec: DgpSpec,
    axis: str,
    values,
    methods=METHODS,
    reps: int = 200,
    seed: int = 42,
    **study_kw,
) -> list[SimReport]:
    """One study per value of the swept design feature.

    ``n_control`` subsamples control units per replication; ``t_pre`` keeps
    the last (t_pre + t_post) periods of the design; ``n_treated`` and
    ``t_post`` change the treated block shape.
    """
    n, T = spec.shape
    out = []
    for v in values:
        v = int(v)
        mod = spec
        n_control = None
        if axis == "n_control":
            if v < 2 or v > n - spec.n_tr:
                raise InfeasibleSweepValue(f"n_control={v} infeasible for N={n}")
            n_control = None if v == n - spec.n_tr else v
        elif axis == "t_pre":
            keep = v + spec.t_post
            if v < 2 or keep > T:
                raise InfeasibleSweepValue(f"t_pre={v} infeasible for T={T}")
            mod = replace(
                spec,
                L=spec.L[:, -keep:], F=spec.F[:, -keep:], M=spec.M[:, -keep:],
                Sigma=spec.Sigma[:keep, :keep],
                time_labels=tuple(spec.time_labels[-keep:]) if spec.time_labels else (),
            )
        elif axis == "n_treated":
            if not 1 <= v < n:
                raise InfeasibleSweepValue(f"n_treated={v} infeasible for N={n}")
            mod = replace(spec, n_tr=v)
        elif axis == "t_post":
            if not 1 <= v < T:
                raise InfeasibleSweepValue(f"t_post={v} infeasible for T={T}")
            mod = replace(spec, t_post=v)
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        report = run_study(mod, methods=methods, reps=reps, seed=seed,
                           n_control=n_control, **study_kw)
        report.axis = axis
        report.value = float(v)
        out.append(report)
    return out


def spec_to_json(spec: DgpSpec) -> str:
    """Full numeric payload of a design."""
    doc = {
        "L": spec.L.tolist(),
        "F": spec.F.tolist(),
        "M": spec.M.tolist(),
        "ar": list(spec.ar),
        "Sigma": spec.Sigma.tolist(),
        "phi": list(spec.phi),
        "unit_scores": spec.unit_scores.tolist(),
        "n_tr": spec.n_tr,
        "t_post": spec.t_post,
        "assignment_mode": spec.assignment_mode,
        "effect": spec.effect,
        "rank": spec.rank,
        "unit_labels": list(spec.unit_labels),
        "time_labels": list(spec.time_labels),
        "actual_treated_unit": spec.actual_treated_unit,
        "seed_pre_periods": spec.seed_pre_periods,
        "sc_probs": None if spec.sc_probs is None else spec.sc_probs.tolist(),
        "ar_clipped": spec.ar_clipped,
    }
    return json.dumps(doc)


def spec_from_json(text: str) -> DgpSpec:
    doc = json.loads(text)
    return DgpSpec(
        L=np.asarray(doc["L"], dtype=float),
        F=np.asarray(doc["F"], dtype=float),
        M=np.asarray(doc["M"], dtype=float),
        ar=tuple(doc["ar"]),
        Sigma=np.asarray(doc["Sigma"], dtype=float),
        phi=tuple(doc["phi"]),
        unit_scores=np.asarray(doc["unit_scores"], dtype=float),
        n_tr=int(doc["n_tr"]),
        t_post=int(doc["t_post"]),
        assignment_mode=doc["assignment_mode"],
        effect=float(doc["effect"]),
        rank=int(doc["rank"]),
        unit_labels=tuple(doc["unit_labels"]),
        time_labels=tuple(doc["time_labels"]),
        actual_treated_unit=doc["actual_treated_unit"],
        seed_pre_periods=doc["seed_pre_periods"],
        sc_probs=None if doc["sc_probs"] is None else np.asarray(doc["sc_probs"], dtype=float),
        ar_clipped=bool(doc["ar_clipped"]),
    )
