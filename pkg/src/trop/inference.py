"""Bootstrap variance estimation for block designs.

Each draw resamples whole unit rows with replacement, separately within the
control and treated groups, so the treated block and within-unit serial
correlation are both preserved.  The estimator is recomputed on every draw
with the tuning triple held at its original value (re-tuning per draw is
available behind ``retune`` but is grid-times more expensive).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baselines import did, mc, sc, sdid
from .errors import DegenerateResample, NotBlockDesign
from .estimator import estimate_att, tune
from .panel import Panel, detect_block, normalize_outcomes
from .weights import TuningTriple

__all__ = ["BootstrapResult", "bootstrap_variance"]

MAX_REDRAWS = 10


@dataclass(frozen=True)
class BootstrapResult:
    """Variance of the estimator across row-resampled replicates."""

    variance: float
    draws: np.ndarray
    B: int
    seed: int

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)


def _att(panel: Panel, method: str, lam: TuningTriple | None) -> float:
    if method == "trop":
        return estimate_att(panel, lam=lam).att
    if method == "did":
        return did(panel).att
    if method == "sc":
        return sc(panel, intercept=False).att
    if method == "difp":
        return sc(panel, intercept=True).att
    if method == "sdid":
        return sdid(panel).att
    if method == "mc":
        return mc(panel, lam_nn=None if lam is None else lam.lambda_nn).att
    raise ValueError(f"unknown method {method!r}")


def bootstrap_variance(
    panel: Panel,
    method: str = "trop",
    B: int = 200,
    seed: int = 42,
    lam: TuningTriple | None = None,
    retune: bool = False,
) -> BootstrapResult:
    """Algorithm: B times, resample N0 control rows and N1 treated rows with
    replacement (rows keep their full outcome and treatment series), recompute
    the ATT, and report the mean squared deviation of the draws.

    Draws use split RNG streams derived from ``seed``, so results are
    deterministic and independent of evaluation order.  A draw whose control
    rows are all identical is redrawn (at most 10 times).
    """
    block = detect_block(panel)
    if block is None:
        raise NotBlockDesign("bootstrap resampling requires a block design")
    if block.n0 < 2 or block.n1 < 1:
        raise NotBlockDesign("need at least 2 control units and 1 treated unit")

    if method in ("trop", "mc") and lam is None and not retune:
        work, _, _ = normalize_outcomes(panel)
        lam = tune(work, normalize=False).best

    controls = np.asarray(block.control_units)
    treated = np.asarray(block.treated_units)
    Y, W = panel.Y, panel.W
    X = panel.X

    draws = np.empty(B)
    for b in range(B):
        rng = np.random.default_rng([seed, b])
        for attempt in range(MAX_REDRAWS + 1):
            idx_c = rng.choice(controls, size=controls.size, replace=True)
            if np.unique(idx_c).size > 1 or controls.size == 1:
                break
        else:
            raise DegenerateResample(
                f"draw {b}: control resample degenerate after {MAX_REDRAWS} retries"
            )
        idx_t = rng.choice(treated, size=treated.size, replace=True)
        rows = np.concatenate([idx_c, idx_t])
        resampled = Panel(
            Y[rows],
            W[rows],
            [panel.unit_labels[k] for k in rows],
            panel.time_labels,
            None if X is None else X[rows],
        )
        draws[b] = _att(resampled, method, None if retune else lam)

    variance = float(np.mean((draws - draws.mean()) ** 2))
    return BootstrapResult(variance=variance, draws=draws, B=B, seed=seed)
