"""Distance computations and exponential-decay weight kernels.

For a target cell (i, t) the regression loss is weighted by

    theta_s = exp(-lambda_time * |t - s|)
    omega_j = exp(-lambda_unit * d(j, i))

where d(j, i) is the root-mean-square outcome gap between units j and i over
the periods (excluding t) in which both are under control.  Raw kernels feed
the regression objective; simplex-normalized weights feed the balancing-form
identities, converted explicitly via :func:`normalize_to_simplex`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllZeroWeights, NoSharedControlPeriods
from .panel import Panel

__all__ = [
    "TuningTriple",
    "CellWeights",
    "UnitDistances",
    "time_distance",
    "unit_distance",
    "cell_weights",
    "normalize_to_simplex",
]

INF = math.inf


@dataclass(frozen=True, order=True)
class TuningTriple:
    """The three jointly cross-validated regularizers.

    ``lambda_nn = inf`` encodes "no low-rank adjustment".  Values refer to
    the normalized-outcome scale (grand mean 0, sd 1).
    """

    lambda_unit: float = 0.0
    lambda_time: float = 0.0
    lambda_nn: float = INF

    def __post_init__(self):
        for name in ("lambda_unit", "lambda_time", "lambda_nn"):
            v = float(getattr(self, name))
            if not v >= 0.0:
                raise ValueError(f"{name} must be nonnegative, got {v}")
            object.__setattr__(self, name, v)

    def sort_key(self) -> tuple[float, float, float]:
        """Lexicographic tie-break order: lambda_time, lambda_unit, lambda_nn."""
        return (self.lambda_time, self.lambda_unit, self.lambda_nn)

    def replace(self, **kw) -> "TuningTriple":
        d = {
            "lambda_unit": self.lambda_unit,
            "lambda_time": self.lambda_time,
            "lambda_nn": self.lambda_nn,
        }
        d.update(kw)
        return TuningTriple(**d)


@dataclass(frozen=True)
class CellWeights:
    """Per-target weight kernels over all periods (theta) and units (omega)."""

    target: tuple[int, int]
    theta: np.ndarray
    omega: np.ndarray
    dropped_units: tuple[int, ...] = ()

    @property
    def had_drops(self) -> bool:
        return len(self.dropped_units) > 0


def time_distance(s: int, t: int) -> float:
    """Number of periods between s and t."""
    return float(abs(t - s))


class UnitDistances:
    """Pairwise unit-distance engine with O(1) per-target exclusion.

    Precomputes, over periods where both units are under control, the pairwise
    sums of squared outcome gaps; excluding a single period t is then a rank-one
    adjustment instead of a fresh O(T) scan per pair.
    """

    def __init__(self, panel: Panel):
        Y = panel.Y
        C = 1.0 - panel.W  # control indicator
        n = panel.n_units
        # joint control indicator per pair and period: (n, n, T) kept only
        # implicitly; build squared-gap sums and counts pairwise.
        self._Y = Y
        self._C = C
        # S[i, j] = sum_u C_iu C_ju (Y_iu - Y_ju)^2 ; counts[i, j] = sum_u C_iu C_ju
        G = (C * Y) @ (C * Y).T
        sq = (C * Y**2) @ C.T
        self.counts = C @ C.T
        self.S = sq + sq.T - 2.0 * G
        np.fill_diagonal(self.S, 0.0)
        self.S = np.maximum(self.S, 0.0)  # guard tiny negative round-off

    def distances_to(self, i: int, exclude_t: int) -> np.ndarray:
        """d(j, i) for every unit j, excluding period ``exclude_t``.

        Pairs with no qualifying shared control period get +inf.
        """
        Y, C = self._Y, self._C
        both = C[:, exclude_t] * C[i, exclude_t]
        adj = both * (Y[:, exclude_t] - Y[i, exclude_t]) ** 2
        s = self.S[:, i] - adj
        cnt = self.counts[:, i] - both
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.sqrt(np.maximum(s, 0.0) / cnt)
        d[cnt <= 0] = INF
        d[i] = 0.0
        return d


def unit_distance(panel: Panel, j: int, i: int, exclude_t: int) -> float:
    """Root mean squared outcome gap between units j and i over shared
    control periods, excluding ``exclude_t``."""
    d = UnitDistances(panel).distances_to(i, exclude_t)[j]
    if d == INF:
        raise NoSharedControlPeriods(
            f"units {j} and {i} share no control period other than {exclude_t}"
        )
    return float(d)


def cell_weights(
    panel: Panel,
    target: tuple[int, int],
    lam: TuningTriple,
    distances: UnitDistances | None = None,
) -> CellWeights:
    """Exponential-decay kernels for one target cell.

    ``lambda == 0`` on an axis yields exactly uniform weights (all ones).
    Units sharing no control period with the target get weight 0 and are
    recorded in ``dropped_units``.
    """
    i, t = target
    n, T = panel.Y.shape
    if not (0 <= i < n and 0 <= t < T):
        raise IndexError(f"target {target} outside {n}x{T} panel")

    if lam.lambda_time == 0.0:
        theta = np.ones(T)
    else:
        theta = np.exp(-lam.lambda_time * np.abs(np.arange(T) - t))

    dropped: tuple[int, ...] = ()
    if lam.lambda_unit == 0.0:
        omega = np.ones(n)
    else:
        if distances is None:
            distances = UnitDistances(panel)
        d = distances.distances_to(i, t)
        finite = np.isfinite(d)
        omega = np.zeros(n)
        omega[finite] = np.exp(-lam.lambda_unit * d[finite])
        dropped = tuple(np.nonzero(~finite)[0].tolist())
    return CellWeights(target=(i, t), theta=theta, omega=omega, dropped_units=dropped)


def normalize_to_simplex(w: np.ndarray, support: np.ndarray | list[int] | None = None) -> np.ndarray:
    """Rescale ``w`` to sum to one on ``support`` and vanish off it."""
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    idx = np.arange(w.size) if support is None else np.asarray(list(support), dtype=int)
    total = w[idx].sum()
    if not total > 0:
        raise AllZeroWeights("no positive weight on the requested support")
    out[idx] = w[idx] / total
    return out
