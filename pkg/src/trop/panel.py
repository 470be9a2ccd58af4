"""Balanced-panel data model, block-assignment detection, and file I/O.

A :class:`Panel` holds an N x T outcome matrix ``Y``, a binary treatment
matrix ``W``, optional covariate slices ``X`` (N x T x p), and unit / time
labels.  Panels are immutable after construction: all arrays are stored with
the writeable flag cleared, and every transformation returns a new value.

The canonical on-disk format is long CSV with header
``unit,time,outcome,treated[,x1..xp]``, one row per cell.  A JSON form
(keys ``units``, ``times``, ``Y``, ``W``, optional ``X``) is provided for
pipeline intermediates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import (
    DegenerateOutcome,
    NonBinaryTreatment,
    ParseError,
    UnbalancedPanel,
)

__all__ = [
    "Panel",
    "BlockAssignment",
    "load_panel",
    "save_panel",
    "detect_block",
    "normalize_outcomes",
    "denormalize_outcomes",
    "panel_to_json",
    "panel_from_json",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Panel:
    """Balanced N x T panel of outcomes and binary treatment indicators."""

    Y: np.ndarray
    W: np.ndarray
    unit_labels: tuple[str, ...]
    time_labels: tuple[str, ...]
    X: np.ndarray | None = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        W = np.asarray(self.W, dtype=float)
        if Y.ndim != 2:
            raise ParseError("Y must be a 2-d matrix")
        n, t = Y.shape
        if n < 2 or t < 2:
            raise ParseError(f"panel must be at least 2x2, got {n}x{t}")
        if W.shape != Y.shape:
            raise ParseError(f"W shape {W.shape} does not match Y shape {Y.shape}")
        if not np.isfinite(Y).all():
            raise ParseError("panel outcomes contain NaN or infinite values")
        if not np.isin(W, (0.0, 1.0)).all():
            raise NonBinaryTreatment("treatment indicator must be exactly 0 or 1")
        if W.sum() >= n * t:
            raise ParseError("panel needs at least one control cell")
        if len(self.unit_labels) != n or len(self.time_labels) != t:
            raise ParseError("label counts do not match matrix dimensions")
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "W", _frozen(W.astype(int)))
        object.__setattr__(self, "unit_labels", tuple(str(u) for u in self.unit_labels))
        object.__setattr__(self, "time_labels", tuple(str(s) for s in self.time_labels))
        if self.X is not None:
            X = np.asarray(self.X, dtype=float)
            if X.ndim == 2:
                X = X[:, :, None]
            if X.shape[:2] != (n, t):
                raise ParseError(f"X shape {X.shape} does not match panel {n}x{t}")
            if not np.isfinite(X).all():
                raise ParseError("covariates contain NaN or infinite values")
            object.__setattr__(self, "X", _frozen(X))

    @property
    def n_units(self) -> int:
        return self.Y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.Y.shape[1]

    @property
    def n_covariates(self) -> int:
        return 0 if self.X is None else self.X.shape[2]

    def treated_cells(self) -> list[tuple[int, int]]:
        """Index pairs of all treated cells, row-major order."""
        ii, tt = np.nonzero(self.W)
        return list(zip(ii.tolist(), tt.tolist()))

    def with_outcomes(self, Y: np.ndarray) -> "Panel":
        """New panel sharing labels/W/X but with different outcomes."""
        return Panel(Y, self.W, self.unit_labels, self.time_labels, self.X)


@dataclass(frozen=True)
class BlockAssignment:
    """Product-form treatment: (ever-treated units) x (treated periods).

    ``n0`` / ``t0`` count control units / periods; the index tuples give the
    panel positions of each group in the panel's own ordering.
    """

    n0: int
    t0: int
    control_units: tuple[int, ...]
    treated_units: tuple[int, ...]
    pre_periods: tuple[int, ...]
    post_periods: tuple[int, ...]

    @property
    def n1(self) -> int:
        return len(self.treated_units)

    @property
    def t1(self) -> int:
        return len(self.post_periods)


def _sort_labels(labels: list[str]) -> list[str]:
    # numeric order when every label parses as a number, else lexicographic
    try:
        keyed = sorted(labels, key=float)
        return keyed
    except ValueError:
        return sorted(labels)


def load_panel(path) -> Panel:
    """Read a long CSV (``unit,time,outcome,treated[,x1..xp]``) into a Panel.

    Rows are reordered so units/times follow numeric order when all labels
    parse as numbers, lexicographic order otherwise.  Missing cells raise
    :class:`UnbalancedPanel` listing the absent pairs.
    """
    try:
        df = pd.read_csv(path, dtype={"unit": str, "time": str})
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    required = ["unit", "time", "outcome", "treated"]
    if list(df.columns[:4]) != required:
        raise ParseError(
            f"expected header unit,time,outcome,treated[,x1..], got {list(df.columns)}"
        )
    xcols = [c for c in df.columns[4:]]
    for c in ["outcome", "treated", *xcols]:
        df[c] = pd.to_numeric(df[c], errors="coerce")
        if df[c].isna().any():
            bad = df.index[df[c].isna()][0]
            raise ParseError(f"non-numeric value in column {c!r} at row {bad + 2}")

    units = _sort_labels(df["unit"].unique().tolist())
    times = _sort_labels(df["time"].unique().tolist())
    uidx = {u: i for i, u in enumerate(units)}
    tidx = {s: j for j, s in enumerate(times)}

    pairs = set(zip(df["unit"], df["time"]))
    if len(pairs) != len(df):
        raise ParseError("duplicate (unit,time) rows in input")
    if len(pairs) != len(units) * len(times):
        missing = [(u, s) for u in units for s in times if (u, s) not in pairs]
        raise UnbalancedPanel(missing)

    n, t = len(units), len(times)
    Y = np.empty((n, t))
    W = np.empty((n, t))
    X = np.empty((n, t, len(xcols))) if xcols else None
    rows = df["unit"].map(uidx).to_numpy()
    cols = df["time"].map(tidx).to_numpy()
    Y[rows, cols] = df["outcome"].to_numpy()
    treated = df["treated"].to_numpy(dtype=float)
    if not np.isin(treated, (0.0, 1.0)).all():
        raise NonBinaryTreatment("column 'treated' must contain only 0 or 1")
    W[rows, cols] = treated
    if X is not None:
        for k, c in enumerate(xcols):
            X[rows, cols, k] = df[c].to_numpy()
    return Panel(Y, W, units, times, X)


def save_panel(panel: Panel, path, decimals: int = 12) -> None:
    """Write a Panel back to long CSV (inverse of :func:`load_panel`)."""
    n, t = panel.Y.shape
    rec = {
        "unit": np.repeat(panel.unit_labels, t),
        "time": np.tile(panel.time_labels, n),
        "outcome": np.round(panel.Y.ravel(), decimals),
        "treated": panel.W.ravel().astype(int),
    }
    for k in range(panel.n_covariates):
        rec[f"x{k + 1}"] = np.round(panel.X[:, :, k].ravel(), decimals)
    pd.DataFrame(rec).to_csv(path, index=False)


def detect_block(panel: Panel) -> BlockAssignment | None:
    """Return the block structure of W, or None for general patterns.

    W has block form when the treated cells are exactly the product of the
    ever-treated units and the treated periods; the check is invariant to
    row/column permutations of the input.
    """
    W = panel.W
    d = W.any(axis=1)  # ever-treated units
    p = W.any(axis=0)  # periods with any treatment
    if not np.array_equal(W.astype(bool), np.outer(d, p)):
        return None
    treated_units = tuple(np.nonzero(d)[0].tolist())
    control_units = tuple(np.nonzero(~d)[0].tolist())
    post = tuple(np.nonzero(p)[0].tolist())
    pre = tuple(np.nonzero(~p)[0].tolist())
    return BlockAssignment(
        n0=len(control_units),
        t0=len(pre),
        control_units=control_units,
        treated_units=treated_units,
        pre_periods=pre,
        post_periods=post,
    )


def normalize_outcomes(panel: Panel) -> tuple[Panel, float, float]:
    """Rescale outcomes to grand mean 0 and grand standard deviation 1.

    Returns the transformed panel together with the original (mean, sd) so
    results can be mapped back.  Standard deviation uses the population
    convention (ddof=0).
    """
    m = float(panel.Y.mean())
    sd = float(panel.Y.std())
    if sd == 0.0:
        raise DegenerateOutcome("outcome is constant; cannot normalize")
    return panel.with_outcomes((panel.Y - m) / sd), m, sd


def denormalize_outcomes(panel: Panel, mean: float, sd: float) -> Panel:
    """Invert :func:`normalize_outcomes`."""
    return panel.with_outcomes(panel.Y * sd + mean)


def panel_to_json(panel: Panel) -> str:
    """Serialize to the JSON intermediate form."""
    doc = {
        "units": list(panel.unit_labels),
        "times": list(panel.time_labels),
        "Y": panel.Y.ravel().tolist(),
        "W": panel.W.ravel().astype(int).tolist(),
    }
    if panel.X is not None:
        doc["X"] = panel.X.ravel().tolist()
    return json.dumps(doc)


def panel_from_json(text: str) -> Panel:
    """Inverse of :func:`panel_to_json`."""
    try:
        doc = json.loads(text)
        units = doc["units"]
        times = doc["times"]
        n, t = len(units), len(times)
        Y = np.asarray(doc["Y"], dtype=float).reshape(n, t)
        W = np.asarray(doc["W"], dtype=float).reshape(n, t)
        X = None
        if "X" in doc:
            X = np.asarray(doc["X"], dtype=float).reshape(n, t, -1)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad panel JSON: {exc}") from exc
    return Panel(Y, W, units, times, X)
