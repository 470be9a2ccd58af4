"""Bundled synthetic seed panels.

The benchmark datasets behind the published designs are not redistributable,
so two stand-in panels are generated from documented fixed-seed factor
models: a 50 x 40 panel with a strong interactive component and confounded
policy adoption, and a 17 x 44 single-treated-unit panel.  Feeding either to
:func:`trop.simlab.calibrate` reproduces the full semi-synthetic pipeline;
users with the original data can calibrate on their own CSVs instead.
"""

from __future__ import annotations

import numpy as np

from .panel import Panel

__all__ = ["strong_interactive_seed", "small_country_seed"]

STRONG_SEED = 20240417
SMALL_SEED = 19891109


def strong_interactive_seed(
    n: int = 50,
    T: int = 40,
    n_tr: int = 10,
    t_post: int = 10,
) -> Panel:
    """Panel with two-way structure, a strong interactive factor, AR(2)
    noise, and policy adoption confounded with the factor loadings."""
    rng = np.random.default_rng(STRONG_SEED)
    tgrid = np.arange(T) / (T - 1)

    a = rng.normal(0.0, 0.9, size=n)
    b = 0.8 * tgrid + 0.15 * np.sin(2.0 * np.pi * 1.5 * tgrid)

    # factor 1 accelerates late in the sample: recency matters for prediction
    f1 = 1.3 * tgrid**2 + 0.1 * np.sin(2.0 * np.pi * 2.3 * tgrid)
    g1 = rng.normal(0.0, 0.65, size=n)
    f2 = 0.4 * np.cos(2.0 * np.pi * 1.1 * tgrid) + 0.3 * tgrid
    g2 = rng.normal(0.0, 0.35, size=n)

    eps = _ar2_rows(rng, n, T, 0.40, -0.10, 0.11)
    Y = a[:, None] + b[None, :] + np.outer(g1, f1) + np.outer(g2, f2) + eps

    # adoption favors units with high interactive loadings (and level)
    score = 0.6 * a + 1.8 * g1 + rng.gumbel(0.0, 0.35, size=n)
    treated = np.argsort(score)[-n_tr:]
    W = np.zeros((n, T))
    W[np.sort(treated)[:, None], np.arange(T - t_post, T)] = 1.0

    units = [f"s{i:02d}" for i in range(n)]
    times = [str(1980 + s) for s in range(T)]
    return Panel(Y, W, units, times)


def small_country_seed(n: int = 17, T: int = 44, t_post: int = 10) -> Panel:
    """Small panel with one treated unit whose loadings sit inside the
    control hull, for replay / SC-weighted assignment modes."""
    rng = np.random.default_rng(SMALL_SEED)
    tgrid = np.arange(T) / (T - 1)

    a = rng.normal(0.0, 0.7, size=n)
    b = 1.1 * tgrid
    f1 = 0.9 * tgrid**2 + 0.12 * np.sin(2.0 * np.pi * 1.7 * tgrid)
    g1 = rng.normal(0.4, 0.5, size=n)
    f2 = 0.35 * np.sin(2.0 * np.pi * 0.8 * tgrid + 0.4)
    g2 = rng.normal(0.0, 0.4, size=n)

    # treated unit: a convex-ish mix of three controls plus a small offset
    mix = (0.5, 0.3, 0.2)
    a[-1] = mix @ a[:3] + 0.05
    g1[-1] = mix @ g1[:3]
    g2[-1] = mix @ g2[:3]

    eps = _ar2_rows(rng, n, T, 0.55, -0.15, 0.05)
    Y = a[:, None] + b[None, :] + np.outer(g1, f1) + np.outer(g2, f2) + eps

    W = np.zeros((n, T))
    W[-1, T - t_post:] = 1.0
    units = [f"c{i:02d}" for i in range(n)]
    times = [str(1950 + s) for s in range(T)]
    return Panel(Y, W, units, times)


def _ar2_rows(rng, n, T, rho1, rho2, sd_inn, burn: int = 50):
    """AR(2) noise rows started from burn-in."""
    e = rng.normal(0.0, sd_inn, size=(n, T + burn))
    x = np.zeros((n, T + burn))
    for t in range(2, T + burn):
        x[:, t] = rho1 * x[:, t - 1] + rho2 * x[:, t - 2] + e[:, t]
    return x[:, burn:]
