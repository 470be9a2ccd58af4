"""Executable finite-sample identities behind the estimator's robustness.

Everything here works in the single-treated-cell frame: unit N and period T
are treated, weights are probability vectors over the N0 = N-1 control units
and T0 = T-1 control periods.  The balancing form of the counterfactual is

    chat = Lhat_NT + sum_t theta_t (Y_Nt - Lhat_Nt)
                   + sum_i omega_i (Y_iT - Lhat_iT)
                   - sum_it omega_i theta_t (Y_it - Lhat_it)

which equals Y_NT + <Y - Lhat, M(theta, omega)> for the rank-one mask
M = (e_N - U_omega)(V_theta - e_T)^T.  On noiseless factor data L = Gamma
Lambda^T with an adjustment biased by Gamma B Lambda^T, the realized bias is
exactly Delta_u^T B Delta_t, bounded by ||Delta_u|| ||Delta_t|| ||B||_nuc --
zero whenever unit balance, time balance, or the adjustment is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WeightsNotNormalized
from .solver import nuclear_norm

__all__ = [
    "FactorGroundTruth",
    "BiasReport",
    "balancing_counterfactual",
    "rank_one_mask",
    "bias_formulas",
    "triple_robustness_check",
    "covariate_bias_check",
    "noise_decomposition",
    "random_ground_truth",
    "theory_battery",
]


@dataclass(frozen=True)
class FactorGroundTruth:
    """Known loadings/factors and the adjustment-bias matrix of a design."""

    Gamma: np.ndarray  # N x K
    Lambda: np.ndarray  # T x K
    B: np.ndarray  # K x K

    def __post_init__(self):
        G = np.asarray(self.Gamma, dtype=float)
        L = np.asarray(self.Lambda, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if G.ndim != 2 or L.ndim != 2 or G.shape[1] != L.shape[1]:
            raise ValueError("Gamma and Lambda must share the factor dimension")
        if B.shape != (G.shape[1], G.shape[1]):
            raise ValueError("B must be K x K")
        object.__setattr__(self, "Gamma", G)
        object.__setattr__(self, "Lambda", L)
        object.__setattr__(self, "B", B)

    @property
    def L(self) -> np.ndarray:
        """Noiseless outcome matrix Gamma Lambda^T."""
        return self.Gamma @ self.Lambda.T

    def biased_adjustment(self) -> np.ndarray:
        """Expected fitted matrix Gamma (I + B) Lambda^T."""
        K = self.B.shape[0]
        return self.Gamma @ (np.eye(K) + self.B) @ self.Lambda.T

    def discrepancies(self, theta: np.ndarray, omega: np.ndarray):
        """(Delta_u, Delta_t): weighted control aggregates minus the treated
        unit's loading / treated period's factor."""
        delta_u = omega @ self.Gamma[:-1, :] - self.Gamma[-1, :]
        delta_t = theta @ self.Lambda[:-1, :] - self.Lambda[-1, :]
        return delta_u, delta_t


@dataclass(frozen=True)
class BiasReport:
    """Realized bias of the adjusted counterfactual and its product bound."""

    delta_u: np.ndarray
    delta_t: np.ndarray
    bound: float
    realized: float


def _check_simplex(v: np.ndarray, name: str):
    v = np.asarray(v, dtype=float)
    if abs(v.sum() - 1.0) > 1e-8:
        raise WeightsNotNormalized(f"{name} must sum to one, got {v.sum():.6g}")
    return v


def rank_one_mask(theta: np.ndarray, omega: np.ndarray, N: int, T: int) -> np.ndarray:
    """The N x T mask (e_N - U_omega)(V_theta - e_T)^T.

    Entries: M[N,t] = theta_t and M[i,T] = omega_i on the control margins,
    M[i,t] = -omega_i theta_t on the control block, M[N,T] = -1.
    """
    theta = _check_simplex(theta, "theta")
    omega = _check_simplex(omega, "omega")
    if theta.size != T - 1 or omega.size != N - 1:
        raise ValueError("weights must have length T-1 and N-1")
    a = np.zeros(N)
    a[-1] = 1.0
    a[:-1] -= omega
    b = np.zeros(T)
    b[:-1] = theta
    b[-1] -= 1.0
    return np.outer(a, b)


def balancing_counterfactual(
    Y: np.ndarray, Lhat: np.ndarray, theta: np.ndarray, omega: np.ndarray
) -> float:
    """Counterfactual for the (N, T) cell in the four-term balancing form."""
    Y = np.asarray(Y, dtype=float)
    Lhat = np.asarray(Lhat, dtype=float)
    theta = _check_simplex(theta, "theta")
    omega = _check_simplex(omega, "omega")
    R = Y - Lhat
    r_pre = R[-1, :-1]
    c_ctrl = R[:-1, -1]
    block = R[:-1, :-1]
    return float(
        Lhat[-1, -1]
        + theta @ r_pre
        + omega @ c_ctrl
        - omega @ block @ theta
    )


def bias_formulas(
    gt: FactorGroundTruth, theta: np.ndarray, omega: np.ndarray
) -> dict[str, float]:
    """Closed-form realized errors of DID / SC / SDID on the noiseless panel.

    Evaluated at the supplied weights; DID's entry uses uniform averages and
    ignores them.  Signs follow the estimators' realized errors: each value
    equals (estimate - 0) on the placebo factor panel.
    """
    G, Lam = gt.Gamma, gt.Lambda
    gbar0 = G[:-1].mean(axis=0)
    lbar0 = Lam[:-1].mean(axis=0)
    gN, lT = G[-1], Lam[-1]
    gbar_w = omega @ G[:-1]
    lbar_w = theta @ Lam[:-1]
    return {
        "did": float((gN - gbar0) @ (lT - lbar0)),
        "sc": float((gN - gbar_w) @ lT),
        "sdid": float((gN - gbar_w) @ (lT - lbar_w)),
    }


def triple_robustness_check(
    gt: FactorGroundTruth, theta: np.ndarray, omega: np.ndarray
) -> BiasReport:
    """Realized bias of the balancing counterfactual under a biased adjustment.

    With Y = L (noiseless) and Lhat = Gamma (I + B) Lambda^T, the bias of the
    predicted counterfactual equals Delta_u^T B Delta_t exactly and is bounded
    by ||Delta_u||_2 ||Delta_t||_2 ||B||_nuc.
    """
    Y = gt.L
    Lhat = gt.biased_adjustment()
    chat = balancing_counterfactual(Y, Lhat, theta, omega)
    realized = float(chat - Y[-1, -1])
    delta_u, delta_t = gt.discrepancies(theta, omega)
    bound = float(
        np.linalg.norm(delta_u) * np.linalg.norm(delta_t) * nuclear_norm(gt.B)
    )
    return BiasReport(delta_u=delta_u, delta_t=delta_t, bound=bound, realized=realized)


def covariate_bias_check(
    gt: FactorGroundTruth,
    X: np.ndarray,
    beta: np.ndarray,
    beta_bias: np.ndarray,
    theta: np.ndarray,
    omega: np.ndarray,
    E_perp: np.ndarray | None = None,
) -> dict[str, float]:
    """Bias decomposition with an additive covariate term.

    Outcomes are R + X beta (noiseless); the fitted adjustment is off by
    X beta_bias + Gamma B Lambda^T + E_perp.  Returns the realized bias, the
    two closed-form pieces, and the bound on the residual term's contribution.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    N, T, p = X.shape
    beta = np.asarray(beta, dtype=float).reshape(p)
    beta_bias = np.asarray(beta_bias, dtype=float).reshape(p)
    theta = _check_simplex(theta, "theta")
    omega = _check_simplex(omega, "omega")
    if (theta < 0).any() or (omega < 0).any():
        raise WeightsNotNormalized("covariate decomposition requires nonnegative weights")

    R = gt.L
    Y = R + X @ beta
    E = np.zeros((N, T)) if E_perp is None else np.asarray(E_perp, dtype=float)
    Lhat = (R + X @ beta) + (X @ beta_bias) + (gt.Gamma @ gt.B @ gt.Lambda.T) + E

    chat = balancing_counterfactual(Y, Lhat, theta, omega)
    realized = float(chat - Y[-1, -1])

    M = rank_one_mask(theta, omega, N, T)
    g_vec = np.einsum("it,itp->p", M, X)
    delta_u, delta_t = gt.discrepancies(theta, omega)
    main = float(delta_u @ gt.B @ delta_t)
    covariate = float(g_vec @ beta_bias)
    resid_bound = float(np.abs(E).max() * (1.0 + np.abs(omega).sum()) * (1.0 + np.abs(theta).sum()))
    return {
        "realized": realized,
        "factor_term": main,
        "covariate_term": covariate,
        "decomposed": main - covariate,
        "residual_bound": resid_bound,
        "g": g_vec,
    }


def noise_decomposition(
    theta: np.ndarray, omega: np.ndarray, eps: np.ndarray
) -> float:
    """Weighted control-noise aggregate for the single treated cell.

    Returns eps_bar0 = sum_i omega_i eps_iT + sum_t theta_t eps_Nt
    - sum_it omega_i theta_t eps_it and asserts the mask identity
    <eps, M> + eps_NT = eps_bar0 to machine precision.
    """
    eps = np.asarray(eps, dtype=float)
    theta = _check_simplex(theta, "theta")
    omega = _check_simplex(omega, "omega")
    N, T = eps.shape
    val = float(
        omega @ eps[:-1, -1] + theta @ eps[-1, :-1] - omega @ eps[:-1, :-1] @ theta
    )
    M = rank_one_mask(theta, omega, N, T)
    ident = float((eps * M).sum() + eps[-1, -1])
    if abs(ident - val) > 1e-12 * max(1.0, abs(val)):
        raise AssertionError(f"mask identity violated: {ident} vs {val}")
    return val


def random_ground_truth(
    rng: np.random.Generator,
    N: int = 8,
    T: int = 7,
    K: int = 2,
    b_scale: float = 0.5,
) -> FactorGroundTruth:
    """Small random instance for property batteries."""
    return FactorGroundTruth(
        Gamma=rng.standard_normal((N, K)),
        Lambda=rng.standard_normal((T, K)),
        B=b_scale * rng.standard_normal((K, K)),
    )


def _simplex_draw(rng, k):
    v = rng.random(k) + 1e-3
    return v / v.sum()


def theory_battery(instances: int = 200, seed: int = 0) -> dict[str, dict[str, int]]:
    """Run the finite-sample identity checks on random instances.

    Returns pass/fail counts per identity: the rank-one representation, the
    exact bias factorization with its product bound, the noise aggregate
    identity, and the covariate decomposition.
    """
    rng = np.random.default_rng(seed)
    counts = {
        k: {"pass": 0, "fail": 0}
        for k in ("rank_one", "triple_robustness", "noise", "covariates")
    }

    def record(key, ok):
        counts[key]["pass" if ok else "fail"] += 1

    for _ in range(instances):
        N = int(rng.integers(5, 13))
        T = int(rng.integers(5, 13))
        theta = _simplex_draw(rng, T - 1)
        omega = _simplex_draw(rng, N - 1)

        Y = rng.standard_normal((N, T))
        Lhat = rng.standard_normal((N, T))
        lhs = balancing_counterfactual(Y, Lhat, theta, omega)
        M = rank_one_mask(theta, omega, N, T)
        rhs = Y[-1, -1] + float(((Y - Lhat) * M).sum())
        record("rank_one", abs(lhs - rhs) < 1e-10)

        gt = random_ground_truth(rng, N, T, K=2)
        rep = triple_robustness_check(gt, theta, omega)
        du, dt = gt.discrepancies(theta, omega)
        exact = abs(rep.realized - float(du @ gt.B @ dt)) < 1e-10
        bounded = abs(rep.realized) <= rep.bound + 1e-10
        record("triple_robustness", exact and bounded)

        eps = rng.standard_normal((N, T))
        try:
            noise_decomposition(theta, omega, eps)
            record("noise", True)
        except AssertionError:
            record("noise", False)

        X = rng.standard_normal((N, T, 2))
        out = covariate_bias_check(
            gt, X, beta=rng.standard_normal(2), beta_bias=rng.standard_normal(2) * 0.3,
            theta=theta, omega=omega,
        )
        record("covariates", abs(out["realized"] - out["decomposed"]) < 1e-9)
    return counts
