"""Moving-average statistics and variance-adaptation factors.

The central objects are debiased exponential moving averages of gradients
and squared gradients, the gradient-variance estimates derived from them
(or from per-example gradients within one mini-batch), and the element-wise
shrinkage factors in [0, 1] that scale an update direction down where its
relative variance is high.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import as_vector, check_same_dim, erf


@dataclass
class EmaState:
    """Paired exponential moving averages with a shared decay constant.

    ``t = -1`` means no observation yet.  After an update, ``t`` is the
    0-based index of the latest observation and the debiased averages are
    the raw sums divided by ``1 - beta**(t+1)``.
    """

    dim: int
    beta: float
    m_tilde: np.ndarray = field(init=False)
    v_tilde: np.ndarray = field(init=False)
    t: int = field(init=False, default=-1)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        self.m_tilde = np.zeros(self.dim)
        self.v_tilde = np.zeros(self.dim)


def ema_update(state: EmaState, g) -> tuple[np.ndarray, np.ndarray]:
    """Fold one gradient observation in; return the debiased averages (m, v).

    The debiased m is a convex combination of all observations so far (the
    implicit weights sum to one), so on the first call m equals g and v
    equals g**2 exactly.
    """
    g = as_vector(g)
    check_same_dim(state.m_tilde, g)
    beta = state.beta
    state.m_tilde = beta * state.m_tilde + (1.0 - beta) * g
    state.v_tilde = beta * state.v_tilde + (1.0 - beta) * (g * g)
    state.t += 1
    if state.t == 0:
        # single observation: the correction cancels the (1-beta) weight
        return g.copy(), g * g
    corr = 1.0 - beta ** (state.t + 1)
    return state.m_tilde / corr, state.v_tilde / corr


def rho(beta: float, t: int) -> float:
    """Sum of squared convex-combination weights of the debiased average.

    This is the factor by which averaging shrinks the variance of a
    stationary gradient sequence: var[m_t] = rho(beta, t) * var[g].  It is
    1 at t = 0, decreases monotonically in t, and tends to
    (1-beta)/(1+beta).
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    bt1 = beta ** (t + 1)
    return ((1.0 - beta) * (1.0 + bt1)) / ((1.0 + beta) * (1.0 - bt1))


def ma_variance_estimate(m, v, beta: float, t: int) -> np.ndarray:
    """Gradient-variance estimate from debiased moving averages.

    Rescales (v - m**2) by 1/(1 - rho(beta, t)), the moving-average analogue
    of Bessel's correction, so the estimate is unbiased for stationary
    independent gradients.  At t = 0 the correction is singular and the
    estimate is defined as zero, which makes the first step of the
    variance-adapted methods a plain gradient step.  Negative raw values
    (possible in finite samples) are clamped to zero so downstream factors
    stay in [0, 1].
    """
    m = as_vector(m)
    v = as_vector(v)
    check_same_dim(m, v)
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t == 0:
        return np.zeros_like(m)
    raw = v - m * m
    return np.maximum(raw / (1.0 - rho(beta, t)), 0.0)


def mb_variance_estimate(per_example_grads) -> np.ndarray:
    """Variance of the mini-batch mean gradient, estimated within the batch.

    Unbiased sample variance of the per-example gradients divided by the
    batch size, computed in centered form so the result is never negative.
    """
    grads = np.asarray(per_example_grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ValueError(f"expected a (batch, dim) array, got shape {grads.shape}")
    b = grads.shape[0]
    if b < 2:
        raise ValueError(f"batch size must be >= 2, got {b}")
    mean = grads.mean(axis=0)
    centered = grads - mean
    return (centered * centered).sum(axis=0) / (b * (b - 1))


def mb_momentum_variance(r_state: EmaState, s_mb, beta: float, t: int) -> np.ndarray:
    """Variance estimate for the momentum direction from per-batch estimates.

    Tracks the batch-local variance estimates with an exponential moving
    average of decay beta**2 (held in ``r_state``) and scales the debiased
    average by rho(beta, t).  The result equals the explicit sum of squared
    averaging weights times the past per-batch estimates.
    """
    s_mb = as_vector(s_mb)
    check_same_dim(r_state.m_tilde, s_mb)
    beta2 = beta * beta
    if abs(r_state.beta - beta2) > 1e-15:
        raise ValueError(
            f"r_state must use decay beta**2 = {beta2}, got {r_state.beta}"
        )
    if r_state.t != t - 1:
        raise ValueError(f"r_state at t={r_state.t} cannot accept observation t={t}")
    r_state.m_tilde = beta2 * r_state.m_tilde + (1.0 - beta2) * s_mb
    r_state.t = t
    if t == 0:
        r = s_mb.copy()
    else:
        r = r_state.m_tilde / (1.0 - beta2 ** (t + 1))
    return rho(beta, t) * r


@dataclass(frozen=True)
class AdaptationFactors:
    """Element-wise shrinkage factors in [0, 1] plus a no-update mask.

    ``no_update`` marks coordinates where both the squared mean and the
    variance estimate vanish; the factor there is 0 by convention and the
    optimizer leaves the coordinate untouched.
    """

    gamma: np.ndarray
    no_update: np.ndarray


def _safe_ratio(m_sq: np.ndarray, denom_extra: np.ndarray) -> AdaptationFactors:
    denom = m_sq + denom_extra
    zero = denom == 0.0
    gamma = np.where(zero, 0.0, m_sq / np.where(zero, 1.0, denom))
    return AdaptationFactors(gamma=gamma, no_update=zero)


def factor_svag(m_sq, s_hat) -> AdaptationFactors:
    """Factors m^2 / (m^2 + s) for variance-adapting a raw gradient step."""
    m_sq = as_vector(m_sq)
    s_hat = as_vector(s_hat)
    check_same_dim(m_sq, s_hat)
    if np.any(m_sq < 0.0) or np.any(s_hat < 0.0):
        raise ValueError("m_sq and s_hat must be element-wise >= 0")
    return _safe_ratio(m_sq, s_hat)


def factor_msvag(m_sq, s_hat, beta: float, t: int) -> AdaptationFactors:
    """Factors m^2 / (m^2 + rho(beta, t) * s) for the momentum direction.

    The averaging already shrinks the momentum's variance by rho(beta, t),
    so the variance estimate is discounted accordingly.
    """
    m_sq = as_vector(m_sq)
    s_hat = as_vector(s_hat)
    check_same_dim(m_sq, s_hat)
    if np.any(m_sq < 0.0) or np.any(s_hat < 0.0):
        raise ValueError("m_sq and s_hat must be element-wise >= 0")
    return _safe_ratio(m_sq, rho(beta, t) * s_hat)


def factor_adam_star(m_sq, s_hat, beta: float, t: int) -> AdaptationFactors:
    """Square root of the momentum factors, for scaling a sign update."""
    base = factor_msvag(m_sq, s_hat, beta, t)
    return AdaptationFactors(gamma=np.sqrt(base.gamma), no_update=base.no_update)


def expected_distance_direction(gamma, p, sigma_sq) -> float:
    """Closed-form E[|gamma * p_hat - p|^2] for an unbiased estimate p_hat.

    Separable across coordinates; minimized at gamma_i = p_i^2/(p_i^2 +
    sigma_i^2).  Used as the search objective when verifying that the
    factor formulas are the true minimizers.
    """
    gamma = as_vector(gamma)
    p = as_vector(p)
    sigma_sq = as_vector(sigma_sq)
    return float(np.sum(gamma**2 * (p**2 + sigma_sq) - 2.0 * gamma * p**2 + p**2))


def expected_distance_sign(gamma, success_prob) -> float:
    """Closed-form E[|gamma * sign(p_hat) - sign(p)|^2].

    Minimized at gamma_i = 2*rho_i - 1 where rho_i is the probability that
    sign(p_hat_i) agrees with sign(p_i).
    """
    gamma = as_vector(gamma)
    success_prob = as_vector(success_prob)
    return float(np.sum(gamma**2 - 2.0 * gamma * (2.0 * success_prob - 1.0) + 1.0))


def factor_curves(eta_grid) -> np.ndarray:
    """The three adaptation-factor curves as functions of relative stddev.

    Returns an array with columns (eta, sign_optimal, adam, svag):
    erf(1/(sqrt(2)*eta)) extended continuously to 1 at eta = 0, the
    square-root factor (1+eta^2)^(-1/2), and the direct factor
    (1+eta^2)^(-1).
    """
    eta = as_vector(eta_grid)
    if np.any(eta < 0.0):
        raise ValueError("eta values must be >= 0")
    sign_optimal = np.array(
        [1.0 if e == 0.0 else erf(1.0 / (np.sqrt(2.0) * e)) for e in eta]
    )
    adam = 1.0 / np.sqrt(1.0 + eta * eta)
    svag = 1.0 / (1.0 + eta * eta)
    return np.column_stack([eta, sign_optimal, adam, svag])
