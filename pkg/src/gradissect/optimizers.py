"""The stochastic update-rule family behind one uniform stepping interface.

Four base directions (raw gradient, its sign, and the momentum variants of
both) combined with optional variance adaptation give the method lattice:
plain sgd/ssd, their averaged forms m-sgd/m-ssd, the variance-adapted
svag/m-svag/adam-star, classic adam, the mini-batch m-svag variant, and an
idealized svag with oracle-exact adaptation factors used purely for
convergence checks.
"""

from __future__ import annotations

import enum
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .core import as_vector, check_same_dim, sign1
from .estimators import (
    EmaState,
    ema_update,
    factor_adam_star,
    factor_msvag,
    factor_svag,
    ma_variance_estimate,
    mb_momentum_variance,
    mb_variance_estimate,
)
from .records import RunRecord


class Method(enum.Enum):
    SGD = "sgd"
    SSD = "ssd"
    M_SGD = "m-sgd"
    M_SSD = "m-ssd"
    SVAG = "svag"
    M_SVAG = "m-svag"
    M_SVAG_MB = "m-svag-mb"
    ADAM = "adam"
    ADAM_STAR = "adam-star"
    IDEALIZED_SVAG = "idealized-svag"

    @classmethod
    def from_name(cls, name: str) -> "Method":
        key = name.strip().lower().replace("_", "-")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown method {name!r}")


# methods that maintain the gradient moving averages
_EMA_METHODS = {
    Method.M_SGD,
    Method.M_SSD,
    Method.SVAG,
    Method.M_SVAG,
    Method.M_SVAG_MB,
    Method.ADAM_STAR,
}


@dataclass(frozen=True)
class PiecewiseSchedule:
    """Step-size multiplier that shrinks by ``factor`` at each milestone."""

    milestones: tuple[int, ...] = ()
    factor: float = 1.0

    def multiplier(self, t: int) -> float:
        return self.factor ** bisect_right(self.milestones, t)


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters for one update rule.

    ``beta`` is the shared moving-average constant used by every averaged
    method; only adam uses the separate (beta1, beta2, epsilon) triple.
    ``force_zero_variance`` is a test hook that zeroes the variance estimate,
    collapsing the variance-adapted methods onto their base methods.
    """

    method: Method
    alpha: float
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: PiecewiseSchedule | None = None
    batch_size: int = 8
    force_zero_variance: bool = False

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        for name in ("beta", "beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")

    def alpha_at(self, t: int) -> float:
        if self.schedule is None:
            return self.alpha
        return self.alpha * self.schedule.multiplier(t)


def adam_direction(m, v, epsilon: float) -> np.ndarray:
    """The adam update direction m / (sqrt(v) + epsilon).

    Coordinates with a zero denominator (possible only when epsilon = 0 and
    every past gradient was zero, hence m = 0 there) map to zero.
    """
    m = as_vector(m)
    v = as_vector(v)
    check_same_dim(m, v)
    denom = np.sqrt(v) + epsilon
    zero = denom == 0.0
    return np.where(zero, 0.0, m / np.where(zero, 1.0, denom))


class OptimizerInstance:
    """One update rule applied to one parameter vector.

    Single-owner mutable state: ``theta`` is the current iterate and ``t``
    counts completed steps.  Instances are independent; run several in
    parallel freely, but never share one across threads.
    """

    def __init__(self, config: OptimizerConfig, theta0):
        self.config = config
        self.theta = as_vector(theta0).copy()
        self.t = 0
        d = self.theta.shape[0]
        m = config.method
        self.ema = EmaState(d, config.beta) if m in _EMA_METHODS else None
        self.r_ema = (
            EmaState(d, config.beta * config.beta) if m is Method.M_SVAG_MB else None
        )
        if m is Method.ADAM:
            self._adam_m = EmaState(d, config.beta1)
            self._adam_v = EmaState(d, config.beta2)

    def _variance(self, m, v):
        if self.config.force_zero_variance:
            return np.zeros_like(m)
        return ma_variance_estimate(m, v, self.config.beta, self.ema.t)

    def step(self, g, per_example_grads=None, oracle=None) -> np.ndarray:
        """Apply one update for the observed stochastic gradient g.

        ``per_example_grads`` (a (batch, dim) array) is required by
        m-svag-mb; ``oracle`` (a (true_grad, true_var) pair) is required by
        idealized-svag.  Returns the new iterate.
        """
        g = as_vector(g)
        check_same_dim(self.theta, g)
        cfg = self.config
        alpha = cfg.alpha_at(self.t)
        method = cfg.method

        if method is Method.SGD:
            update = g
        elif method is Method.SSD:
            update = sign1(g)
        elif method is Method.M_SGD:
            m, _ = ema_update(self.ema, g)
            update = m
        elif method is Method.M_SSD:
            ema_update(self.ema, g)
            update = sign1(self.ema.m_tilde)
        elif method is Method.ADAM:
            m, _ = ema_update(self._adam_m, g)
            _, v = ema_update(self._adam_v, g)
            update = adam_direction(m, v, cfg.epsilon)
        elif method is Method.SVAG:
            m, v = ema_update(self.ema, g)
            factors = factor_svag(m * m, self._variance(m, v))
            update = np.where(factors.no_update, 0.0, factors.gamma * g)
        elif method is Method.M_SVAG:
            m, v = ema_update(self.ema, g)
            factors = factor_msvag(m * m, self._variance(m, v), cfg.beta, self.ema.t)
            update = np.where(factors.no_update, 0.0, factors.gamma * m)
        elif method is Method.ADAM_STAR:
            m, v = ema_update(self.ema, g)
            factors = factor_adam_star(
                m * m, self._variance(m, v), cfg.beta, self.ema.t
            )
            update = np.where(factors.no_update, 0.0, factors.gamma * sign1(m))
        elif method is Method.M_SVAG_MB:
            if per_example_grads is None:
                raise ValueError("m-svag-mb requires per_example_grads")
            s_mb = mb_variance_estimate(per_example_grads)
            m, _ = ema_update(self.ema, g)
            s_bar = mb_momentum_variance(self.r_ema, s_mb, cfg.beta, self.ema.t)
            if cfg.force_zero_variance:
                s_bar = np.zeros_like(s_bar)
            factors = factor_svag(m * m, s_bar)
            update = np.where(factors.no_update, 0.0, factors.gamma * m)
        elif method is Method.IDEALIZED_SVAG:
            if oracle is None:
                raise ValueError("idealized-svag requires the (grad, var) oracle")
            true_grad, true_var = oracle
            true_grad = as_vector(true_grad)
            true_var = as_vector(true_var)
            check_same_dim(self.theta, true_grad)
            check_same_dim(self.theta, true_var)
            grad_sq = true_grad * true_grad
            denom = grad_sq + true_var
            zero = denom == 0.0
            gamma = np.where(zero, 0.0, grad_sq / np.where(zero, 1.0, denom))
            update = np.where(zero, 0.0, gamma * g)
        else:  # pragma: no cover
            raise ValueError(f"unhandled method {method}")

        self.theta = self.theta - alpha * update
        self.t += 1
        return self.theta


def run(
    opt: OptimizerInstance,
    problem,
    steps: int,
    rng,
    eval_every: int = 1,
    experiment: str = "run",
    seed: int = 0,
    problem_hash: str = "",
) -> RunRecord:
    """Drive an optimizer on a problem for a fixed number of steps.

    The problem supplies ``loss(theta)`` and ``sample_gradient(theta, rng)``;
    mini-batch and oracle methods additionally need
    ``per_example_gradients(theta, rng, batch_size)`` or
    ``gradient_oracle(theta, rng)``.  Loss is recorded at step 0, at every
    ``eval_every``-th step, and at the final step.  Raises on non-finite
    loss so diverging grid cells fail loudly.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if eval_every < 1:
        raise ValueError(f"eval_every must be >= 1, got {eval_every}")
    method = opt.config.method
    rec_steps = [0]
    rec_losses = [float(problem.loss(opt.theta))]
    # a diverging cell overflows before the loss check catches it; keep the
    # resulting numpy warnings out of the grid runner's output
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            if method is Method.M_SVAG_MB:
                grads = problem.per_example_gradients(
                    opt.theta, rng, opt.config.batch_size
                )
                g = np.asarray(grads).mean(axis=0)
                opt.step(g, per_example_grads=grads)
            elif method is Method.IDEALIZED_SVAG:
                g, true_grad, true_var = problem.gradient_oracle(opt.theta, rng)
                opt.step(g, oracle=(true_grad, true_var))
            else:
                g = problem.sample_gradient(opt.theta, rng)
                opt.step(g)
            s = k + 1
            if s % eval_every == 0 or s == steps:
                loss = float(problem.loss(opt.theta))
                if not np.isfinite(loss):
                    raise ValueError(
                        f"non-finite loss at step {s} ({method.value}, alpha="
                        f"{opt.config.alpha})"
                    )
                rec_steps.append(s)
                rec_losses.append(loss)
    return RunRecord(
        experiment=experiment,
        method=method.value,
        seed=seed,
        steps=rec_steps,
        losses=rec_losses,
        problem_hash=problem_hash,
    )
