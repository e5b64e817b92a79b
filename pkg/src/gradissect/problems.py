"""Desk-scale problems beyond quadratics with data noise.

Two families: binary least-squares classification instances on which
sign-based optimizers provably confine their iterates to a single signed
direction (the construction behind the generalization argument), and
strongly convex noisy objectives with an exact (gradient, variance) oracle
for checking the 1/t convergence of idealized variance adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, as_vector, check_same_dim, sign1
from .optimizers import Method, OptimizerConfig, OptimizerInstance, run
from .records import RunRecord, problem_hash_of, stable_hash64


@dataclass(frozen=True)
class LsqClassification:
    """Binary least-squares classification data, R(theta) = |X theta - y|^2 / 2n.

    When ``c`` is set, the instance satisfies X sign(X'y) = c*y with every
    [X'y]_i nonzero, which traps sign-based full-batch optimizers started
    at the origin on the ray spanned by sign(X'y).
    """

    X: np.ndarray
    y: np.ndarray
    c: float | None = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.ndim != 1:
            raise ValueError("X must be (n, d) and y must be (n,)")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")
        if not np.all(np.abs(self.y) == 1.0):
            raise ValueError("labels must be +-1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def content_hash(self) -> str:
        return problem_hash_of(self.X, self.y)

    def loss(self, theta) -> float:
        theta = as_vector(theta)
        r = self.X @ theta - self.y
        return float(r @ r) / (2.0 * self.n)

    def sample_gradient(self, theta, rng=None) -> np.ndarray:
        # full-batch problem: the "stochastic" gradient is exact
        return lsq_gradient(self, theta)


def lsq_gradient(p: LsqClassification, theta) -> np.ndarray:
    """Exact full-batch gradient (1/n) X'(X theta - y)."""
    theta = as_vector(theta)
    if theta.shape[0] != p.dim:
        raise ValueError(f"dimension mismatch: {theta.shape[0]} vs {p.dim}")
    return p.X.T @ (p.X @ theta - p.y) / p.n


def verify_wilson_condition(p: LsqClassification) -> None:
    """Raise unless the instance satisfies the signed-direction trap exactly."""
    xty = p.X.T @ p.y
    if np.any(xty == 0.0):
        raise ValueError("instance has a zero component in X'y")
    if p.c is None:
        raise ValueError("instance carries no proportionality constant")
    if np.any(p.X @ sign1(xty) != p.c * p.y):
        raise ValueError("X sign(X'y) != c*y")


def make_wilson_instance(
    kind: str = "all_ones",
    d: int = 3,
    n: int = 2,
    rng: RngStream | None = None,
    require_nonproportional: bool = False,
    max_tries: int = 200_000,
) -> LsqClassification:
    """Construct an instance satisfying X sign(X'y) = c*y exactly.

    ``all_ones`` is the minimal analytic instance: a single all-ones row
    with label 1 gives c = d.  ``searched`` draws small matrices with
    entries in {-1, 0, +1} and labels in {-1, +1} until the condition holds
    in integer arithmetic; with ``require_nonproportional`` the search also
    demands that X'y is not itself a multiple of its sign vector, so a
    plain gradient step leaves the signed ray.
    """
    if kind == "all_ones":
        x = np.ones((1, d))
        y = np.ones(1)
        inst = LsqClassification(X=x, y=y, c=float(d))
        verify_wilson_condition(inst)
        return inst
    if kind != "searched":
        raise ValueError(f"unknown instance kind {kind!r}")
    if rng is None:
        raise ValueError("searched instances need an RngStream")
    for _ in range(max_tries):
        x = rng.integers(-1, 2, (n, d)).astype(np.int64)
        y = 2 * rng.integers(0, 2, n).astype(np.int64) - 1
        xty = x.T @ y
        if np.any(xty == 0):
            continue
        w = np.where(xty > 0, 1, -1)
        z = x @ w
        c_candidates = z * y  # y in {-1, +1}, so z = c*y iff all z_i*y_i equal
        c = c_candidates[0]
        if np.any(c_candidates != c):
            continue
        if require_nonproportional:
            mags = np.abs(xty)
            if np.all(mags == mags[0]):
                continue
        inst = LsqClassification(
            X=x.astype(np.float64), y=y.astype(np.float64), c=float(c)
        )
        verify_wilson_condition(inst)
        return inst
    raise RuntimeError(
        f"no instance found in {max_tries} draws over {{-1,0,1}}^({n}x{d}) "
        f"with labels in {{-1,+1}}^{n}"
        + (" and a non-proportional X'y" if require_nonproportional else "")
    )


def check_sign_proportionality(
    trajectory, reference, tol: float = 1e-10
) -> tuple[bool, float]:
    """Test whether every nonzero iterate lies on the ray of sign(reference).

    Deviation per iterate is the relative norm of the component orthogonal
    to sign(reference) (the sine of the angle to the spanned line); returns
    (all deviations <= tol, max deviation).
    """
    reference = as_vector(reference)
    if not np.any(reference):
        raise ValueError("reference direction must be nonzero")
    u = sign1(reference)
    u = u / np.linalg.norm(u)
    max_dev = 0.0
    for theta in trajectory:
        theta = as_vector(theta)
        check_same_dim(theta, u)
        norm = np.linalg.norm(theta)
        if norm == 0.0:
            continue
        residual = theta - (theta @ u) * u
        max_dev = max(max_dev, float(np.linalg.norm(residual) / norm))
    return max_dev <= tol, max_dev


def full_batch_trajectory(
    p: LsqClassification, config: OptimizerConfig, steps: int
) -> list[np.ndarray]:
    """Iterates of a full-batch optimizer started at the origin."""
    opt = OptimizerInstance(config, np.zeros(p.dim))
    out = []
    for _ in range(steps):
        out.append(opt.step(lsq_gradient(p, opt.theta)).copy())
    return out


@dataclass(frozen=True)
class NoisyConvexProblem:
    """Strongly convex quadratic f(theta) = 0.5 theta' A theta with gradient noise.

    The per-coordinate noise variance follows one of three models: ``zero``,
    ``constant`` (M_v/d per coordinate), or ``quadratic``
    ((c_v |grad|^2 + M_v)/d per coordinate), so the total variance satisfies
    sum(sigma^2) <= c_v |grad|^2 + M_v with equality by construction.
    """

    A: np.ndarray
    noise_kind: str = "constant"
    c_v: float = 0.0
    M_v: float = 1.0
    mu: float = field(init=False)
    L_smooth: float = field(init=False)

    def __post_init__(self):
        if np.abs(self.A - self.A.T).max() > 1e-10:
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] <= 0.0:
            raise ValueError("A must be positive definite")
        if self.noise_kind not in ("zero", "constant", "quadratic"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.c_v < 0.0 or self.M_v < 0.0:
            raise ValueError("noise constants must be >= 0")
        object.__setattr__(self, "mu", float(eig[0]))
        object.__setattr__(self, "L_smooth", float(eig[-1]))

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def content_hash(self) -> str:
        return problem_hash_of(self.A, [self.c_v, self.M_v])

    def loss(self, theta) -> float:
        theta = as_vector(theta)
        return float(0.5 * theta @ (self.A @ theta))

    def grad(self, theta) -> np.ndarray:
        return self.A @ as_vector(theta)

    def noise_variance(self, theta) -> np.ndarray:
        if self.noise_kind == "zero":
            return np.zeros(self.dim)
        if self.noise_kind == "constant":
            return np.full(self.dim, self.M_v / self.dim)
        g = self.grad(theta)
        return np.full(self.dim, (self.c_v * float(g @ g) + self.M_v) / self.dim)

    def gradient_oracle(self, theta, rng: RngStream):
        true_grad = self.grad(theta)
        true_var = self.noise_variance(theta)
        g = true_grad + np.sqrt(true_var) * rng.standard_normal(self.dim)
        return g, true_grad, true_var

    def sample_gradient(self, theta, rng: RngStream) -> np.ndarray:
        return self.gradient_oracle(theta, rng)[0]


def noisy_convex_oracle(p: NoisyConvexProblem, theta, rng: RngStream):
    """Stochastic gradient plus the exact gradient and per-coordinate variance."""
    return p.gradient_oracle(theta, rng)


@dataclass
class Theorem1Result:
    records: list[RunRecord]
    grid: np.ndarray
    e_bar: np.ndarray
    slope: float
    max_increase_margin: float


def theorem1_experiment(
    p: NoisyConvexProblem,
    steps: int,
    seeds,
    eval_every: int = 1,
    alpha: float | None = None,
    window: tuple[int, int] | None = None,
) -> Theorem1Result:
    """Convergence check for variance adaptation with an exact oracle.

    Runs the idealized variance-adapted gradient method at step size 1/L
    for each seed, averages the suboptimality f(theta_t) - f* over seeds
    (f* = 0 for these problems), and fits the log-log slope of the average
    on the tail window.  ``max_increase_margin`` is the largest value of
    e_bar[t+1] - e_bar[t] - 3*SE(e_bar[t+1]) over consecutive recorded
    steps, where SE is the standard error of the seed mean; a non-positive
    value means the average never increases beyond sampling noise.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed required")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if alpha is None:
        alpha = 1.0 / p.L_smooth
    cfg = OptimizerConfig(method=Method.IDEALIZED_SVAG, alpha=alpha)
    records = []
    losses = []
    for seed in seeds:
        t0_rng = RngStream(seed, stable_hash64("theorem1/theta0"))
        theta0 = t0_rng.standard_normal(p.dim)
        rng = RngStream(seed, stable_hash64("theorem1/noise"))
        opt = OptimizerInstance(cfg, theta0)
        rec = run(
            opt,
            p,
            steps,
            rng,
            eval_every=eval_every,
            experiment="theorem1",
            seed=seed,
            problem_hash=p.content_hash(),
        )
        records.append(rec)
        losses.append(rec.losses)
    grid = np.array(records[0].steps)
    per_seed = np.array(losses)  # (seeds, points)
    e_bar = per_seed.mean(axis=0)

    if window is None:
        window = (min(100, steps // 2), steps)
    mask = (grid >= window[0]) & (grid <= window[1]) & (e_bar > 0.0)
    if mask.sum() < 2:
        raise ValueError("window contains fewer than 2 usable points")
    slope = float(np.polyfit(np.log(grid[mask]), np.log(e_bar[mask]), 1)[0])

    if len(seeds) > 1:
        se = per_seed.std(axis=0, ddof=1) / np.sqrt(len(seeds))
    else:
        se = np.zeros_like(e_bar)
    max_margin = float((e_bar[1:] - e_bar[:-1] - 3.0 * se[1:]).max())
    return Theorem1Result(
        records=records,
        grid=grid,
        e_bar=e_bar,
        slope=slope,
        max_increase_margin=max_margin,
    )
