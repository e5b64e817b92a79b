"""Stochastic quadratic test problems and their closed-form theory.

A problem is a positive-definite quadratic whose data points are Gaussian
perturbations of the optimum, so stochastic gradients are Gaussian with a
covariance that couples the noise level to the squared curvature.  This
module provides samplers, per-coordinate sign success probabilities, the
one-step expected-improvement values of gradient and sign updates under
locally optimal step sizes, the diagonal-mass measure of a matrix, Haar
rotation sampling, and the benchmark comparing both methods across
conditioning, orientation, and noise.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np

from .core import RngStream, as_vector, check_same_dim, erf, erf_vector, sign1
from .parallel import run_cells
from .records import RunRecord, problem_hash_of, stable_hash64


@dataclass(frozen=True)
class SpectrumSpec:
    """Recipe for drawing an eigenvalue spectrum.

    ``uniform`` draws all d values from [lo, hi].  ``structured`` draws a
    fixed count floor(bulk_frac*d) from the bulk interval and the rest from
    the tail interval, emulating a spectrum with a small cluster of very
    large eigenvalues.  All bounds must be positive so the problem stays
    positive definite.
    """

    kind: str
    d: int
    lo: float = 0.0
    hi: float = 0.0
    bulk_lo: float = 0.0
    bulk_hi: float = 0.0
    bulk_frac: float = 0.0
    tail_lo: float = 0.0
    tail_hi: float = 0.0

    @classmethod
    def uniform(cls, d: int, lo: float, hi: float) -> "SpectrumSpec":
        if not 0.0 < lo < hi:
            raise ValueError(f"need 0 < lo < hi, got [{lo}, {hi}]")
        return cls(kind="uniform", d=d, lo=lo, hi=hi)

    @classmethod
    def structured(
        cls,
        d: int,
        bulk_lo: float,
        bulk_hi: float,
        bulk_frac: float,
        tail_lo: float,
        tail_hi: float,
    ) -> "SpectrumSpec":
        if not 0.0 < bulk_lo < bulk_hi:
            raise ValueError(f"need 0 < bulk_lo < bulk_hi, got [{bulk_lo}, {bulk_hi}]")
        if not 0.0 < tail_lo < tail_hi:
            raise ValueError(f"need 0 < tail_lo < tail_hi, got [{tail_lo}, {tail_hi}]")
        if not 0.0 < bulk_frac < 1.0:
            raise ValueError(f"need 0 < bulk_frac < 1, got {bulk_frac}")
        return cls(
            kind="structured",
            d=d,
            bulk_lo=bulk_lo,
            bulk_hi=bulk_hi,
            bulk_frac=bulk_frac,
            tail_lo=tail_lo,
            tail_hi=tail_hi,
        )

    def sample(self, rng: RngStream) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, self.d)
        n_bulk = int(np.floor(self.bulk_frac * self.d))
        bulk = rng.uniform(self.bulk_lo, self.bulk_hi, n_bulk)
        tail = rng.uniform(self.tail_lo, self.tail_hi, self.d - n_bulk)
        return np.concatenate([bulk, tail])


def haar_rotation(d: int, rng: RngStream) -> np.ndarray:
    """Rotation matrix drawn uniformly (Haar) over SO(d).

    QR-decomposes a square standard-normal matrix, fixes the factor's
    column signs so the triangular diagonal is positive (which makes the
    orthogonal factor Haar-uniform over O(d)), then flips one column if
    needed to reach determinant +1.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    a = rng.standard_normal((d, d))
    q, r = np.linalg.qr(a)
    q = q * sign1(np.diag(r))[np.newaxis, :]
    if np.linalg.det(q) < 0.0:
        q[:, 0] = -q[:, 0]
    return q


def p_diag(q: np.ndarray) -> float:
    """Fraction of a matrix's absolute mass lying on its diagonal.

    Equals 1 exactly for diagonal matrices and is at least 1/d for any
    positive-definite matrix.
    """
    q = np.asarray(q, dtype=np.float64)
    total = np.abs(q).sum()
    if total == 0.0:
        raise ValueError("p_diag undefined for the all-zero matrix")
    return float(np.abs(np.diag(q)).sum() / total)


@dataclass(frozen=True)
class QuadraticProblem:
    """Positive-definite quadratic with Gaussian data noise.

    The objective is 0.5*(theta-x*)' Q (theta-x*) plus the constant noise
    floor 0.5*nu^2*sum(lambda); stochastic gradients are Q(theta - x) with
    x drawn N(x*, nu^2 I), hence Gaussian around the true gradient with
    covariance nu^2*Q*Q.
    """

    Q: np.ndarray
    x_star: np.ndarray
    nu: float
    lam: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if self.nu < 0.0:
            raise ValueError(f"nu must be >= 0, got {self.nu}")
        if np.abs(self.Q - self.Q.T).max() > 1e-10:
            raise ValueError("Q must be symmetric to 1e-10")
        if np.any(self.lam <= 0.0):
            raise ValueError("all eigenvalues must be > 0")
        vtv = self.V.T @ self.V
        if np.abs(vtv - np.eye(self.dim)).max() > 1e-10:
            raise ValueError("V must be orthonormal to 1e-10")

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @functools.cached_property
    def grad_noise_stddev(self) -> np.ndarray:
        """Per-coordinate stddev of the stochastic gradient, nu*sqrt((QQ)_ii)."""
        return self.nu * np.sqrt((self.Q * self.Q).sum(axis=1))

    def content_hash(self) -> str:
        return problem_hash_of(self.Q, self.x_star, [self.nu])

    def loss(self, theta) -> float:
        theta = as_vector(theta)
        check_same_dim(theta, self.x_star)
        diff = theta - self.x_star
        return float(0.5 * diff @ (self.Q @ diff) + 0.5 * self.nu**2 * self.lam.sum())

    def grad(self, theta) -> np.ndarray:
        theta = as_vector(theta)
        check_same_dim(theta, self.x_star)
        return self.Q @ (theta - self.x_star)

    def sample_gradient(self, theta, rng: RngStream) -> np.ndarray:
        return self.sample_gradients(theta, rng, 1)[0]

    def sample_gradients(self, theta, rng: RngStream, n: int) -> np.ndarray:
        """n independent stochastic gradients at theta, one per row.

        Each row is Q(theta - x) for an independent data draw x; computed
        in place on the noise buffer to keep the Monte-Carlo paths cheap.
        """
        theta = as_vector(theta)
        check_same_dim(theta, self.x_star)
        if self.nu == 0.0:
            # degenerate data distribution: every draw is the true gradient
            return np.tile(self.grad(theta), (n, 1))
        z = rng.standard_normal((n, self.dim))
        z *= -self.nu
        z += theta - self.x_star
        return z @ self.Q

    def per_example_gradients(self, theta, rng: RngStream, batch_size: int):
        return self.sample_gradients(theta, rng, batch_size)

    def gradient_oracle(self, theta, rng: RngStream):
        g = self.sample_gradient(theta, rng)
        true_var = self.grad_noise_stddev**2
        return g, self.grad(theta), true_var


def build_problem(
    spec: SpectrumSpec, orientation: str, nu: float, rng: RngStream
) -> QuadraticProblem:
    """Build a problem with the sampled spectrum and the given orientation.

    ``axis_aligned`` yields a diagonal matrix; ``random_rotation`` conjugates
    the sampled spectrum by a Haar rotation.  The optimum sits at the
    origin.
    """
    lam = spec.sample(rng)
    if orientation == "axis_aligned":
        q = np.diag(lam)
        v = np.eye(spec.d)
    elif orientation == "random_rotation":
        v = haar_rotation(spec.d, rng)
        q = v @ np.diag(lam) @ v.T
        q = 0.5 * (q + q.T)
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return QuadraticProblem(Q=q, x_star=np.zeros(spec.d), nu=nu, lam=lam, V=v)


def sign_success_probability(mean: float, stddev: float) -> float:
    """Probability that a Gaussian draw shares the sign of its mean.

    0.5 + 0.5*erf(|mean| / (sqrt(2)*stddev)); by convention 1 for a
    degenerate (zero-stddev) draw with nonzero mean, and 0.5 for a zero
    mean with noise.  Undefined when both vanish.
    """
    if stddev < 0.0:
        raise ValueError(f"stddev must be >= 0, got {stddev}")
    if stddev == 0.0:
        if mean == 0.0:
            raise ValueError("success probability undefined for mean=stddev=0")
        return 1.0
    if mean == 0.0:
        return 0.5
    return 0.5 + 0.5 * erf(abs(mean) / (np.sqrt(2.0) * stddev))


def success_probabilities(p: QuadraticProblem, theta) -> np.ndarray:
    """Per-coordinate probability that a stochastic gradient sign is correct."""
    grad = p.grad(theta)
    sigma = p.grad_noise_stddev
    return np.array(
        [sign_success_probability(g, s) for g, s in zip(grad, sigma)]
    )


def _signed_success_weight(p: QuadraticProblem, grad: np.ndarray) -> float:
    """sum_i (2*rho_i - 1) |grad_i|, with zero-gradient coordinates dropping out.

    Vectorized hot path: 2*rho - 1 = erf(|g| / (sqrt(2)*sigma)) where sigma
    is positive, and 1 where sigma = 0 (the zero-gradient terms carry weight
    |g| = 0 either way).
    """
    sigma = p.grad_noise_stddev
    mag = np.abs(grad)
    noisy = sigma > 0.0
    weight = np.ones_like(mag)
    if np.any(noisy):
        weight[noisy] = erf_vector(mag[noisy] / (np.sqrt(2.0) * sigma[noisy]))
    return float(weight @ mag)


def improvement_sgd(p: QuadraticProblem, theta) -> float:
    """Expected one-step decrease of a gradient update at its optimal step size.

    0.5*|grad|^4 / (grad' Q grad + nu^2 * sum(lambda^3)); the second
    denominator term is where noise and the cube of the spectrum interact.
    """
    grad = p.grad(theta)
    if not np.any(grad):
        raise ValueError("improvement undefined at a stationary point")
    denom = float(grad @ (p.Q @ grad) + p.nu**2 * (p.lam**3).sum())
    return 0.5 * float(grad @ grad) ** 2 / denom


def improvement_ssd_bound(p: QuadraticProblem, theta) -> float:
    """Lower bound on the expected one-step decrease of a sign update.

    0.5 * (sum_i (2*rho_i - 1)|grad_i|)^2 / sum(lambda) * p_diag(Q); the
    diagonal-mass factor is what penalizes rotated eigenbases.
    """
    grad = p.grad(theta)
    if not np.any(grad):
        raise ValueError("improvement undefined at a stationary point")
    w = _signed_success_weight(p, grad)
    return 0.5 * w**2 / float(p.lam.sum()) * p_diag(p.Q)


def optimal_step(
    p: QuadraticProblem,
    theta,
    direction: str,
    mc_samples: int = 1000,
    rng: RngStream | None = None,
    denominator: str = "mc",
) -> float:
    """Locally optimal step size for a gradient or sign update at theta.

    The gradient case is closed form.  For the sign case the numerator is
    exact via the success probabilities while the expected curvature of a
    random sign vector, E[s'Qs], is estimated by Monte Carlo from
    ``mc_samples`` stochastic-gradient sign draws (``denominator="mc"``,
    the default) or replaced by its upper bound sum|q_ij|
    (``denominator="bound"``), which yields a smaller, safe step.
    """
    grad = p.grad(theta)
    if not np.any(grad):
        raise ValueError("optimal step undefined at a stationary point")
    if direction == "sgd":
        denom = float(grad @ (p.Q @ grad) + p.nu**2 * (p.lam**3).sum())
        return float(grad @ grad) / denom
    if direction != "ssd":
        raise ValueError(f"unknown direction {direction!r}")
    num = _signed_success_weight(p, grad)
    if denominator == "bound":
        denom = float(np.abs(p.Q).sum())
    elif denominator == "mc":
        if p.nu == 0.0:
            # degenerate noise: every draw gives the same sign vector
            s = sign1(grad)
            denom = float(s @ (p.Q @ s))
        else:
            if rng is None:
                raise ValueError("Monte Carlo denominator requires an RngStream")
            if mc_samples < 1:
                raise ValueError(f"mc_samples must be >= 1, got {mc_samples}")
            s = sign1(p.sample_gradients(theta, rng, mc_samples))
            denom = float(((s @ p.Q) * s).sum(axis=1).mean())
    else:
        raise ValueError(f"unknown denominator mode {denominator!r}")
    return num / denom


@dataclass(frozen=True)
class Figure2Config:
    """Protocol for the conditioning/orientation/noise benchmark.

    Defaults follow the documented protocol: dimension 100, a mildly
    conditioned spectrum uniform on [0.1, 1.1] and an ill-conditioned one
    with 90% of values in (0, 1] and 10% in [30, 60], both axis-aligned and
    randomly rotated, three noise levels, 500 steps evaluated every step,
    ten replication seeds.  ``rotated_band_log10`` is the calibrated width
    within which the two methods are considered to perform roughly equally
    on the rotated ill-conditioned problem.
    """

    d: int = 100
    noise_levels: tuple[float, ...] = (0.0, 0.1, 4.0)
    steps: int = 500
    eval_every: int = 1
    seeds: tuple[int, ...] = tuple(range(10))
    mc_samples: int = 1000
    denominator: str = "mc"
    workers: int = 1
    theta0_scale: float = 1.0
    problem_seed: int = 0
    well_lo: float = 0.1
    well_hi: float = 1.1
    ill_bulk_lo: float = 1e-6
    ill_bulk_hi: float = 1.0
    ill_bulk_frac: float = 0.9
    ill_tail_lo: float = 30.0
    ill_tail_hi: float = 60.0
    rotated_band_log10: float = 1.0

    def spectra(self) -> dict[str, SpectrumSpec]:
        return {
            "well": SpectrumSpec.uniform(self.d, self.well_lo, self.well_hi),
            "ill": SpectrumSpec.structured(
                self.d,
                self.ill_bulk_lo,
                self.ill_bulk_hi,
                self.ill_bulk_frac,
                self.ill_tail_lo,
                self.ill_tail_hi,
            ),
        }


ORIENTATIONS = ("axis_aligned", "random_rotation")


def _figure2_cell(
    problem: QuadraticProblem,
    method: str,
    seed: int,
    experiment: str,
    theta0: np.ndarray,
    cfg: Figure2Config,
) -> RunRecord:
    rng = RngStream(seed, stable_hash64(f"{experiment}/{method}"))
    theta = theta0.copy()
    rec_steps = [0]
    rec_losses = [problem.loss(theta)]
    converged = False
    for k in range(cfg.steps):
        if not converged:
            if not np.any(problem.grad(theta)):
                converged = True
            else:
                alpha = optimal_step(
                    problem,
                    theta,
                    method,
                    mc_samples=cfg.mc_samples,
                    rng=rng,
                    denominator=cfg.denominator,
                )
                g = problem.sample_gradient(theta, rng)
                z = g if method == "sgd" else sign1(g)
                theta = theta - alpha * z
        s = k + 1
        if s % cfg.eval_every == 0 or s == cfg.steps:
            rec_steps.append(s)
            rec_losses.append(problem.loss(theta))
    return RunRecord(
        experiment=experiment,
        method=method,
        seed=seed,
        steps=rec_steps,
        losses=rec_losses,
        problem_hash=problem.content_hash(),
    )


def figure2_experiment(cfg: Figure2Config) -> list[RunRecord]:
    """Run gradient and sign descent at locally optimal step sizes.

    One problem matrix is built per (spectrum, orientation) pair and reused
    across noise levels, methods and seeds; each replication seed draws its
    own start point, shared by both methods so comparisons are paired.
    Every step recomputes the optimal step size at the current iterate.
    Returns records sorted by (experiment, method, seed).
    """
    problems = {}
    for name, spec in cfg.spectra().items():
        for orientation in ORIENTATIONS:
            prng = RngStream(
                cfg.problem_seed, stable_hash64(f"figure2/problem/{name}/{orientation}")
            )
            base = build_problem(spec, orientation, 0.0, prng)
            problems[(name, orientation)] = base
    cells = []
    for (name, orientation), base in sorted(problems.items()):
        for nu in cfg.noise_levels:
            problem = replace(base, nu=float(nu))
            experiment = f"figure2/{name}/{orientation}/nu={nu!r}"
            for seed in cfg.seeds:
                t0_rng = RngStream(
                    seed, stable_hash64(f"figure2/theta0/{name}/{orientation}")
                )
                theta0 = cfg.theta0_scale * t0_rng.standard_normal(cfg.d)
                for method in ("sgd", "ssd"):
                    key = (experiment, method, seed)
                    args = (problem, method, seed, experiment, theta0, cfg)
                    cells.append((key, _figure2_cell, args))
    records, _ = run_cells(cells, workers=cfg.workers)
    return records


def figure2_orderings(records: list[RunRecord], cfg: Figure2Config) -> dict:
    """Evaluate the qualitative outcome checks on benchmark records.

    Returns per-check booleans: gradient descent wins the noise-free
    well-conditioned case on every seed, sign descent wins the noisy
    axis-aligned ill-conditioned case on every seed, and on the rotated
    ill-conditioned problem the mean log10 final losses stay within the
    calibrated band at every noise level.
    """
    final = {}
    for r in records:
        final[(r.experiment, r.method, r.seed)] = r.final_loss

    def finals(experiment, method):
        return np.array([final[(experiment, method, s)] for s in cfg.seeds])

    checks = {}
    ok_a = True
    for orientation in ORIENTATIONS:
        exp = f"figure2/well/{orientation}/nu={0.0!r}"
        ok_a &= bool(np.all(finals(exp, "sgd") < finals(exp, "ssd")))
    checks["well_noise_free_sgd_wins"] = ok_a
    exp_b = f"figure2/ill/axis_aligned/nu={4.0!r}"
    checks["ill_axis_noisy_ssd_wins"] = bool(
        np.all(finals(exp_b, "ssd") < finals(exp_b, "sgd"))
    )
    ok_c = True
    gaps = {}
    for nu in cfg.noise_levels:
        exp = f"figure2/ill/random_rotation/nu={float(nu)!r}"
        gap = abs(
            float(
                np.mean(np.log10(finals(exp, "ssd")))
                - np.mean(np.log10(finals(exp, "sgd")))
            )
        )
        gaps[nu] = gap
        ok_c &= gap <= cfg.rotated_band_log10
    checks["ill_rotated_roughly_equal"] = ok_c
    checks["rotated_log10_gaps"] = gaps
    return checks
