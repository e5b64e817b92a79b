"""Experiment orchestration: configs, the grid runner, drivers, self-test.

Every experiment resolves its configuration by deep-merging a JSON file and
command-line overrides onto documented defaults, stamps its output with a
digest of the semantic config (execution-only fields like worker count and
output paths are excluded so they cannot affect the bytes written), and
emits CSV plus optional SVG figures.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import numpy as np

from . import plots
from .core import RngStream, sign1
from .estimators import (
    EmaState,
    ema_update,
    factor_adam_star,
    factor_curves,
    factor_msvag,
    factor_svag,
    ma_variance_estimate,
    mb_momentum_variance,
    mb_variance_estimate,
    rho,
)
from .optimizers import (
    Method,
    OptimizerConfig,
    OptimizerInstance,
    PiecewiseSchedule,
    adam_direction,
    run,
)
from .parallel import run_cells
from .problems import (
    LsqClassification,
    NoisyConvexProblem,
    check_sign_proportionality,
    full_batch_trajectory,
    lsq_gradient,
    make_wilson_instance,
    theorem1_experiment,
)
from .records import (
    RunRecord,
    config_digest,
    emit_csv,
    emit_table_csv,
    parse_csv,
    render_float,
    stable_hash64,
)
from .sqp import (
    Figure2Config,
    QuadraticProblem,
    SpectrumSpec,
    build_problem,
    figure2_experiment,
    figure2_orderings,
    haar_rotation,
    improvement_sgd,
    optimal_step,
    p_diag,
)

WORKERS_ENV = "GRADISSECT_WORKERS"

# execution-only fields: they may not influence emitted bytes
NON_SEMANTIC_KEYS = ("workers", "out", "plot")

DEFAULTS: dict[str, dict] = {
    "figure2": {
        "seeds": list(range(10)),
        "steps": 500,
        "eval_every": 1,
        "workers": 1,
        "mc_samples": 1000,
        "denominator": "mc",
        "d": 100,
        "noise_levels": [0.0, 0.1, 4.0],
        "theta0_scale": 1.0,
        "problem_seed": 0,
        "well_lo": 0.1,
        "well_hi": 1.1,
        "ill_bulk_lo": 1e-6,
        "ill_bulk_hi": 1.0,
        "ill_bulk_frac": 0.9,
        "ill_tail_lo": 30.0,
        "ill_tail_hi": 60.0,
        # calibrated width, in decades of mean final loss, within which the
        # rotated ill-conditioned comparison counts as "roughly equal"
        "rotated_band_log10": 1.0,
    },
    "factors": {"eta_max": 4.0, "eta_step": 0.01},
    "theorem1": {
        "d": 10,
        "lambda_min": 0.5,
        "lambda_max": 2.0,
        "noise": {"kind": "constant", "c_v": 0.0, "M_v": 1.0},
        "steps": 10_000,
        "seeds": list(range(20)),
        "eval_every": 10,
        "alpha": None,
        "window": [100, 10_000],
        "slope_threshold": -0.8,
        "workers": 1,
    },
    "wilson": {
        "steps": 100,
        # sign(0) = +1 would leave the ray if an iterate landed exactly on
        # the stationary point; this step size never hits it in float64
        "alpha_sign": 0.07,
        "alpha_adam": 0.05,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "msvag_alpha": 0.1,
        "msvag_beta": 0.9,
        "dims": [3, 7],
        "search_n": 2,
        "search_d": 3,
        "search_seed": 5,
        "tol": 1e-10,
    },
    "run": {
        "seeds": [0, 1, 2],
        "steps": 100,
        "eval_every": 1,
        "methods": ["sgd"],
        "alphas": [0.1],
        "theta0_scale": 1.0,
        "workers": 1,
        "mc_samples": 1000,
        "optimizer": {
            "beta": 0.9,
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon": 1e-8,
            "batch_size": 8,
            "schedule_milestones": [],
            "schedule_factor": 1.0,
        },
        "problem": {
            "type": "sqp",
            "d": 10,
            "spectrum": {"kind": "uniform", "lo": 0.5, "hi": 1.5},
            "orientation": "axis_aligned",
            "nu": 0.1,
            "problem_seed": 0,
        },
    },
    "selftest": {},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(experiment: str, file_config: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults <- config file <- overrides for one experiment."""
    if experiment not in DEFAULTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    cfg = copy.deepcopy(DEFAULTS[experiment])
    if file_config:
        cfg = _deep_merge(cfg, file_config)
    if overrides:
        cfg = _deep_merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg


def semantic_digest(experiment: str, cfg: dict) -> str:
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC_KEYS}
    semantic["experiment"] = experiment
    return config_digest(semantic)


def validate_config(experiment: str, cfg: dict) -> None:
    """Reject semantically invalid configurations before any work starts."""
    if "seeds" in cfg and not cfg["seeds"]:
        raise ValueError("seeds must be non-empty")
    if "steps" in cfg and int(cfg["steps"]) < 1:
        raise ValueError("steps must be >= 1")
    if "eval_every" in cfg and int(cfg["eval_every"]) < 1:
        raise ValueError("eval_every must be >= 1")
    if cfg.get("denominator") not in (None, "mc", "bound"):
        raise ValueError(f"unknown denominator mode {cfg['denominator']!r}")
    if experiment == "run":
        if not cfg["alphas"]:
            raise ValueError("alpha grid must be non-empty")
        if any(a <= 0 for a in cfg["alphas"]):
            raise ValueError("step sizes must be > 0")
        if not cfg["methods"]:
            raise ValueError("methods must be non-empty")
        for name in cfg["methods"]:
            Method.from_name(name)
    if experiment == "factors" and float(cfg["eta_step"]) <= 0:
        raise ValueError("eta_step must be > 0")


def resolve_workers(cfg: dict) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        return max(1, int(env))
    return max(1, int(cfg.get("workers", 1)))


def shift_seeds(cfg: dict, seed_base: int) -> None:
    """Re-derive the replication seed list from a base seed, keeping its length."""
    k = len(cfg.get("seeds", [])) or 1
    cfg["seeds"] = [seed_base + i for i in range(k)]


@dataclass
class ExperimentOutcome:
    exit_code: int
    csv_paths: list[str] = field(default_factory=list)
    svg_paths: list[str] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)
    records: list[RunRecord] = field(default_factory=list)


def _out_paths(out, experiment: str):
    """Resolve --out into (directory, csv path); a *.csv value names the file."""
    out = str(out)
    if out.endswith(".csv"):
        directory = os.path.dirname(out) or "."
        os.makedirs(directory, exist_ok=True)
        return directory, out
    os.makedirs(out, exist_ok=True)
    return out, os.path.join(out, f"{experiment}.csv")


def build_problem_from_config(spec: dict):
    """Instantiate a problem object from its JSON description."""
    kind = spec.get("type")
    if kind == "sqp":
        d = int(spec["d"])
        sp = spec["spectrum"]
        if sp["kind"] == "uniform":
            spectrum = SpectrumSpec.uniform(d, float(sp["lo"]), float(sp["hi"]))
        elif sp["kind"] == "structured":
            spectrum = SpectrumSpec.structured(
                d,
                float(sp["bulk_lo"]),
                float(sp["bulk_hi"]),
                float(sp["bulk_frac"]),
                float(sp["tail_lo"]),
                float(sp["tail_hi"]),
            )
        else:
            raise ValueError(f"unknown spectrum kind {sp['kind']!r}")
        rng = RngStream(
            int(spec.get("problem_seed", 0)), stable_hash64("run/problem")
        )
        return build_problem(spectrum, spec["orientation"], float(spec["nu"]), rng)
    if kind == "noisy_convex":
        d = int(spec["d"])
        lam = np.linspace(float(spec["lambda_min"]), float(spec["lambda_max"]), d)
        noise = spec.get("noise", {})
        return NoisyConvexProblem(
            A=np.diag(lam),
            noise_kind=noise.get("kind", "constant"),
            c_v=float(noise.get("c_v", 0.0)),
            M_v=float(noise.get("M_v", 1.0)),
        )
    if kind == "lsq_all_ones":
        return make_wilson_instance("all_ones", d=int(spec["d"]))
    raise ValueError(f"unknown problem type {kind!r}")


def _optimizer_config(method: Method, alpha: float, opts: dict) -> OptimizerConfig:
    milestones = tuple(int(m) for m in opts.get("schedule_milestones", []))
    schedule = (
        PiecewiseSchedule(milestones, float(opts.get("schedule_factor", 1.0)))
        if milestones
        else None
    )
    return OptimizerConfig(
        method=method,
        alpha=alpha,
        beta=float(opts.get("beta", 0.9)),
        beta1=float(opts.get("beta1", 0.9)),
        beta2=float(opts.get("beta2", 0.999)),
        epsilon=float(opts.get("epsilon", 1e-8)),
        schedule=schedule,
        batch_size=int(opts.get("batch_size", 8)),
    )


def _grid_cell(problem, method_name, alpha, seed, steps, eval_every, opts, theta0):
    method = Method.from_name(method_name)
    opt = OptimizerInstance(_optimizer_config(method, alpha, opts), theta0)
    rng = RngStream(
        seed, stable_hash64(f"run/alpha={alpha!r}/{method_name}")
    )
    return run(
        opt,
        problem,
        steps,
        rng,
        eval_every=eval_every,
        experiment=f"run/alpha={alpha!r}",
        seed=seed,
        problem_hash=problem.content_hash(),
    )


def grid_run(cfg: dict, workers: int | None = None):
    """Cartesian product of methods x alphas x seeds on one problem.

    Failed cells (e.g. diverging step sizes) are recorded and skipped; the
    merge order is sorted by cell key, independent of the execution
    schedule.  Returns (records, failures).
    """
    if not cfg["alphas"]:
        raise ValueError("alpha grid must be non-empty")
    if not cfg["seeds"]:
        raise ValueError("seeds must be non-empty")
    problem = build_problem_from_config(cfg["problem"])
    workers = resolve_workers(cfg) if workers is None else workers
    d = problem.dim
    cells = []
    for method_name in cfg["methods"]:
        Method.from_name(method_name)  # validate early
        for alpha in cfg["alphas"]:
            for seed in cfg["seeds"]:
                t0_rng = RngStream(seed, stable_hash64("run/theta0"))
                theta0 = float(cfg.get("theta0_scale", 1.0)) * t0_rng.standard_normal(d)
                key = (f"run/alpha={alpha!r}", method_name, seed)
                args = (
                    problem,
                    method_name,
                    alpha,
                    seed,
                    int(cfg["steps"]),
                    int(cfg["eval_every"]),
                    cfg["optimizer"],
                    theta0,
                )
                cells.append((key, _grid_cell, args))
    return run_cells(cells, workers=workers, capture_errors=True)


def best_alpha(records: list[RunRecord]) -> dict[str, float]:
    """Per method, the grid step size attaining the lowest final loss."""
    best: dict[str, tuple[float, float]] = {}
    for r in records:
        alpha = float(r.experiment.split("alpha=", 1)[1])
        cur = best.get(r.method)
        if cur is None or r.final_loss < cur[1]:
            best[r.method] = (alpha, r.final_loss)
    return {m: a for m, (a, _) in best.items()}


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------


def run_figure2(cfg: dict, out) -> ExperimentOutcome:
    fig_cfg = Figure2Config(
        d=int(cfg["d"]),
        noise_levels=tuple(float(x) for x in cfg["noise_levels"]),
        steps=int(cfg["steps"]),
        eval_every=int(cfg["eval_every"]),
        seeds=tuple(int(s) for s in cfg["seeds"]),
        mc_samples=int(cfg["mc_samples"]),
        denominator=cfg["denominator"],
        workers=resolve_workers(cfg),
        theta0_scale=float(cfg["theta0_scale"]),
        problem_seed=int(cfg["problem_seed"]),
        well_lo=float(cfg["well_lo"]),
        well_hi=float(cfg["well_hi"]),
        ill_bulk_lo=float(cfg["ill_bulk_lo"]),
        ill_bulk_hi=float(cfg["ill_bulk_hi"]),
        ill_bulk_frac=float(cfg["ill_bulk_frac"]),
        ill_tail_lo=float(cfg["ill_tail_lo"]),
        ill_tail_hi=float(cfg["ill_tail_hi"]),
        rotated_band_log10=float(cfg["rotated_band_log10"]),
    )
    records = figure2_experiment(fig_cfg)
    directory, csv_path = _out_paths(out, "figure2")
    digest = semantic_digest("figure2", cfg)
    emit_csv(records, csv_path, digest)
    outcome = ExperimentOutcome(exit_code=0, csv_paths=[csv_path], records=records)
    checks = figure2_orderings(records, fig_cfg)
    for name, value in checks.items():
        outcome.messages.append(f"{name}: {value}")
    if cfg.get("plot"):
        outcome.svg_paths = plots.emit_svg(records, directory, logy=True)
    return outcome


def run_factors(cfg: dict, out) -> ExperimentOutcome:
    step = float(cfg["eta_step"])
    n = int(round(float(cfg["eta_max"]) / step))
    eta = np.array([i * step for i in range(n + 1)])
    table = factor_curves(eta)
    directory, csv_path = _out_paths(out, "factors")
    digest = semantic_digest("factors", cfg)
    emit_table_csv(
        csv_path,
        ["eta", "sign_optimal", "adam", "svag"],
        [list(row) for row in table],
        digest,
    )
    outcome = ExperimentOutcome(exit_code=0, csv_paths=[csv_path])
    if cfg.get("plot"):
        svg_path = os.path.join(directory, "factors.svg")
        outcome.svg_paths = [plots.emit_factor_curve_svg(table, svg_path)]
    return outcome


def run_theorem1(cfg: dict, out) -> ExperimentOutcome:
    problem = build_problem_from_config(
        {
            "type": "noisy_convex",
            "d": cfg["d"],
            "lambda_min": cfg["lambda_min"],
            "lambda_max": cfg["lambda_max"],
            "noise": cfg["noise"],
        }
    )
    result = theorem1_experiment(
        problem,
        steps=int(cfg["steps"]),
        seeds=[int(s) for s in cfg["seeds"]],
        eval_every=int(cfg["eval_every"]),
        alpha=cfg["alpha"],
        window=tuple(cfg["window"]),
    )
    directory, csv_path = _out_paths(out, "theorem1")
    digest = semantic_digest("theorem1", cfg)
    emit_csv(result.records, csv_path, digest)
    ok_slope = result.slope <= float(cfg["slope_threshold"])
    ok_monotone = result.max_increase_margin <= 0.0
    outcome = ExperimentOutcome(
        exit_code=0 if (ok_slope and ok_monotone) else 1,
        csv_paths=[csv_path],
        records=result.records,
    )
    outcome.messages.append(
        f"tail log-log slope: {result.slope:.4f} "
        f"(threshold {cfg['slope_threshold']}) -> {'ok' if ok_slope else 'FAIL'}"
    )
    outcome.messages.append(
        f"max increase margin: {result.max_increase_margin:.3e} "
        f"-> {'ok' if ok_monotone else 'FAIL'}"
    )
    if cfg.get("plot"):
        outcome.svg_paths = plots.emit_svg(
            result.records, directory, logy=True, logx=True
        )
    return outcome


def run_wilson(cfg: dict, out) -> ExperimentOutcome:
    tol = float(cfg["tol"])
    rows = []
    all_ok = True

    def record(instance: str, check: str, value: float, ok: bool):
        nonlocal all_ok
        all_ok &= ok
        rows.append([instance, check, value, "pass" if ok else "fail"])

    instances = [(f"all_ones_d{d}", make_wilson_instance("all_ones", d=d)) for d in cfg["dims"]]
    search_rng = RngStream(int(cfg["search_seed"]), stable_hash64("wilson/search"))
    instances.append(
        (
            "searched",
            make_wilson_instance(
                "searched", n=int(cfg["search_n"]), d=int(cfg["search_d"]), rng=search_rng
            ),
        )
    )
    nonprop = make_wilson_instance(
        "searched",
        n=int(cfg["search_n"]),
        d=int(cfg["search_d"]),
        rng=search_rng,
        require_nonproportional=True,
    )
    instances.append(("searched_nonprop", nonprop))

    steps = int(cfg["steps"])
    for name, inst in instances:
        reference = inst.X.T @ inst.y
        sign_cfg = OptimizerConfig(method=Method.SSD, alpha=float(cfg["alpha_sign"]))
        ok, dev = check_sign_proportionality(
            full_batch_trajectory(inst, sign_cfg, steps), reference, tol
        )
        record(name, "sign_descent_on_ray", dev, ok)
        adam_cfg = OptimizerConfig(
            method=Method.ADAM,
            alpha=float(cfg["alpha_adam"]),
            beta1=float(cfg["adam_beta1"]),
            beta2=float(cfg["adam_beta2"]),
            epsilon=0.0,
        )
        ok, dev = check_sign_proportionality(
            full_batch_trajectory(inst, adam_cfg, steps), reference, tol
        )
        record(name, "adam_on_ray", dev, ok)
        msvag_cfg = OptimizerConfig(
            method=Method.M_SVAG, alpha=float(cfg["msvag_alpha"]), beta=float(cfg["msvag_beta"])
        )
        first = full_batch_trajectory(inst, msvag_cfg, 1)[0]
        expected = -float(cfg["msvag_alpha"]) * lsq_gradient(inst, np.zeros(inst.dim))
        exact = bool(np.all(first == expected))
        record(name, "msvag_first_step_is_gradient_step", float(np.abs(first - expected).max()), exact)
        if name == "searched_nonprop":
            on_ray, dev = check_sign_proportionality([first], reference, tol)
            record(name, "msvag_first_step_leaves_ray", dev, not on_ray)

    directory, csv_path = _out_paths(out, "wilson")
    digest = semantic_digest("wilson", cfg)
    emit_table_csv(csv_path, ["instance", "check", "value", "status"], rows, digest)
    outcome = ExperimentOutcome(exit_code=0 if all_ok else 1, csv_paths=[csv_path])
    for row in rows:
        outcome.messages.append(f"{row[0]}/{row[1]}: {row[3]} (value={row[2]:.3e})")
    return outcome


def run_grid(cfg: dict, out) -> ExperimentOutcome:
    records, failures = grid_run(cfg)
    directory, csv_path = _out_paths(out, "run")
    digest = semantic_digest("run", cfg)
    outcome = ExperimentOutcome(exit_code=0, csv_paths=[], records=records)
    if records:
        emit_csv(records, csv_path, digest)
        outcome.csv_paths.append(csv_path)
        for method, alpha in sorted(best_alpha(records).items()):
            outcome.messages.append(f"best alpha[{method}] = {alpha!r}")
    for key, message in failures:
        outcome.messages.append(f"cell {key} failed: {message}")
    if failures:
        outcome.exit_code = 1
    if cfg.get("plot") and records:
        outcome.svg_paths = plots.emit_svg(records, directory, logy=True)
    return outcome


# ---------------------------------------------------------------------------
# self-test battery
# ---------------------------------------------------------------------------


def _selftest_checks():
    """Deterministic invariant battery; each check yields (name, ok, observed)."""
    checks = []

    def add(name, ok, observed):
        checks.append((name, bool(ok), float(observed)))

    from .core import elementwise, erf, gauss_sample

    s = elementwise("sign", [-2.0, 0.0, 3.0])
    add("sign-convention", np.array_equal(s, [-1.0, 1.0, 1.0]), s[1])
    d = elementwise("div", [1.0, 4.0], [2.0, 8.0])
    add("elementwise-div", np.array_equal(d, [0.5, 0.5]), d[0])
    add("erf-odd", erf(-1.25) == -erf(1.25), erf(1.25))
    add("erf-probit", abs(erf(1.0 / np.sqrt(2.0)) - 0.6826894921370859) < 1e-12,
        erf(1.0 / np.sqrt(2.0)))
    mean = np.array([1.5, -2.0])
    drawn = gauss_sample(RngStream(11, 3), mean, np.zeros(2))
    add("gauss-degenerate", np.array_equal(drawn, mean), drawn[0])

    st = EmaState(2, 0.9)
    m, v = ema_update(st, np.array([2.0, -3.0]))
    add("ema-first-exact", np.array_equal(m, [2.0, -3.0]) and np.array_equal(v, [4.0, 9.0]), m[0])
    st = EmaState(1, 0.9)
    for _ in range(50):
        m, v = ema_update(st, np.array([3.0]))
    add("ema-constant", abs(m[0] - 3.0) < 1e-12 and abs(v[0] - 9.0) < 1e-12, m[0])

    add("rho-at-zero", all(rho(b, 0) == 1.0 for b in (0.0, 0.5, 0.9, 0.99)), rho(0.9, 0))
    # brute-force squared-weight sum via impulse responses of the real update
    t_check, beta = 20, 0.9
    csum = 0.0
    for s_idx in range(t_check + 1):
        st = EmaState(1, beta)
        for k in range(t_check + 1):
            g = np.array([1.0 if k == s_idx else 0.0])
            m, _ = ema_update(st, g)
        csum += float(m[0]) ** 2
    add("rho-matches-weights", abs(csum - rho(beta, t_check)) < 1e-12, csum)

    add("variance-estimate-at-zero",
        np.array_equal(ma_variance_estimate([1.0], [5.0], 0.9, 0), [0.0]),
        0.0)
    add("variance-estimate-no-spread",
        np.array_equal(ma_variance_estimate([2.0], [4.0], 0.9, 7), [0.0]),
        0.0)
    add("mb-variance-hand", np.array_equal(mb_variance_estimate([[0.0], [2.0]]), [1.0]),
        mb_variance_estimate([[0.0], [2.0]])[0])

    # mini-batch momentum variance equals the explicit weighted sum
    beta = 0.8
    r_state = EmaState(1, beta * beta)
    history = []
    worst = 0.0
    seq_rng = RngStream(21, 9)
    for t in range(6):
        s_mb = np.abs(seq_rng.standard_normal(1)) + 0.1
        history.append(s_mb[0])
        got = mb_momentum_variance(r_state, s_mb, beta, t)[0]
        explicit = sum(
            ((1 - beta) * beta ** (t - s_i) / (1 - beta ** (t + 1))) ** 2 * h
            for s_i, h in enumerate(history)
        )
        worst = max(worst, abs(got - explicit))
    add("mb-momentum-variance-weights", worst < 1e-12, worst)

    f = factor_svag(np.array([1.0, 1.0]), np.array([0.25, 2.25]))
    add("factor-quarter", abs(f.gamma[0] - 0.8) < 1e-15, f.gamma[0])
    add("factor-nine-quarters", abs(f.gamma[1] - 1.0 / 3.25) < 1e-15, f.gamma[1])
    fm = factor_msvag(np.array([1.0]), np.array([19.0]), 0.9, 500)
    star = factor_adam_star(np.array([1.0]), np.array([19.0]), 0.9, 500)
    add("factor-star-square", abs(star.gamma[0] ** 2 - fm.gamma[0]) < 1e-15, star.gamma[0])

    chk_rng = RngStream(31, 2)
    mm = chk_rng.uniform(0.1, 2.0, 100) * sign1(chk_rng.standard_normal(100))
    vv = mm * mm + chk_rng.uniform(0.0, 4.0, 100)
    lhs = adam_direction(mm, vv, 0.0)
    rhs = np.sqrt(1.0 / (1.0 + (vv - mm * mm) / (mm * mm))) * sign1(mm)
    add("adam-direction-identity", np.abs(lhs - rhs).max() < 1e-12, np.abs(lhs - rhs).max())

    prob = QuadraticProblem(
        Q=np.array([[2.0]]), x_star=np.zeros(1), nu=0.0, lam=np.array([2.0]), V=np.eye(1)
    )
    add("quadratic-loss-hand", prob.loss(np.array([3.0])) == 9.0, prob.loss(np.array([3.0])))
    noisy = QuadraticProblem(
        Q=np.array([[2.0]]), x_star=np.zeros(1), nu=0.5, lam=np.array([2.0]), V=np.eye(1)
    )
    add("quadratic-noise-floor", noisy.loss(np.zeros(1)) == 0.25, noisy.loss(np.zeros(1)))
    add("p-diag-identity", p_diag(np.eye(4)) == 1.0, p_diag(np.eye(4)))
    add("p-diag-hand", abs(p_diag(np.array([[2.0, 1.0], [1.0, 2.0]])) - 4.0 / 6.0) < 1e-15,
        p_diag(np.array([[2.0, 1.0], [1.0, 2.0]])))
    r = haar_rotation(30, RngStream(41, 5))
    add("haar-orthonormal", np.abs(r.T @ r - np.eye(30)).max() < 1e-10,
        np.abs(r.T @ r - np.eye(30)).max())
    add("haar-proper", abs(np.linalg.det(r) - 1.0) < 1e-8, np.linalg.det(r))

    sq2 = QuadraticProblem(
        Q=np.eye(2), x_star=np.zeros(2), nu=0.0, lam=np.ones(2), V=np.eye(2)
    )
    imp = improvement_sgd(sq2, np.array([1.0, 0.0]))
    add("improvement-hand", abs(imp - 0.5) < 1e-15, imp)

    # beta = 0 collapses the averaged methods onto their base methods
    grad_rng = RngStream(51, 8)
    grads = [grad_rng.standard_normal(4) for _ in range(20)]
    theta0 = grad_rng.standard_normal(4)
    pairs = [(Method.M_SGD, Method.SGD), (Method.M_SSD, Method.SSD)]
    collapse_ok = True
    for averaged, base in pairs:
        oa = OptimizerInstance(OptimizerConfig(method=averaged, alpha=0.05, beta=0.0), theta0)
        ob = OptimizerInstance(OptimizerConfig(method=base, alpha=0.05), theta0)
        for g in grads:
            collapse_ok &= bool(np.array_equal(oa.step(g), ob.step(g)))
    add("beta-zero-collapse", collapse_ok, float(collapse_ok))

    # first step of every variance-adapted method is the plain gradient step
    first_ok = True
    for method in (Method.M_SVAG, Method.SVAG, Method.M_SGD):
        opt = OptimizerInstance(OptimizerConfig(method=method, alpha=0.1, beta=0.9), theta0)
        first_ok &= bool(np.array_equal(opt.step(grads[0]), theta0 - 0.1 * grads[0]))
    add("first-step-gradient", first_ok, float(first_ok))

    from .sqp import sign_success_probability

    p1 = sign_success_probability(1.0, 1.0)
    add("success-prob-unit-ratio", abs(p1 - 0.8413447460685429) < 1e-12, p1)
    return checks


def run_selftest(cfg: dict, out) -> ExperimentOutcome:
    checks = _selftest_checks()
    rows = [[name, "pass" if ok else "fail", observed] for name, ok, observed in checks]
    directory, csv_path = _out_paths(out, "selftest")
    digest = semantic_digest("selftest", cfg)
    emit_table_csv(csv_path, ["check", "status", "observed"], rows, digest)
    failed = [name for name, ok, _ in checks if not ok]
    outcome = ExperimentOutcome(
        exit_code=1 if failed else 0, csv_paths=[csv_path]
    )
    outcome.messages.append(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    for name in failed:
        outcome.messages.append(f"FAILED: {name}")
    return outcome


EXPERIMENT_DRIVERS = {
    "figure2": run_figure2,
    "factors": run_factors,
    "theorem1": run_theorem1,
    "wilson": run_wilson,
    "run": run_grid,
    "selftest": run_selftest,
}


def run_experiment(experiment: str, cfg: dict, out) -> ExperimentOutcome:
    driver = EXPERIMENT_DRIVERS[experiment]
    return driver(cfg, out)
