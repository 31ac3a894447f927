"""Reproducible experiment drivers behind the statfem-ipla command line.

Each study lives in a cmd_* function that takes an ExperimentConfig, runs
seeded samplers, and writes CSV output plus a metadata JSON (resolved
config, seed, library version, wall clock) into the output directory. Job
seeds are derived with SeedSequence hashing from the base seed and the job
coordinates, so results do not depend on execution order and replicate jobs
can run in a process pool. Timing numbers go to the metadata only; the CSV
files are bit-reproducible given the same config.
"""

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .gp_field import SeKernel, export_eigs_csv, solve_laplacian_eigs
from .mesh_fem import DirichletSpec, FemSystem, build_disc_mesh, build_interval_mesh
from .model_linear import (
    DEFAULT_SIGMA_Y,
    analytic_mmap,
    build_model,
    build_preconditioners,
    convexity_constants,
    generate_data,
)
from .model_nonlinear import (
    NewtonError,
    build_nonlinear_system,
    newton_solve,
    nonlinear_ipla_run,
)
from .samplers import (
    IplaConfig,
    Trace,
    ipla_diffusivity_run,
    ipla_forcing_run,
    make_streams,
    max_stable_stepsize,
)

logger = logging.getLogger(__name__)

PROBLEM_IDS = ("poisson-1d", "poisson-disc", "diffusivity-1d", "nonlinear-1d")


class ConfigError(ValueError):
    """Invalid experiment configuration (file, override, or field value)."""


class NumericalFailure(RuntimeError):
    """An experiment could not produce trustworthy numbers."""


@dataclass
class ExperimentConfig:
    """Settings for one experiment run.

    mesh_size means node count on the interval and ring count on the disc.
    The two kernels are the model-error (misspecification) field and the
    forcing prior. Study-specific knobs (ladders, warm-start lengths,
    approximation methods) have preset defaults per problem and are all
    overridable from the config file or the command line.
    """

    problem: str = "poisson-1d"
    mesh_size: int = 64
    error_sigma2: float = 1.0
    error_lengthscale: float = 0.1
    forcing_sigma2: float = 4.0
    forcing_lengthscale: float = 0.1
    n_y: int = 16
    sigma_y: float = DEFAULT_SIGMA_Y
    ipla: IplaConfig = field(default_factory=IplaConfig)
    n_replicates: int = 10
    output_dir: str = "runs"
    # convergence study
    particle_ladder: tuple = (8, 16, 32, 64, 128, 256)
    plateau_window: int = 1000
    plateau_rtol: float = 1e-4
    max_divergence_frac: float = 0.2
    # posterior variance study
    variance_particles: tuple = (16, 64, 256)
    # stability / conditioning studies
    stability_sizes: tuple = (5, 10, 20, 30, 50)
    stability_lengthscales: tuple = (0.01, 0.1)
    stability_n_iters: int = 2000
    stability_particles: int = 4
    condition_sizes: tuple = (32, 64, 128, 256, 512)
    # diffusivity study
    theta_prior_mean: float = 1.5
    theta_prior_std: float = 0.75
    warm_start_lengths: tuple = (0, 10, 100, 1000, 10000)
    hit_tolerance: float = 0.1
    # nonlinear study
    methods: tuple = ("fot", "ut", "mc")
    fot_particle_ladder: tuple = (1, 4, 16, 64)
    mc_samples: int = 200
    # disc observation layout
    obs_max_radius: float = 0.9
    # job pool
    n_jobs: int = 1

    def __post_init__(self):
        if self.problem not in PROBLEM_IDS:
            raise ConfigError(
                f"unknown problem '{self.problem}'; choose from {PROBLEM_IDS}"
            )
        positive = (
            "mesh_size", "error_sigma2", "error_lengthscale", "forcing_sigma2",
            "forcing_lengthscale", "n_y", "sigma_y", "plateau_window",
            "plateau_rtol", "stability_n_iters", "stability_particles",
            "theta_prior_std", "hit_tolerance", "mc_samples", "obs_max_radius",
            "n_jobs",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be >= 1")
        if not 0.0 < self.max_divergence_frac <= 1.0:
            raise ConfigError("max_divergence_frac must be in (0, 1]")
        for m in self.methods:
            if m not in ("fot", "ut", "mc"):
                raise ConfigError(f"unknown approximation method '{m}'")


# Per-problem defaults: mesh, kernels, and sampler budget.
_PRESETS = {
    "poisson-1d": dict(
        mesh_size=64, error_sigma2=1.0, error_lengthscale=0.1,
        forcing_sigma2=4.0, forcing_lengthscale=0.1, n_replicates=10,
        ipla=dict(n_particles=8, step_size=0.02, n_iters=20_000,
                  record_stride=10),
    ),
    "poisson-disc": dict(
        mesh_size=8, error_sigma2=1.0, error_lengthscale=0.1,
        forcing_sigma2=100.0, forcing_lengthscale=0.2, n_replicates=10,
        # the disc posterior is much stiffer (kappa_P near 500), so the
        # slowest preconditioned mode needs a bigger step to mix within
        # the iteration budget; 0.2 keeps a 5x margin to the stable limit
        ipla=dict(n_particles=8, step_size=0.2, n_iters=20_000,
                  record_stride=10),
    ),
    "diffusivity-1d": dict(
        mesh_size=50, error_sigma2=3.0, error_lengthscale=0.02,
        forcing_sigma2=1.0, forcing_lengthscale=0.1, n_replicates=1,
        ipla=dict(n_particles=8, step_size=0.001, n_iters=10_000,
                  record_stride=10),
    ),
    "nonlinear-1d": dict(
        mesh_size=33, error_sigma2=1.0, error_lengthscale=0.02,
        forcing_sigma2=6.0, forcing_lengthscale=0.1, n_replicates=10,
        ipla=dict(n_particles=4, step_size=0.005, n_iters=10_000,
                  record_stride=50),
    ),
}


def default_config(problem="poisson-1d", **updates):
    """ExperimentConfig with the preset values for one problem id."""
    if problem not in _PRESETS:
        raise ConfigError(
            f"unknown problem '{problem}'; choose from {PROBLEM_IDS}"
        )
    data = dict(_PRESETS[problem], problem=problem)
    ipla = data.pop("ipla")
    data.update(updates)
    if "ipla" in updates:
        ipla = dict(ipla, **updates["ipla"]) if isinstance(updates["ipla"], dict) \
            else updates["ipla"]
        data["ipla"] = ipla
    cfg = ExperimentConfig(**{**data, "ipla": _make_ipla(ipla)})
    return cfg


def _make_ipla(value):
    if isinstance(value, IplaConfig):
        return value
    try:
        return IplaConfig(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad ipla settings: {exc}") from exc


def parse_override(text):
    """Split one ``key=value`` override; values parse as JSON, else string."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=(), default_problem="poisson-1d"):
    """Resolve an ExperimentConfig from a JSON file plus dotted overrides.

    Resolution order: problem presets, then the file, then the overrides
    (e.g. ``ipla.step_size=0.005``). Unknown keys raise ConfigError.
    """
    file_data = {}
    if path is not None:
        try:
            with open(path) as fh:
                file_data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_data, dict):
            raise ConfigError("config file must hold a JSON object")
    for text in overrides:
        key, value = parse_override(text)
        node = file_data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path '{key}' crosses a scalar")
        node[parts[-1]] = value

    problem = file_data.pop("problem", default_problem)
    data = dict(_PRESETS.get(problem, {}), problem=problem)
    ipla = dict(data.pop("ipla", {}))
    known = {f.name for f in fields(ExperimentConfig)}
    for key, value in file_data.items():
        if key == "ipla":
            if not isinstance(value, dict):
                raise ConfigError("'ipla' must be a JSON object")
            bad = set(value) - {f.name for f in fields(IplaConfig)}
            if bad:
                raise ConfigError(f"unknown ipla settings: {sorted(bad)}")
            ipla.update(value)
        elif key in known:
            data[key] = tuple(value) if isinstance(value, list) else value
        else:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        return ExperimentConfig(**{**data, "ipla": _make_ipla(ipla)})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config):
    d = asdict(config)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def derive_seed(*keys):
    """Deterministic 32-bit seed hashed from integer job coordinates."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def spiral_points(n, r_max=0.9):
    """n low-discrepancy points on the disc along a golden-angle spiral."""
    i = np.arange(n) + 0.5
    r = r_max * np.sqrt(i / n)
    ang = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def interval_points(n):
    """n equally spaced interior points of (0, 1)."""
    return (np.arange(1, n + 1) / (n + 1.0))[:, None]


def coefficient_l2_norm(mass, d):
    """L2 norm of the P1 function whose nodal coefficients are d."""
    return float(np.sqrt(d @ (mass @ d)))


def load_l2_norm(mass, d):
    """L2 distance of the functions whose loads differ by d (projection)."""
    c = np.linalg.solve(mass, d)
    return float(np.sqrt(c @ (mass @ c)))


@dataclass
class ProblemBundle:
    """One assembled problem: the statistical model plus its ground truth."""

    kind: str                   # "linear", "diffusivity" or "nonlinear"
    system: object
    model: object = None        # LinearModel (linear / diffusivity kinds)
    nonlinear: object = None    # NonlinearSystem (nonlinear kind)
    b_true: np.ndarray = None   # free-restricted load of the true forcing
    b_true_full: np.ndarray = None


_PROBLEM_CACHE = {}


def _problem_signature(config):
    return (
        config.problem, config.mesh_size, config.error_sigma2,
        config.error_lengthscale, config.forcing_sigma2,
        config.forcing_lengthscale, config.n_y, config.sigma_y,
        config.theta_prior_mean, config.theta_prior_std, config.obs_max_radius,
    )


def build_problem(config):
    """Assemble mesh, kernels, observation operator and model for a config.

    Bundles are cached per process keyed by the geometry/kernel fields, so
    replicate jobs restating the same problem skip reassembly.
    """
    key = _problem_signature(config)
    if key in _PROBLEM_CACHE:
        return _PROBLEM_CACHE[key]
    k_err = SeKernel(config.error_sigma2, config.error_lengthscale)
    k_for = SeKernel(config.forcing_sigma2, config.forcing_lengthscale)
    if config.problem == "poisson-1d":
        mesh = build_interval_mesh(config.mesh_size)
        system = FemSystem(mesh, f=lambda x: 5.0 * np.sin(6.0 * np.pi * x))
        obs = interval_points(config.n_y)
    elif config.problem == "poisson-disc":
        mesh = build_disc_mesh(config.mesh_size)
        system = FemSystem(mesh, f=_two_bump_forcing)
        obs = spiral_points(config.n_y, config.obs_max_radius)
    elif config.problem == "diffusivity-1d":
        mesh = build_interval_mesh(config.mesh_size)
        system = FemSystem(mesh, f=lambda x: 20.0 * np.sin(4.0 * np.pi * x))
        obs = interval_points(config.n_y)
    else:  # nonlinear-1d
        mesh = build_interval_mesh(config.mesh_size)
        spec = DirichletSpec(mesh.boundary_nodes, [0.0, 1.0])
        system = FemSystem(
            mesh, f=lambda x: 10.0 * np.sin(2.0 * np.pi * x), dirichlet=spec
        )
    eigs = solve_laplacian_eigs(system)
    if config.problem == "nonlinear-1d":
        obs = interval_points(config.n_y)
        sys_nl = build_nonlinear_system(
            system, eigs, k_err, k_for, obs,
            q=lambda u: 1.0 + u**2, dq=lambda u: 2.0 * u,
            sigma_y=config.sigma_y,
        )
        b_full = system.b_raw.copy()
        b_full[sys_nl.bc_nodes] = 0.0
        bundle = ProblemBundle(
            "nonlinear", system, nonlinear=sys_nl,
            b_true=b_full[sys_nl.linear.dof.free], b_true_full=b_full,
        )
    else:
        theta_prior = (0.0, 1.0)
        if config.problem == "diffusivity-1d":
            theta_prior = (config.theta_prior_mean, config.theta_prior_std)
        model = build_model(system, eigs, k_err, k_for, obs,
                            sigma_y=config.sigma_y, theta_prior=theta_prior)
        kind = "diffusivity" if config.problem == "diffusivity-1d" else "linear"
        bundle = ProblemBundle(
            kind, system, model=model,
            b_true=system.b[model.dof.free], b_true_full=system.b,
        )
    _PROBLEM_CACHE[key] = bundle
    return bundle


def _two_bump_forcing(x):
    m = np.array([0.4, 0.4])
    w2 = 2.0 * 0.2**2
    return 100.0 * (
        np.exp(-((x + m) ** 2).sum(axis=1) / w2)
        + np.exp(-((x - m) ** 2).sum(axis=1) / w2)
    )


def generate_nonlinear_data(sys_nl, b_true_full, rng):
    """Dataset from the nonlinear generative model: solve with a model-error
    draw added to the true load, then observe under noise."""
    bc = sys_nl.bc_nodes
    e = sys_nl.chol_G @ rng.standard_normal(sys_nl.n_u)
    e[bc] = 0.0
    rhs = b_true_full + e
    rhs[bc] = 0.0
    u_data, _ = newton_solve(sys_nl, rhs)
    r = np.sqrt(np.diag(sys_nl.R)) * rng.standard_normal(sys_nl.H.shape[0])
    return sys_nl.H @ u_data + r, u_data


def draw_dataset(bundle, config, replicate):
    """Fresh synthetic observations for one replicate (new noise draws)."""
    rng = np.random.default_rng([config.ipla.seed, 101, replicate])
    if bundle.kind == "nonlinear":
        y, _ = generate_nonlinear_data(bundle.nonlinear, bundle.b_true_full, rng)
    else:
        y, _ = generate_data(bundle.model, bundle.b_true, rng)
    return y


# ---------------------------------------------------------------------------
# slope fitting


@dataclass
class FitResult:
    """Least-squares fit of log error against log N.

    slope is positive for decaying error; intercept is log C. Per-point
    entries are means of log replicate errors with standard errors from the
    replicate spread.
    """

    slope: float
    intercept: float
    ns: np.ndarray
    mean_log_errors: np.ndarray
    se_log_errors: np.ndarray

    @property
    def mean_errors(self):
        return np.exp(self.mean_log_errors)


def fit_order(ns, errors):
    """Fit error = C * N^(-p) by ordinary least squares in log space.

    Parameters
    ----------
    ns : particle counts, at least 3 of them.
    errors : per-ladder-point arrays of replicate errors (ragged allowed).

    Raises
    ------
    ValueError
        For fewer than 3 ladder points or any non-positive error.
    """
    ns = np.asarray(ns, dtype=float)
    if ns.shape[0] < 3:
        raise ValueError("need at least 3 ladder points to fit a slope")
    if len(errors) != ns.shape[0]:
        raise ValueError("one error array per ladder point required")
    mean_log = np.empty(ns.shape[0])
    se_log = np.empty(ns.shape[0])
    for i, errs in enumerate(errors):
        errs = np.asarray(errs, dtype=float)
        if errs.size == 0:
            raise ValueError(f"no replicate errors at N={ns[i]:g}")
        if np.any(errs <= 0.0):
            raise ValueError("errors must be positive to fit in log space")
        logs = np.log(errs)
        mean_log[i] = logs.mean()
        se_log[i] = logs.std(ddof=1) / np.sqrt(logs.size) if logs.size > 1 else 0.0
    design = np.column_stack([np.ones_like(ns), -np.log(ns)])
    coef, *_ = np.linalg.lstsq(design, mean_log, rcond=None)
    return FitResult(float(coef[1]), float(coef[0]), ns, mean_log, se_log)


# ---------------------------------------------------------------------------
# output plumbing


def write_csv(path, header, rows):
    """CSV with %.12g float formatting (round-trips through float())."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def _format_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return f"{value:.12g}"
    return value


def read_csv(path):
    """Read back a write_csv file: (header, list of row lists, as strings)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


def write_metadata(path, command, config, outputs, extra=None,
                   wall_seconds=None):
    meta = {
        "command": command,
        "config": config_to_dict(config),
        "seed": config.ipla.seed,
        "version": _library_version(),
        "outputs": [str(o) for o in outputs],
    }
    if wall_seconds is not None:
        meta["wall_clock_seconds"] = wall_seconds
    if extra:
        meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def _library_version():
    from statfem_ipla import __version__

    return __version__


def _outdir(config):
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _map_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# convergence order


def run_forcing_with_plateau(model, y, ipla_cfg, window=1000, rtol=1e-4):
    """Forcing sampler with a stop when the averaged b-gradient flattens.

    Runs in windows of `window` iterations on shared noise streams (so the
    trajectory is identical to an uninterrupted run) and stops early once
    the mean recorded gradient norm changes by less than rtol relative
    between consecutive windows, or at ipla_cfg.n_iters, whichever first.

    Returns
    -------
    (trace, plateau_iter) : plateau_iter is None if the budget ran out.
    """
    rngs = make_streams(ipla_cfg.seed, ipla_cfg.n_particles)
    chunks = []
    b, U = None, None
    done, prev, plateau_iter = 0, None, None
    first = True
    while done < ipla_cfg.n_iters:
        k = min(window, ipla_cfg.n_iters - done)
        cfg = replace(ipla_cfg, n_iters=k, stepsize_guard=first)
        first = False
        tr = ipla_forcing_run(model, y, cfg, initial_b=b, initial_particles=U,
                              rngs=rngs)
        chunks.append(tr)
        done += tr.n_iters_run
        if tr.diverged:
            break
        b, U = tr.final_param, tr.final_particles
        mean_grad = float(tr.grad_norms.mean())
        if prev is not None and abs(mean_grad - prev) < rtol * prev:
            plateau_iter = done
            break
        prev = mean_grad
    return _stitch_traces(chunks), plateau_iter


def _stitch_traces(chunks):
    offset = 0
    iters, params, grads, pmean, pvar = [], [], [], [], []
    for tr in chunks:
        iters.append(tr.iters + offset)
        params.append(np.atleast_2d(tr.params))
        grads.append(tr.grad_norms)
        pmean.append(tr.particle_mean)
        pvar.append(tr.particle_var)
        offset += tr.n_iters_run
    last = chunks[-1]
    return Trace(
        np.concatenate(iters),
        np.vstack(params),
        np.concatenate(grads),
        np.vstack(pmean),
        np.vstack(pvar),
        last.final_param,
        last.final_particles,
        offset,
        last.diverged,
        (offset - last.n_iters_run + last.diverged_iter)
        if last.diverged else None,
    )


def _convergence_job(args):
    config, n_particles, replicate = args
    bundle = build_problem(config)
    model = bundle.model
    y = draw_dataset(bundle, config, replicate)
    b_star = analytic_mmap(model, y)
    cfg = replace(config.ipla, n_particles=n_particles,
                  seed=derive_seed(config.ipla.seed, 1, replicate, n_particles))
    trace, plateau_iter = run_forcing_with_plateau(
        model, y, cfg, config.plateau_window, config.plateau_rtol
    )
    d = trace.final_param - b_star
    return {
        "n_particles": n_particles,
        "replicate": replicate,
        "l2_error": float(np.linalg.norm(d)),
        "fn_l2_error": coefficient_l2_norm(model.mass, d),
        "n_iters_run": int(trace.n_iters_run),
        "plateau_iter": -1 if plateau_iter is None else int(plateau_iter),
        "diverged": bool(trace.diverged),
    }


def cmd_convergence_order(config):
    """Error of the forcing estimate against the closed-form optimum as the
    particle count grows, fitted to C * N^(-p).

    Writes convergence.csv (one row per ladder point and replicate, with
    both the coefficient-space and function-space error) and a metadata
    JSON carrying both fitted slopes. Returns the FitResult for the
    coefficient-space error.
    """
    if config.problem not in ("poisson-1d", "poisson-disc"):
        raise ConfigError(
            "convergence study needs poisson-1d or poisson-disc, got "
            f"'{config.problem}'"
        )
    t0 = time.perf_counter()
    ladder = list(config.particle_ladder)
    jobs = [(config, n, r) for n in ladder for r in range(config.n_replicates)]
    results = _map_jobs(_convergence_job, jobs, config.n_jobs)

    errs_l2, errs_fn = [], []
    n_diverged = 0
    for n in ladder:
        rows = [r for r in results if r["n_particles"] == n]
        good = [r for r in rows if not r["diverged"]]
        n_div = len(rows) - len(good)
        n_diverged += n_div
        if n_div:
            logger.warning(
                "excluding %d diverged replicate(s) at N=%d", n_div, n
            )
        if n_div > config.max_divergence_frac * len(rows):
            raise NumericalFailure(
                f"{n_div}/{len(rows)} replicates diverged at N={n}"
            )
        errs_l2.append([r["l2_error"] for r in good])
        errs_fn.append([r["fn_l2_error"] for r in good])
    fit_l2 = fit_order(ladder, errs_l2)
    fit_fn = fit_order(ladder, errs_fn)

    outdir = _outdir(config)
    csv_path = outdir / "convergence.csv"
    write_csv(
        csv_path,
        ["n_particles", "replicate", "l2_error", "fn_l2_error",
         "n_iters_run", "plateau_iter", "diverged"],
        [[r["n_particles"], r["replicate"], r["l2_error"], r["fn_l2_error"],
          r["n_iters_run"], r["plateau_iter"], r["diverged"]]
         for r in results],
    )
    wall = time.perf_counter() - t0
    write_metadata(
        outdir / "convergence_meta.json", "convergence", config, [csv_path],
        extra={
            "slope_l2": fit_l2.slope,
            "slope_fn_l2": fit_fn.slope,
            "intercept_l2": fit_l2.intercept,
            "n_diverged": n_diverged,
        },
        wall_seconds=wall,
    )
    logger.info("convergence slopes: l2 %.3f, function-space %.3f (%.1fs)",
                fit_l2.slope, fit_fn.slope, wall)
    return fit_l2


# ---------------------------------------------------------------------------
# posterior variance


def _variance_job(args):
    config, n_particles = args
    bundle = build_problem(config)
    y = draw_dataset(bundle, config, 0)
    cfg = replace(config.ipla, n_particles=n_particles,
                  seed=derive_seed(config.ipla.seed, 2, n_particles))
    trace = ipla_forcing_run(bundle.model, y, cfg)
    if trace.diverged:
        raise NumericalFailure(f"variance run diverged at N={n_particles}")
    return n_particles, trace.final_particles.var(axis=1, ddof=1)


def cmd_posterior_variance(config):
    """Empirical particle variance against the closed-form posterior
    variance for growing ensembles; emits a per-node comparison CSV."""
    if config.problem not in ("poisson-1d", "poisson-disc"):
        raise ConfigError(
            "posterior-variance study needs a linear problem, got "
            f"'{config.problem}'"
        )
    t0 = time.perf_counter()
    bundle = build_problem(config)
    model = bundle.model
    _, P_u = build_preconditioners(model)
    analytic = np.diag(P_u.mat).copy()

    counts = list(config.variance_particles)
    results = dict(_map_jobs(_variance_job, [(config, n) for n in counts],
                             config.n_jobs))
    mare = {
        n: float(np.mean(np.abs(results[n] - analytic) / analytic))
        for n in counts
    }

    outdir = _outdir(config)
    csv_path = outdir / "posterior_variance.csv"
    coords = bundle.system.mesh.nodes[model.dof.free]
    coord_cols = ["x"] if coords.shape[1] == 1 else ["x", "y"]
    header = ["node"] + coord_cols + ["analytic_var"] + [
        f"empirical_var_N{n}" for n in counts
    ]
    rows = []
    for i in range(model.n_u):
        rows.append([i, *coords[i], analytic[i]] + [results[n][i] for n in counts])
    write_csv(csv_path, header, rows)
    wall = time.perf_counter() - t0
    write_metadata(
        outdir / "posterior_variance_meta.json", "posterior-variance", config,
        [csv_path],
        extra={"mean_abs_relative_error": {str(n): mare[n] for n in counts}},
        wall_seconds=wall,
    )
    logger.info("posterior variance MARE: %s (%.1fs)",
                {n: f"{mare[n]:.3f}" for n in counts}, wall)
    return mare


# ---------------------------------------------------------------------------
# stability and conditioning


def _stability_model(config, n_nodes, lengthscale):
    sub = replace(config, problem="poisson-1d", mesh_size=n_nodes,
                  error_lengthscale=lengthscale)
    return build_problem(sub)


def _stability_job(args):
    config, n_nodes, lengthscale = args
    bundle = _stability_model(config, n_nodes, lengthscale)
    y = draw_dataset(bundle, replace(config, problem="poisson-1d"), 0)
    base = replace(config.ipla, n_particles=config.stability_particles,
                   n_iters=config.stability_n_iters,
                   seed=derive_seed(config.ipla.seed, 3, n_nodes,
                                    int(lengthscale * 10_000)))
    out = {}
    for label, precond in (("unpreconditioned", False), ("preconditioned", True)):
        gamma = max_stable_stepsize(
            bundle.model, y, replace(base, preconditioned=precond)
        )
        out[label] = float(np.log10(gamma))
    return n_nodes, lengthscale, out


def cmd_stability(config):
    """Largest stable step size over a mesh-size and length-scale grid, for
    the plain and the preconditioned sampler; reports log10 values."""
    t0 = time.perf_counter()
    jobs = [
        (config, n, ell)
        for n in config.stability_sizes
        for ell in config.stability_lengthscales
    ]
    results = _map_jobs(_stability_job, jobs, config.n_jobs)
    outdir = _outdir(config)
    csv_path = outdir / "stability.csv"
    rows = [
        [n, ell, out["unpreconditioned"], out["preconditioned"]]
        for n, ell, out in results
    ]
    write_csv(
        csv_path,
        ["n_nodes", "lengthscale", "log10_gamma_max_unpreconditioned",
         "log10_gamma_max_preconditioned"],
        rows,
    )
    wall = time.perf_counter() - t0
    write_metadata(outdir / "stability_meta.json", "stability", config,
                   [csv_path], wall_seconds=wall)
    logger.info("stability grid done (%.1fs)", wall)
    return rows


def cmd_condition_numbers(config):
    """Convexity constants and condition numbers of the joint potential,
    plain and preconditioned, across mesh refinement."""
    t0 = time.perf_counter()
    rows = []
    for n in config.condition_sizes:
        bundle = _stability_model(config, n, config.error_lengthscale)
        mu, L = convexity_constants(bundle.model)
        mu_p, L_p = convexity_constants(bundle.model, preconditioned=True)
        rows.append([n, mu, L, L / mu, mu_p, L_p, L_p / mu_p])
        logger.info("n=%d kappa %.4g kappa_P %.6g", n, L / mu, L_p / mu_p)
    outdir = _outdir(config)
    csv_path = outdir / "condition_numbers.csv"
    write_csv(
        csv_path,
        ["n_nodes", "mu", "L", "kappa", "mu_precond", "L_precond",
         "kappa_precond"],
        rows,
    )
    wall = time.perf_counter() - t0
    write_metadata(outdir / "condition_numbers_meta.json", "condition", config,
                   [csv_path], wall_seconds=wall)
    return rows


# ---------------------------------------------------------------------------
# diffusivity warm starts


def cmd_diffusivity(config):
    """Scalar log-diffusivity chains for several warm-start lengths.

    Writes one full trace CSV per warm-start length plus a summary with the
    final estimate, the peak excursion, and the first total iteration at
    which exp(theta) enters the hit_tolerance band around the truth.
    """
    if config.problem != "diffusivity-1d":
        raise ConfigError(
            f"diffusivity study needs diffusivity-1d, got '{config.problem}'"
        )
    t0 = time.perf_counter()
    bundle = build_problem(config)
    model = bundle.model
    y = draw_dataset(bundle, config, 0)
    outdir = _outdir(config)
    outputs, summary = [], []
    for warm in config.warm_start_lengths:
        cfg = replace(config.ipla, warm_start_len=int(warm))
        trace = ipla_diffusivity_run(model, y, bundle.b_true, cfg)
        path = outdir / f"diffusivity_trace_warm{warm}.csv"
        trace.to_csv(path)
        outputs.append(path)
        kappa = np.exp(trace.params)
        inside = np.abs(kappa - 1.0) <= config.hit_tolerance
        first_hit = int(trace.iters[np.argmax(inside)]) if inside.any() else -1
        summary.append([
            int(warm),
            float(trace.final_param),
            float(np.exp(trace.final_param)),
            float(trace.params.max()),
            first_hit,
            bool(trace.diverged),
        ])
        logger.info("warm=%d: exp(theta_K)=%.4f first hit %s", warm,
                    np.exp(trace.final_param), first_hit)
    csv_path = outdir / "diffusivity_summary.csv"
    write_csv(
        csv_path,
        ["warm_start_len", "theta_final", "exp_theta_final", "theta_max",
         "first_hit_iter", "diverged"],
        summary,
    )
    outputs.append(csv_path)
    wall = time.perf_counter() - t0
    write_metadata(outdir / "diffusivity_meta.json", "diffusivity", config,
                   outputs, wall_seconds=wall)
    return summary


# ---------------------------------------------------------------------------
# nonlinear approximation comparison


def _nonlinear_error(sys_nl, b_free, b_true_full):
    free = sys_nl.linear.dof.free
    return load_l2_norm(sys_nl.linear.mass, b_free - b_true_full[free])


def _nonlinear_compare_job(args):
    config, method, replicate = args
    bundle = build_problem(config)
    sys_nl = bundle.nonlinear
    y = draw_dataset(bundle, config, replicate)
    cfg = replace(config.ipla,
                  seed=derive_seed(config.ipla.seed, 5, replicate))
    t0 = time.perf_counter()
    trace, meta = nonlinear_ipla_run(sys_nl, y, method, cfg,
                                     mc_samples=config.mc_samples)
    wall = time.perf_counter() - t0
    if meta["status"] != "completed":
        raise NumericalFailure(
            f"nonlinear run ({method}, replicate {replicate}) ended with "
            f"status {meta['status']}"
        )
    return {
        "method": method,
        "replicate": replicate,
        "error": _nonlinear_error(sys_nl, trace.final_param, bundle.b_true_full),
        "wall": wall,
        "refresh": meta["mean_refresh_seconds"],
        "n_refreshes": meta["n_refreshes"],
        "newton_iters": meta["newton_iters"],
    }


def _nonlinear_sweep_job(args):
    config, n_particles, replicate = args
    bundle = build_problem(config)
    sys_nl = bundle.nonlinear
    y = draw_dataset(bundle, config, replicate)
    cfg = replace(config.ipla, n_particles=n_particles,
                  seed=derive_seed(config.ipla.seed, 6, replicate, n_particles))
    trace, meta = nonlinear_ipla_run(sys_nl, y, "fot", cfg,
                                     mc_samples=config.mc_samples)
    if meta["status"] != "completed":
        raise NumericalFailure(
            f"FOT sweep run (N={n_particles}, replicate {replicate}) ended "
            f"with status {meta['status']}"
        )
    return {
        "n_particles": n_particles,
        "replicate": replicate,
        "error": _nonlinear_error(sys_nl, trace.final_param, bundle.b_true_full),
    }


def cmd_nonlinear(config):
    """Forcing error of the three Gaussian approximations under a shared
    budget, then a particle sweep for the linearization method.

    The error is the L2 distance between the estimated and the true forcing
    function (projection coefficients through the mass matrix). Timings go
    to the metadata JSON; the CSVs stay reproducible.
    """
    if config.problem != "nonlinear-1d":
        raise ConfigError(
            f"nonlinear study needs nonlinear-1d, got '{config.problem}'"
        )
    t0 = time.perf_counter()
    compare_jobs = [
        (config, m, r)
        for r in range(config.n_replicates)
        for m in config.methods
    ]
    compare = _map_jobs(_nonlinear_compare_job, compare_jobs, config.n_jobs)
    sweep_jobs = [
        (config, n, r)
        for n in config.fot_particle_ladder
        for r in range(config.n_replicates)
    ]
    sweep = _map_jobs(_nonlinear_sweep_job, sweep_jobs, config.n_jobs)

    outdir = _outdir(config)
    cmp_path = outdir / "nonlinear_compare.csv"
    write_csv(
        cmp_path,
        ["method", "replicate", "l2_forcing_error", "n_refreshes",
         "newton_iters"],
        [[r["method"], r["replicate"], r["error"], r["n_refreshes"],
          r["newton_iters"]] for r in compare],
    )
    sweep_path = outdir / "nonlinear_fot_sweep.csv"
    write_csv(
        sweep_path,
        ["n_particles", "replicate", "l2_forcing_error"],
        [[r["n_particles"], r["replicate"], r["error"]] for r in sweep],
    )

    mean_error = {
        m: float(np.mean([r["error"] for r in compare if r["method"] == m]))
        for m in config.methods
    }
    mean_wall = {
        m: float(np.mean([r["wall"] for r in compare if r["method"] == m]))
        for m in config.methods
    }
    mean_refresh = {
        m: float(np.mean([r["refresh"] for r in compare if r["method"] == m]))
        for m in config.methods
    }
    sweep_mean = {
        str(n): float(np.mean([r["error"] for r in sweep
                               if r["n_particles"] == n]))
        for n in config.fot_particle_ladder
    }
    wall = time.perf_counter() - t0
    write_metadata(
        outdir / "nonlinear_meta.json", "nonlinear", config,
        [cmp_path, sweep_path],
        extra={
            "mean_l2_error": mean_error,
            "mean_wall_seconds": mean_wall,
            "mean_refresh_seconds": mean_refresh,
            "fot_sweep_mean_error": sweep_mean,
        },
        wall_seconds=wall,
    )
    logger.info("nonlinear errors %s walls %s (%.1fs)", mean_error, mean_wall,
                wall)
    return {
        "mean_error": mean_error,
        "mean_wall": mean_wall,
        "mean_refresh": mean_refresh,
        "sweep_mean_error": sweep_mean,
        "compare": compare,
        "sweep": sweep,
    }


# ---------------------------------------------------------------------------
# small utilities behind `solve` and `eigs`


def cmd_solve(config):
    """Single forward solve of the configured problem; writes the solution
    (node coordinates and coefficients) as CSV."""
    t0 = time.perf_counter()
    bundle = build_problem(config)
    if bundle.kind == "nonlinear":
        rhs = bundle.b_true_full.copy()
        rhs[bundle.nonlinear.bc_nodes] = 0.0
        u, info = newton_solve(bundle.nonlinear, rhs)
        extra = {"newton_iters": info["n_iters"],
                 "residual_norm": info["residual_norm"]}
    else:
        u = bundle.system.solve()
        extra = {}
    outdir = _outdir(config)
    csv_path = outdir / "solution.csv"
    coords = bundle.system.mesh.nodes
    coord_cols = ["x"] if coords.shape[1] == 1 else ["x", "y"]
    write_csv(
        csv_path,
        ["node"] + coord_cols + ["u"],
        [[i, *coords[i], u[i]] for i in range(coords.shape[0])],
    )
    wall = time.perf_counter() - t0
    write_metadata(outdir / "solution_meta.json", "solve", config, [csv_path],
                   extra=extra, wall_seconds=wall)
    return u


def cmd_eigs(config):
    """Export the Laplacian eigenpairs used by the covariance assembly."""
    t0 = time.perf_counter()
    bundle = build_problem(config)
    eigs = solve_laplacian_eigs(bundle.system)
    outdir = _outdir(config)
    csv_path = outdir / "eigs.csv"
    export_eigs_csv(eigs, csv_path)
    wall = time.perf_counter() - t0
    write_metadata(outdir / "eigs_meta.json", "eigs", config, [csv_path],
                   extra={"n_modes": int(eigs.values.shape[0])},
                   wall_seconds=wall)
    return eigs
