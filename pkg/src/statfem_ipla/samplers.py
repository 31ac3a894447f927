"""Unadjusted Langevin and interacting particle Langevin samplers.

The forcing sampler evolves N state particles u^(1..N) together with one
load-vector chain b; the diffusivity sampler evolves the particles together
with a scalar log-diffusivity chain. Parameter chains take the averaged
gradient over particles with noise scaled by 1/sqrt(N), so the parameter
marginal concentrates on the marginal-posterior maximizer as N grows.

Noise is drawn from one seed-derived stream per particle plus one stream for
the parameter chain, in a fixed order (parameter first), so serial and
parallel execution consume identical variates.
"""

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .model_linear import build_preconditioners, convexity_constants

logger = logging.getLogger(__name__)


class StepSizeWarning(UserWarning):
    """Raised when the step size exceeds the contraction bound 2/(mu+L)."""


@dataclass
class IplaConfig:
    """Settings shared by the particle samplers.

    Attributes
    ----------
    n_particles : number of state particles N.
    step_size : Langevin step gamma.
    n_iters : iterations K (joint phase; warm start is extra).
    preconditioned : use the block-preconditioned updates.
    seed : base seed; particle streams are spawned from it.
    record_stride : thinning stride for vector-parameter snapshots.
    divergence_threshold : max-norm ceiling before a run is declared diverged.
    warm_start_len : particle-only iterations before the parameter moves
        (used by the diffusivity sampler).
    refresh_stride : iterations between preconditioner refreshes in samplers
        whose preconditioner depends on the moving parameter; None picks the
        runner's default (1 here, method-dependent for the nonlinear runner).
    stepsize_guard : warn when gamma exceeds 2/(mu+L) for the model at hand.
    """

    n_particles: int = 8
    step_size: float = 1e-2
    n_iters: int = 10_000
    preconditioned: bool = True
    seed: int = 0
    record_stride: int = 10
    divergence_threshold: float = 1e8
    warm_start_len: int = 0
    refresh_stride: int | None = None
    stepsize_guard: bool = True

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence_threshold must be positive")
        if self.warm_start_len < 0:
            raise ValueError("warm_start_len must be >= 0")
        if self.refresh_stride is not None and self.refresh_stride < 1:
            raise ValueError("refresh_stride must be >= 1 (or None for default)")


class ParticleSystem:
    """State of one interacting particle run: parameter plus particle block."""

    def __init__(self, param, particles):
        self.param = param
        self.particles = np.asarray(particles, dtype=float)

    @property
    def n_particles(self):
        return self.particles.shape[1]


def detect_divergence(system, threshold=1e8):
    """True if any entry of the particles or parameter is non-finite or
    exceeds the threshold in absolute value."""
    for arr in (np.atleast_1d(np.asarray(system.param)), system.particles):
        if not np.all(np.isfinite(arr)) or np.abs(arr).max() > threshold:
            return True
    return False


class Trace:
    """Recorded history of one sampler run.

    params holds parameter snapshots (one row per record), particle_mean and
    particle_var the particle ensemble mean and per-node sample variance,
    grad_norms the norm of the particle-averaged parameter gradient. A run
    that trips the divergence detector stops early with diverged=True.
    """

    def __init__(self, iters, params, grad_norms, particle_mean, particle_var,
                 final_param, final_particles, n_iters_run, diverged=False,
                 diverged_iter=None):
        self.iters = iters
        self.params = params
        self.grad_norms = grad_norms
        self.particle_mean = particle_mean
        self.particle_var = particle_var
        self.final_param = final_param
        self.final_particles = final_particles
        self.n_iters_run = n_iters_run
        self.diverged = diverged
        self.diverged_iter = diverged_iter

    def to_csv(self, path):
        """Write the trace in the iter/param/grad/particle-summary layout.

        One row per record; a diverged run gains a trailing comment line
        ``# diverged at iter=<k>``.
        """
        params = np.atleast_2d(self.params.T).T if self.params.ndim == 1 else self.params
        d = params.shape[1] if params.size else 1
        header = (
            "iter,"
            + ",".join(f"param_{j}" for j in range(d))
            + ",grad_norm,particle_mean_norm,particle_var_mean"
        )
        pm_norm = np.linalg.norm(self.particle_mean, axis=1)
        pv_mean = self.particle_var.mean(axis=1)
        rows = np.column_stack([self.iters, params, self.grad_norms, pm_norm, pv_mean])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(f"{int(row[0])}," + ",".join(f"{v:.12g}" for v in row[1:]) + "\n")
            if self.diverged:
                fh.write(f"# diverged at iter={self.diverged_iter}\n")


class _Recorder:
    """Preallocated ring of trace records for one run."""

    def __init__(self, n_iters, stride, param_dim, n_u):
        self.stride = stride
        n_rec = math.ceil(n_iters / stride)
        self.iters = np.zeros(n_rec, dtype=int)
        self.params = np.zeros((n_rec, param_dim))
        self.grad_norms = np.zeros(n_rec)
        self.particle_mean = np.zeros((n_rec, n_u))
        self.particle_var = np.zeros((n_rec, n_u))
        self.count = 0

    def add(self, it, param, grad_norm, particles):
        k = self.count
        if k >= self.iters.shape[0]:
            return
        self.iters[k] = it
        self.params[k] = param
        self.grad_norms[k] = grad_norm
        self.particle_mean[k] = particles.mean(axis=1)
        self.particle_var[k] = particles.var(axis=1, ddof=1) if particles.shape[1] > 1 else 0.0
        self.count += 1

    def finish(self, final_param, final_particles, n_iters_run, diverged, diverged_iter):
        c = self.count
        params = self.params[:c, 0] if self.params.shape[1] == 1 else self.params[:c]
        return Trace(
            self.iters[:c], params, self.grad_norms[:c],
            self.particle_mean[:c], self.particle_var[:c],
            final_param, final_particles, n_iters_run, diverged, diverged_iter,
        )


def make_streams(seed, n_particles):
    """One generator for the parameter chain plus one per particle."""
    children = np.random.SeedSequence(seed).spawn(n_particles + 1)
    return (
        np.random.default_rng(children[0]),
        [np.random.default_rng(c) for c in children[1:]],
    )


def _draw_block(rngs, out):
    """Fill out[:, i] from stream i; fixed order, one draw per particle."""
    for i, rng in enumerate(rngs):
        out[:, i] = rng.standard_normal(out.shape[0])
    return out


def ula_run(score, x0, step_size, n_iters, rng, precond=None,
            record_stride=10, divergence_threshold=1e8):
    """Unadjusted Langevin: x <- x - gamma P score(x) + sqrt(2 gamma) P^1/2 z.

    Parameters
    ----------
    score : callable
        Gradient of the potential at x.
    precond : Preconditioner or None
        Fixed preconditioner; identity when None.

    Returns
    -------
    Trace with the chain snapshots in params.
    """
    x = np.array(x0, dtype=float)
    d = x.shape[0]
    rec = _Recorder(n_iters, record_stride, d, d)
    root2g = np.sqrt(2.0 * step_size)
    diverged, div_iter = False, None
    it = 0
    for it in range(1, n_iters + 1):
        g = score(x)
        z = rng.standard_normal(d)
        if precond is None:
            x = x - step_size * g + root2g * z
        else:
            x = x - step_size * (precond.mat @ g) + root2g * (precond.factor @ z)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > divergence_threshold:
            diverged, div_iter = True, it
            break
        if it % record_stride == 0 or it == n_iters:
            rec.add(it, x, np.linalg.norm(g), x[:, None])
    return rec.finish(x, x[:, None], it, diverged, div_iter)


class _LinearForcingProvider:
    """Per-iteration quantities of the linear forcing model.

    The same object serves the constant-diffusivity reduction of the
    nonlinear sampler, so both runners execute identical float operations
    on identical inputs.
    """

    def __init__(self, model, y, lift=None):
        self.model = model
        self.A = model.A_theta
        self.Hty = model.Rinv_H.T @ model.effective_data(y)
        self.simu = model.solve_Sigma(model.mu)
        self.P_b, self.P_u = build_preconditioners(model)
        self.lift = None if lift is None or not np.any(lift) else np.asarray(lift)

    def solve_G(self, x):
        return self.model.solve_G(x)

    def solve_Sigma(self, x):
        return self.model.solve_Sigma(x)

    def refresh(self, it, b):
        return None

    def residual_mean(self, particles):
        r = self.A @ particles.mean(axis=1)
        if self.lift is not None:
            r = r + self.lift
        return r

    def u_step_drift(self, b):
        rhs = b if self.lift is None else b - self.lift
        return self.P_u.mat @ (self.A.T @ self.model.solve_G(rhs) + self.Hty)

    def u_noise(self, z):
        return self.P_u.factor @ z


def _run_preconditioned_core(provider, config, b0, particles0, rngs=None,
                             on_record=None):
    """Shared preconditioned particle loop for the forcing-type samplers.

    Both the b-update and the particle update read the pre-update state, so
    the two moves commute within one iteration. Divergence is checked every
    iteration; a tripped check stops the run and marks the trace.
    """
    model_mu = provider.model.mu
    n_u = b0.shape[0]
    N = config.n_particles
    gamma = config.step_size
    b = np.array(b0, dtype=float)
    U = np.array(particles0, dtype=float)
    if rngs is None:
        rng_param, rng_particles = make_streams(config.seed, N)
    else:
        rng_param, rng_particles = rngs
    rec = _Recorder(config.n_iters, config.record_stride, n_u, n_u)
    noise_b = np.sqrt(2.0 * gamma / N)
    noise_u = np.sqrt(2.0 * gamma)
    Z = np.empty((n_u, N))
    diverged, div_iter = False, None
    ps = ParticleSystem(b, U)
    it = 0
    for it in range(1, config.n_iters + 1):
        if provider.refresh(it, b):
            # the provider could not rebuild its approximation; stop here
            diverged, div_iter = True, it
            break
        rbar = provider.residual_mean(U)
        drift_u = provider.u_step_drift(b)
        zeta0 = rng_param.standard_normal(n_u)
        _draw_block(rng_particles, Z)
        b_new = (
            (1.0 - gamma) * b
            + gamma * (provider.P_b.mat @ (provider.solve_G(rbar) + provider.simu))
            + noise_b * (provider.P_b.factor @ zeta0)
        )
        U = (1.0 - gamma) * U + gamma * drift_u[:, None] + noise_u * provider.u_noise(Z)
        b_prev = b
        b = b_new
        ps.param, ps.particles = b, U
        if detect_divergence(ps, config.divergence_threshold):
            diverged, div_iter = True, it
            break
        if it % config.record_stride == 0 or it == config.n_iters:
            gb = -provider.solve_G(rbar - b_prev) + provider.solve_Sigma(b_prev - model_mu)
            rec.add(it, b, np.linalg.norm(gb), U)
            if on_record is not None:
                on_record(it, b, U)
    return rec.finish(b, U, it, diverged, div_iter)


def _run_unpreconditioned_forcing(model, y, config, b0, particles0, rngs=None):
    """Plain-gradient variant of the forcing sampler (identity mobility)."""
    n_u, N = model.n_u, config.n_particles
    gamma = config.step_size
    y = model.effective_data(y)
    b = np.array(b0, dtype=float)
    U = np.array(particles0, dtype=float)
    if rngs is None:
        rng_param, rng_particles = make_streams(config.seed, N)
    else:
        rng_param, rng_particles = rngs
    rec = _Recorder(config.n_iters, config.record_stride, n_u, n_u)
    noise_b = np.sqrt(2.0 * gamma / N)
    noise_u = np.sqrt(2.0 * gamma)
    A = model.A_theta
    Z = np.empty((n_u, N))
    diverged, div_iter = False, None
    ps = ParticleSystem(b, U)
    it = 0
    for it in range(1, config.n_iters + 1):
        resid = A @ U - b[:, None]
        Gi_resid = model.solve_G(resid)
        grad_U = A.T @ Gi_resid + model.Rinv_H.T @ (model.H @ U - y[:, None])
        grad_b = -Gi_resid.mean(axis=1) + model.solve_Sigma(b - model.mu)
        zeta0 = rng_param.standard_normal(n_u)
        _draw_block(rng_particles, Z)
        b = b - gamma * grad_b + noise_b * zeta0
        U = U - gamma * grad_U + noise_u * Z
        ps.param, ps.particles = b, U
        if detect_divergence(ps, config.divergence_threshold):
            diverged, div_iter = True, it
            break
        if it % config.record_stride == 0 or it == config.n_iters:
            rec.add(it, b, np.linalg.norm(grad_b), U)
    return rec.finish(b, U, it, diverged, div_iter)


def _check_stepsize(model, config):
    mu, L = convexity_constants(model, preconditioned=config.preconditioned)
    bound = 2.0 / (mu + L)
    if config.step_size > bound:
        warnings.warn(
            f"step size {config.step_size:.3g} exceeds 2/(mu+L) = {bound:.3g}; "
            "the parameter chain may not contract",
            StepSizeWarning,
            stacklevel=3,
        )


def ipla_forcing_run(model, y, config, initial_b=None, initial_particles=None,
                     rngs=None):
    """Joint sampling of states and the load vector for a linear model.

    Particles start at zero and the b-chain at the prior mean unless
    initial values are passed. With config.preconditioned the updates use
    the block preconditioners (P_b, P_u) in both drift and noise.

    Returns
    -------
    Trace with b snapshots in params.
    """
    y = np.asarray(y, dtype=float)
    if config.stepsize_guard:
        _check_stepsize(model, config)
    b0 = model.mu.copy() if initial_b is None else np.asarray(initial_b, dtype=float)
    if initial_particles is None:
        U0 = np.zeros((model.n_u, config.n_particles))
    else:
        U0 = np.asarray(initial_particles, dtype=float)
        if U0.shape != (model.n_u, config.n_particles):
            raise ValueError("initial particle block has wrong shape")
    if config.preconditioned:
        provider = _LinearForcingProvider(model, y)
        return _run_preconditioned_core(provider, config, b0, U0, rngs=rngs)
    return _run_unpreconditioned_forcing(model, y, config, b0, U0, rngs=rngs)


def ipla_diffusivity_run(model, y, b, config):
    """Joint sampling of states and the scalar log-diffusivity.

    The load vector b is known and fixed. Starts at the prior mean of
    theta; during the warm-start phase only the particles move (at fixed
    theta), letting them equilibrate before the parameter chain runs. The
    particle update is preconditioned with P_u evaluated at the current
    theta, refreshed every config.refresh_stride iterations; the theta
    update is the plain averaged gradient with 1/sqrt(N)-scaled noise.

    Returns
    -------
    Trace with the theta series in params, recorded every iteration.
    """
    y = model.effective_data(y)
    b = np.asarray(b, dtype=float)
    n_u, N = model.n_u, config.n_particles
    gamma = config.step_size
    theta = model.theta_prior_mean
    prior_mean, prior_var = model.theta_prior_mean, model.theta_prior_std**2
    U = np.zeros((n_u, N))
    rng_param, rng_particles = make_streams(config.seed, N)

    # theta-independent pieces of the preconditioned state update
    W1 = model.A.T @ model.solve_G(model.A)
    W1 = 0.5 * (W1 + W1.T)
    Hty = model.Rinv_H.T @ y
    v1 = model.A.T @ model.solve_G(b)

    chol_B = None
    drift_u = None

    def refresh(th):
        nonlocal chol_B, drift_u
        B = np.exp(2.0 * th) * W1 + model.HtRinvH
        chol_B = linalg.cholesky(B, lower=True)
        drift_u = linalg.cho_solve((chol_B, True), np.exp(th) * v1 + Hty)

    stride = config.refresh_stride if config.refresh_stride is not None else 1
    total = config.warm_start_len + config.n_iters
    rec = _Recorder(total, 1, 1, n_u)
    noise_u = np.sqrt(2.0 * gamma)
    noise_t = np.sqrt(2.0 * gamma / N)
    Z = np.empty((n_u, N))
    diverged, div_iter = False, None
    ps = ParticleSystem(theta, U)
    refresh(theta)
    it = 0
    for it in range(1, total + 1):
        joint = it > config.warm_start_len
        if joint and (it - config.warm_start_len - 1) % stride == 0:
            refresh(theta)
        W = np.exp(theta) * (model.A @ U)
        if joint:
            GiW = model.solve_G(W)
            quad = float(np.sum((W - b[:, None]) * GiW))
            grad_theta = model.n_u + (theta - prior_mean) / prior_var + quad / N
            zeta0 = float(rng_param.standard_normal())
            theta_new = (
                theta
                - gamma * (model.n_u + (theta - prior_mean) / prior_var)
                - (gamma / N) * quad
                + noise_t * zeta0
            )
        else:
            grad_theta = 0.0
            theta_new = theta
        _draw_block(rng_particles, Z)
        U = (
            (1.0 - gamma) * U
            + gamma * drift_u[:, None]
            + noise_u * linalg.solve_triangular(chol_B, Z, lower=True, trans="T")
        )
        theta = theta_new
        ps.param, ps.particles = theta, U
        if detect_divergence(ps, config.divergence_threshold):
            diverged, div_iter = True, it
            break
        rec.add(it, theta, abs(grad_theta), U)
    return rec.finish(theta, U, it, diverged, div_iter)


def max_stable_stepsize(model, y, config, gamma_lo=1e-14, gamma_hi=1.0,
                        n_seeds=3, resolution_decades=0.05, max_expand=8):
    """Largest step size that keeps the forcing sampler finite.

    Bisects on log10(gamma) until the stable/unstable bracket is tighter
    than resolution_decades. A step is stable when runs with n_seeds
    different seeds all finish config.n_iters iterations without tripping
    the divergence detector. The bracket is auto-expanded (up to max_expand
    decades each way) if the endpoints do not straddle the boundary.

    Returns
    -------
    gamma : the stable lower end of the final bracket.
    """
    cfg = replace(config, stepsize_guard=False)

    def stable(gamma):
        for s in range(n_seeds):
            c = replace(cfg, step_size=gamma, seed=cfg.seed + s)
            if ipla_forcing_run(model, y, c).diverged:
                return False
        return True

    lo, hi = float(gamma_lo), float(gamma_hi)
    if lo >= hi:
        raise ValueError("need gamma_lo < gamma_hi")
    for _ in range(max_expand):
        if stable(lo):
            break
        lo /= 10.0
    else:
        raise RuntimeError("no stable step size found above the search floor")
    for _ in range(max_expand):
        if not stable(hi):
            break
        hi *= 10.0
    else:
        logger.warning("upper bracket %.3g still stable; returning it", hi)
        return hi
    while np.log10(hi / lo) > resolution_decades:
        mid = 10.0 ** (0.5 * (np.log10(lo) + np.log10(hi)))
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return lo
