"""Joint state/forcing model for the linear Poisson problem.

The discrete model is A_theta u = b + e with A_theta = exp(theta) A,
e ~ N(0, G), observations y = H u + r with r ~ N(0, R), a Gaussian prior
N(mu, Sigma) on the load vector b and a scalar normal prior on theta. The
negative log joint density defines the potential whose gradients drive the
Langevin samplers; this module holds the potential machinery plus the
closed-form estimates (marginal maximizer, conditional posterior) used as
targets in the experiments.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .gp_field import GaussianDist

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_Y = 1e-2


@dataclass(frozen=True)
class DofMap:
    """Bookkeeping between full nodal vectors and the free-node subspace.

    The sampled model lives on the free (non-Dirichlet) degrees of freedom;
    boundary coefficients are pinned at the prescribed values. Because the
    Dirichlet treatment zeroes the boundary cross blocks, the restriction is
    exact, not an approximation.
    """

    n_total: int
    free: np.ndarray
    bc_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    bc_values: np.ndarray = field(default_factory=lambda: np.empty(0))

    @classmethod
    def from_system(cls, system):
        n = system.n_nodes
        bc = np.asarray(system.dirichlet.nodes, dtype=int)
        free = np.setdiff1d(np.arange(n), bc)
        return cls(n, free, bc, np.asarray(system.dirichlet.values, dtype=float))

    @classmethod
    def identity(cls, n):
        return cls(n, np.arange(n))

    @property
    def n_free(self):
        return self.free.shape[0]

    def embed(self, x, bc_fill=None):
        """Full nodal vector (or column block) from free-node coefficients.

        bc_fill=None inserts the Dirichlet values (state vectors); pass 0.0
        for load-like vectors whose boundary entries are zero.
        """
        x = np.asarray(x, dtype=float)
        shape = (self.n_total,) if x.ndim == 1 else (self.n_total, x.shape[1])
        out = np.zeros(shape)
        out[self.free] = x
        if self.bc_nodes.size:
            vals = self.bc_values if bc_fill is None else bc_fill
            out[self.bc_nodes] = vals if x.ndim == 1 else np.atleast_1d(vals)[:, None]
        return out

    def restrict(self, x):
        return np.asarray(x, dtype=float)[self.free]


class Preconditioner:
    """SPD matrix with an explicit inverse and a factor for noise injection.

    Attributes
    ----------
    mat : array
        P = B^-1 for the SPD block B handed to the constructor.
    factor : array
        F with F F^T = P (inverse transpose of the Cholesky factor of B).
    """

    def __init__(self, block):
        n = block.shape[0]
        L = linalg.cholesky(block, lower=True)
        self.factor = linalg.solve_triangular(L, np.eye(n), lower=True, trans="T")
        mat = linalg.cho_solve((L, True), np.eye(n))
        self.mat = 0.5 * (mat + mat.T)

    def apply(self, x):
        return self.mat @ x


class LinearModel:
    """Container for one linear statFEM problem instance.

    Parameters
    ----------
    A : array, shape (n_u, n_u)
        Stiffness matrix after Dirichlet treatment, at theta = 0.
    G : array
        Model-error covariance (SPD, boundary-pinned).
    H : array, shape (n_y, n_u)
        Observation operator.
    R : array or float
        Observation noise covariance; a scalar means sigma_y^2 * I.
    forcing_prior : GaussianDist
        Prior over load vectors (mean mu, covariance Sigma).
    theta : float
        Log-diffusivity; the effective operator is exp(theta) * A.
    theta_prior : (float, float)
        Mean and standard deviation of the normal prior on theta.
    system : FemSystem or None
        Originating FEM system, kept for mesh-aware consumers.
    dof : DofMap or None
        Mapping to the full nodal space when the model was restricted to
        free nodes; identity when omitted.
    obs_shift : array or None
        Contribution of the fixed boundary coefficients to the observations
        (H_bc u_D); subtracted from data before any misfit.
    mass : array or None
        Free-restricted mass matrix for L2 norms of coefficient vectors.
    """

    def __init__(self, A, G, H, R, forcing_prior, theta=0.0,
                 theta_prior=(0.0, 1.0), system=None, dof=None,
                 obs_shift=None, mass=None):
        self.A = np.asarray(A, dtype=float)
        self.G = np.asarray(G, dtype=float)
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        n_u = self.A.shape[0]
        if np.isscalar(R):
            R = float(R) * np.eye(self.H.shape[0])
        self.R = np.asarray(R, dtype=float)
        self.forcing_prior = forcing_prior
        self.theta = float(theta)
        self.theta_prior_mean = float(theta_prior[0])
        self.theta_prior_std = float(theta_prior[1])
        self.system = system
        self.dof = DofMap.identity(n_u) if dof is None else dof
        self.obs_shift = None if obs_shift is None else np.asarray(obs_shift, float)
        self.mass = mass

        if self.G.shape != (n_u, n_u) or self.H.shape[1] != n_u:
            raise ValueError("inconsistent model dimensions")
        if forcing_prior.dim != n_u:
            raise ValueError("forcing prior dimension mismatch")
        if self.theta_prior_std <= 0:
            raise ValueError("theta prior std must be positive")

        self.A_theta = np.exp(self.theta) * self.A
        self.chol_G = linalg.cholesky(self.G, lower=True)
        self.chol_R = linalg.cholesky(self.R, lower=True)
        self.chol_Sigma = forcing_prior.chol
        # H^T R^-1 and H^T R^-1 H appear in every gradient; cache them
        self.Rinv_H = linalg.cho_solve((self.chol_R, True), self.H)
        self.HtRinvH = 0.5 * (self.H.T @ self.Rinv_H + (self.H.T @ self.Rinv_H).T)

    @property
    def n_u(self):
        return self.A.shape[0]

    @property
    def n_total(self):
        return self.dof.n_total

    @property
    def n_y(self):
        return self.H.shape[0]

    @property
    def mu(self):
        return self.forcing_prior.mean

    def solve_G(self, x):
        return linalg.cho_solve((self.chol_G, True), x)

    def solve_Sigma(self, x):
        return linalg.cho_solve((self.chol_Sigma, True), x)

    def solve_R(self, x):
        return linalg.cho_solve((self.chol_R, True), x)

    def effective_data(self, y):
        """Observations with the fixed-boundary contribution removed."""
        y = np.asarray(y, dtype=float)
        return y if self.obs_shift is None else y - self.obs_shift

    def embed_state(self, u):
        return self.dof.embed(u)

    def embed_forcing(self, b):
        return self.dof.embed(b, bc_fill=0.0)

    def with_theta(self, theta):
        """Copy of the model at a different log-diffusivity."""
        return LinearModel(
            self.A, self.G, self.H, self.R, self.forcing_prior,
            theta=theta,
            theta_prior=(self.theta_prior_mean, self.theta_prior_std),
            system=self.system, dof=self.dof, obs_shift=self.obs_shift,
            mass=self.mass,
        )


def build_model(system, eigs, error_kernel, forcing_kernel, obs_points,
                sigma_y=DEFAULT_SIGMA_Y, theta=0.0, theta_prior=(0.0, 1.0),
                forcing_mean=None, error_jitter=None, forcing_jitter=None):
    """Assemble a LinearModel from a FEM system and two kernels.

    Covariances and the observation operator are assembled on the full node
    set, then everything is restricted to the free degrees of freedom. On
    that subspace the treated stiffness block is the plain interior
    stiffness (SPD) and the covariances drop their boundary pinning, which
    is the form all the sampler analysis assumes. Boundary coefficients
    re-enter only through embed_state / the observation shift.
    """
    from .gp_field import assemble_error_covariance, assemble_forcing_prior
    from .mesh_fem import build_observation_operator

    G = assemble_error_covariance(system, eigs, error_kernel, jitter=error_jitter)
    prior = assemble_forcing_prior(
        system, eigs, forcing_kernel, jitter=forcing_jitter, mean=forcing_mean
    )
    H = build_observation_operator(system.mesh, obs_points)
    return restrict_to_free(system, G, H, sigma_y**2, prior,
                            theta=theta, theta_prior=theta_prior)


def restrict_to_free(system, G, H, R, prior, theta=0.0, theta_prior=(0.0, 1.0)):
    """Free-node LinearModel from full-node covariances and operators."""
    dof = DofMap.from_system(system)
    f = dof.free
    ix = np.ix_(f, f)
    shift = None
    if dof.bc_nodes.size and np.any(dof.bc_values):
        shift = H[:, dof.bc_nodes] @ dof.bc_values
    prior_f = GaussianDist(prior.mean[f], prior.cov[ix])
    return LinearModel(
        system.A[ix], G[ix], H[:, f], R, prior_f,
        theta=theta, theta_prior=theta_prior, system=system,
        dof=dof, obs_shift=shift, mass=system.M[ix],
    )


def statfem_prior(model, b):
    """Gaussian prior over states: N(A_theta^-1 b, A_theta^-1 G A_theta^-T)."""
    cA = linalg.cho_factor(model.A_theta, lower=True)
    mean = linalg.cho_solve(cA, b)
    X = linalg.cho_solve(cA, model.G)
    cov = linalg.cho_solve(cA, X.T).T
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def potential(model, u, b, y):
    """Negative log joint density of (u, b, theta), up to a constant.

    Sum of the model-error, observation and forcing-prior quadratic forms,
    plus n_u * theta from the state-prior normalization and the quadratic
    theta prior. The gradient functions below differentiate exactly this.
    """
    r_model = model.A_theta @ u - b
    r_obs = model.H @ u - model.effective_data(y)
    r_prior = b - model.mu
    dtheta = model.theta - model.theta_prior_mean
    return (
        0.5 * r_model @ model.solve_G(r_model)
        + 0.5 * r_obs @ model.solve_R(r_obs)
        + 0.5 * r_prior @ model.solve_Sigma(r_prior)
        + model.n_u * model.theta
        + 0.5 * dtheta**2 / model.theta_prior_std**2
    )


def grad_u_potential(model, u, b, y):
    """State gradient: A_theta^T G^-1 (A_theta u - b) + H^T R^-1 (H u - y)."""
    r_model = model.A_theta @ u - b
    return model.A_theta.T @ model.solve_G(r_model) + model.Rinv_H.T @ (
        model.H @ u - model.effective_data(y)
    )


def grad_b_potential(model, u, b):
    """Forcing gradient: -G^-1 (A_theta u - b) + Sigma^-1 (b - mu)."""
    r_model = model.A_theta @ u - b
    return -model.solve_G(r_model) + model.solve_Sigma(b - model.mu)


def grad_theta_potential(model, u, b):
    """Log-diffusivity gradient.

    n_u + (theta - m_theta) / s_theta^2 + (A_theta u - b)^T G^-1 A_theta u.
    """
    w = model.A_theta @ u
    quad = (w - b) @ model.solve_G(w)
    prior = (model.theta - model.theta_prior_mean) / model.theta_prior_std**2
    return model.n_u + prior + quad


def hessian(model, include_b_prior=True):
    """Joint Hessian of the potential in (u, b) block order.

    [[A^T G^-1 A + H^T R^-1 H,  -A^T G^-1],
     [-G^-1 A,                   G^-1 (+ Sigma^-1)]]

    with A = A_theta. Dropping the b-prior gives the merely positive
    semidefinite Hessian of the marginal-likelihood potential.
    """
    n = model.n_u
    Ginv = model.solve_G(np.eye(n))
    Ginv = 0.5 * (Ginv + Ginv.T)
    GinvA = Ginv @ model.A_theta
    uu = model.A_theta.T @ GinvA + model.HtRinvH
    bb = Ginv.copy()
    if include_b_prior:
        Sinv = model.solve_Sigma(np.eye(n))
        bb += 0.5 * (Sinv + Sinv.T)
    out = np.empty((2 * n, 2 * n))
    out[:n, :n] = 0.5 * (uu + uu.T)
    out[:n, n:] = -GinvA.T
    out[n:, :n] = -GinvA
    out[n:, n:] = 0.5 * (bb + bb.T)
    return out


def data_precision_uu(A_theta, chol_G, HtRinvH):
    """State block of the Hessian: A^T G^-1 A + H^T R^-1 H (SPD)."""
    GinvA = linalg.cho_solve((chol_G, True), A_theta)
    W = A_theta.T @ GinvA
    return 0.5 * (W + W.T) + HtRinvH


def build_preconditioners(model):
    """Block preconditioners P_b = (G^-1 + Sigma^-1)^-1 and
    P_u = (A_theta^T G^-1 A_theta + H^T R^-1 H)^-1, each carrying an SPD
    factor for noise injection.

    Returns
    -------
    (P_b, P_u) : pair of Preconditioner
    """
    n = model.n_u
    Ginv = model.solve_G(np.eye(n))
    Sinv = model.solve_Sigma(np.eye(n))
    B_b = 0.5 * (Ginv + Ginv.T) + 0.5 * (Sinv + Sinv.T)
    B_u = data_precision_uu(model.A_theta, model.chol_G, model.HtRinvH)
    return Preconditioner(B_b), Preconditioner(B_u)


def convexity_constants(model, preconditioned=False, include_b_prior=True):
    """Smallest and largest eigenvalue (mu, L) of the joint Hessian.

    With preconditioned=True the Hessian is congruence-transformed by the
    block-diagonal preconditioner factor first, which is what governs the
    preconditioned dynamics.
    """
    Hs = hessian(model, include_b_prior=include_b_prior)
    if preconditioned:
        P_b, P_u = build_preconditioners(model)
        n = model.n_u
        F = np.zeros_like(Hs)
        F[:n, :n] = P_u.factor
        F[n:, n:] = P_b.factor
        Hs = F.T @ Hs @ F
        Hs = 0.5 * (Hs + Hs.T)
    w = np.linalg.eigvalsh(Hs)
    return w[0], w[-1]


def analytic_mmap(model, y):
    """Maximizer of the marginal posterior of b given y (closed form).

    Works through the marginal likelihood y | b ~ N(H A^-1 b, S) with
    S = H A^-1 G A^-T H^T + R; everything is Cholesky solves, no explicit
    inverse of A_theta.
    """
    y_eff = model.effective_data(y)
    cA = linalg.cho_factor(model.A_theta, lower=True)
    X = linalg.cho_solve(cA, model.H.T).T          # H A^-1
    S = X @ model.G @ X.T + model.R
    cS = linalg.cho_factor(0.5 * (S + S.T), lower=True)
    Sinv_X = linalg.cho_solve(cS, X)
    Prec = X.T @ Sinv_X + model.solve_Sigma(np.eye(model.n_u))
    rhs = X.T @ linalg.cho_solve(cS, y_eff) + model.solve_Sigma(model.mu)
    cP = linalg.cho_factor(0.5 * (Prec + Prec.T), lower=True)
    return linalg.cho_solve(cP, rhs)


def analytic_posterior(model, b, y):
    """Gaussian posterior p(u | y, theta, b) = N(m, C).

    C = (A^T G^-1 A + H^T R^-1 H)^-1 and m = C (H^T R^-1 y + A^T G^-1 b).
    """
    B_u = data_precision_uu(model.A_theta, model.chol_G, model.HtRinvH)
    cB = linalg.cho_factor(B_u, lower=True)
    rhs = model.Rinv_H.T @ model.effective_data(y) + model.A_theta.T @ model.solve_G(b)
    mean = linalg.cho_solve(cB, rhs)
    C = linalg.cho_solve(cB, np.eye(model.n_u))
    return GaussianDist(mean, 0.5 * (C + C.T))


def generate_data(model, b_true, rng):
    """Draw one synthetic dataset from the generative model.

    Draws e ~ N(0, G) then r ~ N(0, R) (in that order, so runs with a
    shared generator are reproducible), solves A_theta u = b_true + e and
    returns (y, u) with y = H u + r.
    """
    e = model.chol_G @ rng.standard_normal(model.n_u)
    r = model.chol_R @ rng.standard_normal(model.n_y)
    u = np.linalg.solve(model.A_theta, b_true + e)
    y = model.H @ u + r
    if model.obs_shift is not None:
        y = y + model.obs_shift
    return y, u


def export_model_summary(model, include_convexity=False):
    """JSON-ready summary of dimensions, hyperparameters and conditioning."""
    out = {
        "n_u": int(model.n_u),
        "n_total": int(model.n_total),
        "n_y": int(model.n_y),
        "theta": model.theta,
        "theta_prior_mean": model.theta_prior_mean,
        "theta_prior_std": model.theta_prior_std,
        "forcing_prior_mean_norm": float(np.linalg.norm(model.mu)),
        "obs_noise_var": float(np.diag(model.R).mean()),
    }
    if include_convexity:
        mu, L = convexity_constants(model)
        mu_p, L_p = convexity_constants(model, preconditioned=True)
        out.update(
            {
                "convexity_mu": float(mu),
                "convexity_L": float(L),
                "condition_number": float(L / mu),
                "convexity_mu_precond": float(mu_p),
                "convexity_L_precond": float(L_p),
                "condition_number_precond": float(L_p / mu_p),
            }
        )
    return out
