"""Gaussian random fields on FEM meshes via a Laplacian eigenbasis.

A squared-exponential kernel is approximated by truncating its spectral
representation on the eigenfunctions of the Dirichlet Laplacian,

    k(x, x') ~ sum_l S(sqrt(lambda_l)) g_l(x) g_l(x'),

where (lambda_l, g_l) solve the generalized problem A g = lambda M g on the
free (non-boundary) nodes and S is the kernel's spectral density. Projecting
onto the P1 basis gives the dense coefficient-space covariances used by both
the model-error term and the forcing prior.
"""

import logging

import numpy as np
from scipy import linalg

from .mesh_fem import assemble_load

logger = logging.getLogger(__name__)

# additive jitter on covariances defaults to this factor times the amplitude
DEFAULT_JITTER_FACTOR = 1e-8


def spectral_density_se(omega, amplitude, lengthscale, dim):
    """Spectral density of the squared-exponential kernel.

    Parameters
    ----------
    omega : array_like
        Nonnegative angular frequencies.
    amplitude : float
        Kernel variance sigma^2.
    lengthscale : float
        Kernel lengthscale ell.
    dim : int
        Spatial dimension, 1 or 2.

    Returns
    -------
    S(omega) = amplitude * (2 pi ell^2)^(dim/2) * exp(-omega^2 ell^2 / 2).
    """
    omega = np.asarray(omega, dtype=float)
    scale = (2.0 * np.pi * lengthscale**2) ** (dim / 2.0)
    return amplitude * scale * np.exp(-0.5 * omega**2 * lengthscale**2)


class SeKernel:
    """Squared-exponential kernel k(x,x') = s2 * exp(-|x-x'|^2 / (2 l^2))."""

    def __init__(self, amplitude, lengthscale):
        if amplitude <= 0 or lengthscale <= 0:
            raise ValueError("kernel amplitude and lengthscale must be positive")
        self.amplitude = float(amplitude)
        self.lengthscale = float(lengthscale)

    def __call__(self, X, Y=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
        d2 = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=-1)
        return self.amplitude * np.exp(-0.5 * d2 / self.lengthscale**2)

    def spectral_density(self, omega, dim):
        return spectral_density_se(omega, self.amplitude, self.lengthscale, dim)


class LaplacianEigs:
    """Generalized eigenpairs of the (stiffness, mass) pencil.

    Attributes
    ----------
    values : array, shape (m,)
        Eigenvalues, ascending and positive.
    vectors : array, shape (n_nodes, m)
        Coefficient vectors, zero at boundary nodes, normalized so that
        g^T M g = 1 (unit L2 norm of the interpolant).
    """

    def __init__(self, values, vectors):
        self.values = np.asarray(values, dtype=float)
        self.vectors = np.asarray(vectors, dtype=float)

    @property
    def n_modes(self):
        return self.values.shape[0]


def default_n_modes(system):
    """Default truncation: min(free nodes, 64) in 1D, min(free, 128) in 2D."""
    n_free = system.mesh.interior_nodes.shape[0]
    cap = 64 if system.mesh.dim == 1 else 128
    return min(n_free, cap)


def solve_laplacian_eigs(system, n_modes=None):
    """Solve A g = lambda M g restricted to the free nodes.

    The pencil is reduced to the free-node block (both matrices are SPD
    there) and handed to the symmetric-definite LAPACK driver, which works
    through the Cholesky factorization of M. Eigenvectors come back
    M-orthonormal; they are re-embedded with zeros at boundary nodes.

    Parameters
    ----------
    system : FemSystem
    n_modes : int or None
        Number of smallest eigenpairs; default per default_n_modes.
    """
    if n_modes is None:
        n_modes = default_n_modes(system)
    free = system.mesh.interior_nodes
    n_free = free.shape[0]
    if not 1 <= n_modes <= n_free:
        raise ValueError(f"n_modes must be in [1, {n_free}], got {n_modes}")
    A_ff = system.A[np.ix_(free, free)]
    M_ff = system.M[np.ix_(free, free)]
    vals, vecs = linalg.eigh(A_ff, M_ff, subset_by_index=[0, n_modes - 1])
    if vals[0] <= 0:
        raise linalg.LinAlgError("nonpositive Laplacian eigenvalue; mesh degenerate?")
    full = np.zeros((system.n_nodes, n_modes))
    full[free, :] = vecs
    # normalize in the full-size mass inner product (defensive; the LAPACK
    # driver already returns M-orthonormal vectors)
    norms = np.sqrt(np.einsum("im,ij,jm->m", full, system.M, full))
    full /= norms
    return LaplacianEigs(vals, full)


class GaussianDist:
    """Multivariate normal with cached Cholesky factor of the covariance."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        scale = np.abs(cov).max()
        if scale > 0 and np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        self.cov = 0.5 * (cov + cov.T)
        self._chol = None

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def chol(self):
        """Lower-triangular factor L with L L^T = cov."""
        if self._chol is None:
            self._chol = linalg.cholesky(self.cov, lower=True)
        return self._chol

    def sample(self, rng, size=None):
        """Draw samples; shape (dim,) for size None, else (dim, size)."""
        if size is None:
            return self.mean + self.chol @ rng.standard_normal(self.dim)
        z = rng.standard_normal((self.dim, size))
        return self.mean[:, None] + self.chol @ z


def _spectral_covariance(system, eigs, kernel, jitter):
    """Shared covariance construction for model error and forcing prior."""
    s = kernel.spectral_density(np.sqrt(eigs.values), system.mesh.dim)
    W = system.M @ eigs.vectors
    G = (W * s) @ W.T
    if jitter > 0:
        G = G + jitter * system.M
    bnd = system.mesh.boundary_nodes
    G[bnd, :] = 0.0
    G[:, bnd] = 0.0
    G[bnd, bnd] = jitter if jitter > 0 else 1e-12
    return 0.5 * (G + G.T)


def assemble_error_covariance(system, eigs, kernel, jitter=None):
    """Coefficient-space covariance of the model-error term.

    G = sum_l S(sqrt(lambda_l)) (M g_l)(M g_l)^T + jitter * M, symmetrized,
    with boundary rows and columns zeroed and the boundary diagonal set to
    the jitter (1e-12 when jitter is zero) so G stays invertible.

    Parameters
    ----------
    jitter : float or None
        Defaults to 1e-8 times the kernel amplitude.
    """
    if jitter is None:
        jitter = DEFAULT_JITTER_FACTOR * kernel.amplitude
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    return _spectral_covariance(system, eigs, kernel, jitter)


def assemble_forcing_prior(system, eigs, kernel, jitter=None, mean=None):
    """Gaussian prior over load vectors from the same eigen-expansion.

    Returns a GaussianDist with covariance built exactly like
    assemble_error_covariance but with the forcing kernel. The mean may be
    a load vector, a mean function (assembled through the load integral),
    or None for the zero mean.
    """
    if jitter is None:
        jitter = DEFAULT_JITTER_FACTOR * kernel.amplitude
    cov = _spectral_covariance(system, eigs, kernel, jitter)
    if mean is None:
        mean = np.zeros(system.n_nodes)
    elif callable(mean):
        mean = assemble_load(system.mesh, mean)
    return GaussianDist(mean, cov)


def export_eigs_csv(eigs, path):
    """Write eigenpairs as CSV: one row per mode, l, lambda, coefficients."""
    n = eigs.vectors.shape[0]
    header = "l,lambda," + ",".join(f"g_{i}" for i in range(n))
    rows = np.column_stack(
        [np.arange(1, eigs.n_modes + 1), eigs.values, eigs.vectors.T]
    )
    np.savetxt(path, rows, delimiter=",", header=header, comments="")
