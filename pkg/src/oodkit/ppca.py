"""Closed-form linear-VAE laboratory.

A linear Gaussian VAE fitted by probabilistic-PCA maximum likelihood,
with the encoder at its ELBO stationary points.  On single-modal data the
aggregated posterior equals the standard-normal prior and the ELBO equals
the exact marginal log-likelihood; on multi-modal data the aggregated
posterior is a mixture and the standard-normal prior overestimates the
void between modes.  Everything here is exact (population-moment entry
points) or quadrature-checked, so the mismatch effects are reproducible
at desk scale.
"""

from dataclasses import dataclass

import numpy as np

from .density import GaussianDensity, MixtureDensity
from .errors import FitError

_LOG2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MixtureSpec:
    """A Gaussian-mixture data distribution."""

    weights: np.ndarray
    means: np.ndarray  # (k, d)
    covs: np.ndarray  # (k, d, d)

    def __post_init__(self):
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)


def unimodal_spec():
    """Standard 2-D Gaussian data."""
    return MixtureSpec(
        weights=np.array([1.0]),
        means=np.zeros((1, 2)),
        covs=np.eye(2)[None, :, :],
    )


def bimodal_spec():
    """Two equal-weight 2-D Gaussians at +-(3, 3) with unit covariance."""
    return MixtureSpec(
        weights=np.array([0.5, 0.5]),
        means=np.array([[3.0, 3.0], [-3.0, -3.0]]),
        covs=np.stack([np.eye(2), np.eye(2)]),
    )


def population_moments(spec):
    """Exact mean and covariance of the mixture."""
    mean = np.einsum("k,kd->d", spec.weights, spec.means)
    cov = np.zeros((spec.dim, spec.dim))
    for w, mu, sig in zip(spec.weights, spec.means, spec.covs):
        cov += w * (sig + np.outer(mu, mu))
    cov -= np.outer(mean, mean)
    return mean, cov


def gen_mixture(spec, n_per_component, seed):
    """Seeded draws, n per component, concatenated in component order."""
    if n_per_component < 1:
        raise ValueError("n_per_component must be >= 1")
    rng = np.random.default_rng(seed)
    blocks = []
    for mu, sig in zip(spec.means, spec.covs):
        chol = np.linalg.cholesky(sig)
        eps = rng.standard_normal((n_per_component, spec.dim))
        blocks.append(mu + eps @ chol.T)
    return np.concatenate(blocks, axis=0)


@dataclass(frozen=True)
class PpcaSolution:
    """Closed-form linear-VAE parameters.

    Decoder x|z ~ N(Ez + F, sigma2 I) at the joint-likelihood MLE; encoder
    z|x ~ N(Ax + B, C) at the ELBO stationary points (which coincide with
    the exact posterior of the fitted decoder).
    """

    sigma2: float
    E: np.ndarray  # (d, q)
    F: np.ndarray  # (d,)
    A: np.ndarray  # (q, d)
    B: np.ndarray  # (q,)
    C: np.ndarray  # (q, q)

    @property
    def dim(self):
        return self.E.shape[0]

    @property
    def latent_dim(self):
        return self.E.shape[1]


def ppca_fit(sample_cov, q):
    """Maximum-likelihood fit from a (sample or population) covariance.

    sigma2 is the mean of the d-q smallest eigenvalues and the loading
    matrix is U_q (Lambda_q - sigma2 I)^(1/2); negative entries under the
    square root are clamped to zero (floating point near isotropy).  For
    q = 1 the loading sign is canonicalized to a nonnegative leading
    component.
    """
    cov = np.asarray(sample_cov, dtype=float)
    d = cov.shape[0]
    if cov.shape != (d, d) or not np.allclose(cov, cov.T, atol=1e-10):
        raise FitError("covariance must be square symmetric")
    if q >= d:
        raise FitError(f"need q < d, got q={q}, d={d}")
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[0] <= 0:
        raise FitError(f"covariance not positive definite (min eig {eigvals[0]:g})")
    eigvals = eigvals[::-1]
    eigvecs = eigvecs[:, ::-1]

    sigma2 = float(np.mean(eigvals[q:]))
    load = np.sqrt(np.maximum(eigvals[:q] - sigma2, 0.0))
    E = eigvecs[:, :q] * load
    if q == 1:
        nz = np.nonzero(E[:, 0])[0]
        if len(nz) and E[nz[0], 0] < 0:
            E = -E
    A, B, C = _posterior_closed_form(sigma2, E)
    return PpcaSolution(sigma2=sigma2, E=E, F=np.zeros(d), A=A, B=B, C=C)


def _posterior_closed_form(sigma2, E):
    q = E.shape[1]
    M = np.eye(q) + (E.T @ E) / sigma2
    Minv = np.linalg.inv(M)
    A = Minv @ E.T / sigma2
    C = 0.5 * (Minv + Minv.T)
    return A, np.zeros(q), C


def linear_posterior(sol):
    """ELBO stationary points of the encoder, functions of (E, sigma2) only."""
    return _posterior_closed_form(sol.sigma2, sol.E)


def aggregated_posterior(sol, spec):
    """The latent mixture sum_k pi_k N(A mu_k, A Sigma_k A^T + C)."""
    means = [sol.A @ mu for mu in spec.means]
    covs = [sol.A @ sig @ sol.A.T + sol.C for sig in spec.covs]
    return MixtureDensity(spec.weights, means, covs)


def marginal_gaussian(sol):
    """The model marginal over x: N(F, E E^T + sigma2 I)."""
    cov = sol.E @ sol.E.T + sol.sigma2 * np.eye(sol.dim)
    return GaussianDensity(sol.F, cov)


def marginal_density(sol, x):
    """log N(x | F, E E^T + sigma2 I), in nats."""
    return marginal_gaussian(sol).log_density(np.asarray(x, dtype=float))


def _kl_gaussians(m0, cov0, m1, cov1):
    """Closed-form KL(N(m0, cov0) || N(m1, cov1))."""
    q = len(m0)
    l1 = np.linalg.cholesky(cov1)
    inv1 = np.linalg.inv(cov1)
    logdet0 = float(np.linalg.slogdet(cov0)[1])
    logdet1 = 2.0 * float(np.sum(np.log(np.diag(l1))))
    diff = np.asarray(m1, dtype=float) - np.asarray(m0, dtype=float)
    return 0.5 * (
        logdet1 - logdet0 - q + float(np.trace(inv1 @ cov0))
        + float(diff @ inv1 @ diff)
    )


def support_bound_1d(density, nsigma=10.0):
    """|mean| + nsigma * std over all components of a 1-D density."""
    if isinstance(density, GaussianDensity):
        return abs(float(density.mean[0])) + nsigma * float(
            np.sqrt(density.cov[0, 0])
        )
    return max(
        abs(float(m[0])) + nsigma * float(np.sqrt(c[0, 0]))
        for m, c in zip(density.means, density.covs)
    )


def kl_quadrature_1d(p_density, q_density, nsigma=10.0, npts=20001):
    """KL(p || q) for 1-D densities by trapezoid quadrature.

    The grid spans the union of both supports out to nsigma standard
    deviations; with 20001 points the error is well below 1e-6 at the
    scales involved here.
    """
    bound = max(support_bound_1d(p_density, nsigma),
                support_bound_1d(q_density, nsigma))
    grid = np.linspace(-bound, bound, npts)[:, None]
    log_p = p_density.log_density_batch(grid)
    log_q = q_density.log_density_batch(grid)
    p = np.exp(log_p)
    return float(np.trapezoid(p * (log_p - log_q), grid[:, 0]))


def density_modes_1d(density, lo, hi, n=200001):
    """Locations of the local maxima of a 1-D density on [lo, hi].

    Grid search followed by one parabolic refinement per mode.
    """
    grid = np.linspace(lo, hi, n)
    vals = density.log_density_batch(grid[:, None])
    interior = np.nonzero(
        (vals[1:-1] > vals[:-2]) & (vals[1:-1] >= vals[2:])
    )[0] + 1
    modes = []
    h = grid[1] - grid[0]
    for i in interior:
        denom = vals[i - 1] - 2 * vals[i] + vals[i + 1]
        shift = 0.0 if denom == 0 else 0.5 * (vals[i - 1] - vals[i + 1]) / denom
        modes.append(float(grid[i] + shift * h))
    return modes


def linear_elbo(sol, x, prior):
    """ELBO of the linear VAE at x under the given latent prior.

    The reconstruction expectation is closed form; the KL term is analytic
    for a Gaussian prior and 1-D trapezoid quadrature for a mixture prior.
    """
    x = np.asarray(x, dtype=float)
    m_z = sol.A @ x + sol.B
    resid = sol.E @ m_z - x
    recon = (
        -0.5 * (float(resid @ resid) + float(np.trace(sol.E @ sol.C @ sol.E.T)))
        / sol.sigma2
        - 0.5 * sol.dim * np.log(2.0 * np.pi * sol.sigma2)
    )
    if isinstance(prior, GaussianDensity):
        kl = _kl_gaussians(m_z, sol.C, prior.mean, prior.cov)
    else:
        if sol.latent_dim != 1:
            raise FitError("mixture-prior ELBO supports q = 1 only")
        posterior = GaussianDensity(m_z, sol.C)
        kl = kl_quadrature_1d(posterior, prior)
    return recon - kl


def standard_normal_prior(q):
    return GaussianDensity(np.zeros(q), np.eye(q))
