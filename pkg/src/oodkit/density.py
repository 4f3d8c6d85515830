"""Latent-space density models: full-covariance Gaussian and GMM via EM.

These fit the in-distribution aggregated posterior.  The family is
pluggable: anything exposing ``log_density`` / ``log_density_batch`` /
``sample`` works as a post-hoc prior, so autoregressive fitters can be
added behind the same interface later.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FitError

COV_FLOOR = 1e-8  # component collapse threshold for EM
_LOG2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FitMeta:
    n_points: int
    final_loglik: float
    iterations: int


def _cholesky_regularized(cov):
    """Cholesky factor, adding eps*I (eps = 1e-9 * trace/d) if needed."""
    try:
        return np.linalg.cholesky(cov), cov
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    eps = max(1e-9 * float(np.trace(cov)) / d, 1e-12)
    cov = cov + eps * np.eye(d)
    try:
        return np.linalg.cholesky(cov), cov
    except np.linalg.LinAlgError as exc:
        raise FitError("covariance is rank deficient even after "
                       f"regularization (+{eps:g} I)") from exc


def _gauss_logpdf(z, mean, chol):
    """Log density of N(mean, L L^T) at rows of z, via triangular solves."""
    z = np.atleast_2d(z)
    diff = z - mean
    sol = solve_triangular(chol, diff.T, lower=True)
    quad = np.sum(sol * sol, axis=0)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (z.shape[1] * _LOG2PI + logdet + quad)


class GaussianDensity:
    """Full-covariance multivariate Gaussian with cached Cholesky factor."""

    variant = "full_gaussian"

    def __init__(self, mean, cov, fit_meta=None):
        self.mean = np.asarray(mean, dtype=float)
        chol, cov = _cholesky_regularized(np.asarray(cov, dtype=float))
        self.cov = cov
        self.chol = chol
        self.fit_meta = fit_meta

    @property
    def dim(self):
        return len(self.mean)

    def log_density_batch(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {z.shape[1]}")
        return _gauss_logpdf(z, self.mean, self.chol)

    def log_density(self, z):
        return float(self.log_density_batch(z)[0])

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self.chol.T


class MixtureDensity:
    """Gaussian mixture; log density via log-sum-exp over components."""

    variant = "gmm"

    def __init__(self, weights, means, covs, fit_meta=None, loglik_trace=()):
        self.weights = np.asarray(weights, dtype=float)
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise FitError("mixture weights must sum to 1 within 1e-12")
        self.means = [np.asarray(m, dtype=float) for m in means]
        self.covs = []
        self.chols = []
        for cov in covs:
            chol, cov = _cholesky_regularized(np.asarray(cov, dtype=float))
            self.covs.append(cov)
            self.chols.append(chol)
        self.fit_meta = fit_meta
        self.loglik_trace = tuple(loglik_trace)

    @property
    def dim(self):
        return len(self.means[0])

    @property
    def n_components(self):
        return len(self.means)

    def _component_logpdfs(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {z.shape[1]}")
        out = np.empty((z.shape[0], self.n_components))
        for j in range(self.n_components):
            out[:, j] = _gauss_logpdf(z, self.means[j], self.chols[j])
        return out + np.log(self.weights)

    def log_density_batch(self, z):
        lp = self._component_logpdfs(z)
        m = np.max(lp, axis=1, keepdims=True)
        return (m + np.log(np.sum(np.exp(lp - m), axis=1, keepdims=True))).ravel()

    def log_density(self, z):
        return float(self.log_density_batch(z)[0])

    def sample(self, n, rng):
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for j in range(self.n_components):
            mask = comps == j
            out[mask] = self.means[j] + eps[mask] @ self.chols[j].T
        return out


def log_density(model, z):
    return model.log_density(z)


def sample(model, n, seed):
    """Deterministic draws given the seed; n must be >= 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return model.sample(n, np.random.default_rng(seed))


def fit_full_gaussian(latents):
    """Maximum-likelihood Gaussian: sample mean and biased (1/n) covariance.

    A failing Cholesky factorization triggers +eps*I regularization with
    eps = 1e-9 * trace/d; rank deficiency is an error only if that fails.
    """
    latents = np.asarray(latents, dtype=float)
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise FitError("need an n x d matrix with n >= 2")
    if not np.all(np.isfinite(latents)):
        raise FitError("latents must be finite")
    n, d = latents.shape
    mean = latents.mean(axis=0)
    diff = latents - mean
    cov = diff.T @ diff / n
    model = GaussianDensity(mean, cov)
    total = float(np.sum(model.log_density_batch(latents)))
    model.fit_meta = FitMeta(n_points=n, final_loglik=total, iterations=0)
    return model


def _kmeanspp_centers(latents, k, rng):
    n = latents.shape[0]
    centers = [latents[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            [np.sum((latents - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = float(np.sum(d2))
        if total <= 0:
            centers.append(latents[rng.integers(n)])
            continue
        centers.append(latents[rng.choice(n, p=d2 / total)])
    return np.array(centers)


class _ComponentCollapse(Exception):
    pass


def _em_run(latents, k, rng, max_iter, tol):
    n, d = latents.shape
    means = _kmeanspp_centers(latents, k, rng)
    base_cov = (latents - latents.mean(axis=0)).T @ (latents - latents.mean(axis=0)) / n
    base_cov = base_cov + max(1e-9 * float(np.trace(base_cov)) / d, 1e-12) * np.eye(d)
    covs = [base_cov.copy() for _ in range(k)]
    weights = np.full(k, 1.0 / k)

    trace = []
    prev = -np.inf
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        chols = [np.linalg.cholesky(c) for c in covs]
        lp = np.empty((n, k))
        for j in range(k):
            lp[:, j] = _gauss_logpdf(latents, means[j], chols[j]) + np.log(weights[j])
        m = np.max(lp, axis=1, keepdims=True)
        lse = m + np.log(np.sum(np.exp(lp - m), axis=1, keepdims=True))
        loglik = float(np.sum(lse))
        trace.append(loglik)

        resp = np.exp(lp - lse)
        nk = resp.sum(axis=0)
        if np.any(nk <= 0):
            raise _ComponentCollapse()
        weights = nk / n
        means = (resp.T @ latents) / nk[:, None]
        new_covs = []
        for j in range(k):
            diff = latents - means[j]
            cov = (resp[:, j][:, None] * diff).T @ diff / nk[j]
            cov = 0.5 * (cov + cov.T)
            if float(np.min(np.linalg.eigvalsh(cov))) < COV_FLOOR:
                raise _ComponentCollapse()
            new_covs.append(cov)
        covs = new_covs

        if loglik - prev < tol and np.isfinite(prev):
            break
        prev = loglik

    return weights, means, covs, trace, iterations


def fit_gmm(latents, k, seed, max_iter=200, tol=1e-7):
    """EM fit of a k-component GMM from k-means++-style seeded init.

    Stops when the data log-likelihood improves by less than ``tol`` or
    after ``max_iter`` iterations; the per-iteration log-likelihood is
    non-decreasing (EM monotonicity).  A component whose covariance falls
    below the 1e-8*I floor triggers a restart with a new seed, up to 5
    restarts.
    """
    latents = np.asarray(latents, dtype=float)
    if latents.ndim != 2:
        raise FitError("need an n x d matrix")
    if k < 1:
        raise FitError("k must be >= 1")
    if latents.shape[0] < k:
        raise FitError(f"need at least k={k} points, got {latents.shape[0]}")

    last_exc = None
    for attempt in range(6):
        rng = np.random.default_rng(seed + attempt)
        try:
            weights, means, covs, trace, iters = _em_run(
                latents, k, rng, max_iter, tol
            )
        except (_ComponentCollapse, np.linalg.LinAlgError) as exc:
            last_exc = exc
            continue
        meta = FitMeta(
            n_points=latents.shape[0], final_loglik=trace[-1], iterations=iters
        )
        return MixtureDensity(weights, means, covs, fit_meta=meta,
                              loglik_trace=trace)
    raise FitError(
        f"EM collapsed on all 6 attempts (seeds {seed}..{seed + 5})"
    ) from last_exc


# --- save / load -----------------------------------------------------------


def save_density(model, path):
    lines = []
    meta = model.fit_meta
    header = {
        "kind": "density",
        "variant": model.variant,
        "dim": model.dim,
        "n_points": meta.n_points if meta else None,
        "final_loglik": meta.final_loglik if meta else None,
        "iterations": meta.iterations if meta else None,
    }
    if model.variant == "full_gaussian":
        lines.append(json.dumps(header))
        lines.append(json.dumps({"kind": "mean", "values": list(map(float, model.mean))}))
        lines.append(json.dumps({"kind": "cov", "rows": model.cov.tolist()}))
    else:
        header["k"] = model.n_components
        lines.append(json.dumps(header))
        for j in range(model.n_components):
            lines.append(json.dumps({
                "kind": "component",
                "weight": float(model.weights[j]),
                "mean": list(map(float, model.means[j])),
                "cov": model.covs[j].tolist(),
            }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_density(path):
    raw = [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines()
           if l.strip()]
    if not raw or raw[0].get("kind") != "density":
        raise FitError(f"{path}: not a density file")
    header = raw[0]
    meta = None
    if header.get("n_points") is not None:
        meta = FitMeta(header["n_points"], header["final_loglik"],
                       header["iterations"])
    if header["variant"] == "full_gaussian":
        mean = np.array(raw[1]["values"])
        cov = np.array(raw[2]["rows"])
        return GaussianDensity(mean, cov, fit_meta=meta)
    if header["variant"] == "gmm":
        comps = raw[1:]
        return MixtureDensity(
            weights=[c["weight"] for c in comps],
            means=[np.array(c["mean"]) for c in comps],
            covs=[np.array(c["cov"]) for c in comps],
            fit_meta=meta,
        )
    raise FitError(f"unknown density variant {header['variant']!r}")
