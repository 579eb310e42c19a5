"""Multivariate normal primitives.

Only two things are needed by the rest of the package: drawing samples from
a Gaussian vector, and the orthant probability ``P(Z <= 0)``.  The latter is
computed with Genz's separation-of-variables transform, variable reordering
and a randomized Richtmyer lattice rule.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import InvalidInputError, NumericalError, UnsupportedSizeError

MAX_CDF_DIM = 1000

_JITTER_START = 1e-10
_JITTER_STOP = 1e-6
_N_SHIFTS = 10
_CHUNK = 8192
# lattice-point x dimension entries per batched integrand call
_BATCH_POINTS = 2**22
# lattice points per shift in the first pass; doubled until accurate
_START_POINTS = 64


@dataclass(frozen=True)
class GaussianSpec:
    """Mean vector and covariance matrix of a q-dimensional Gaussian.

    The covariance is symmetrized on construction.
    """

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if mean.ndim != 1:
            raise InvalidInputError("mean must be a vector")
        q = mean.shape[0]
        if cov.shape != (q, q):
            raise InvalidInputError(
                f"covariance shape {cov.shape} does not match mean length {q}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvalidInputError("mean and covariance must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self):
        return self.mean.shape[0]


def _scale(cov):
    q = cov.shape[0]
    return float(np.trace(cov)) / q if q else 0.0


def jittered_cholesky(cov):
    """Lower Cholesky factor of ``cov`` after the smallest workable jitter.

    Jitter starts at 1e-10 x mean diagonal and grows by x10 up to 1e-6 x mean
    diagonal.  Returns None when no jitter level succeeds.
    """
    q = cov.shape[0]
    scale = _scale(cov)
    if scale <= 0.0:
        if np.allclose(cov, 0.0):
            return np.zeros_like(cov)
        return None
    rel = _JITTER_START
    eye = np.eye(q)
    while rel <= _JITTER_STOP * (1 + 1e-9):
        try:
            return linalg.cholesky(cov + rel * scale * eye, lower=True)
        except linalg.LinAlgError:
            rel *= 10.0
    return None


def _check_psd(cov):
    if cov.shape[0] == 0:
        return
    scale = max(_scale(cov), 0.0)
    lam_min = linalg.eigvalsh(cov, subset_by_index=[0, 0])[0]
    if lam_min < -_JITTER_STOP * max(scale, np.finfo(float).tiny):
        raise NumericalError(
            f"covariance is not positive semi-definite (min eigenvalue {lam_min:.3g})"
        )


def sqrt_factor(cov):
    """A matrix ``A`` with ``A @ A.T`` equal to ``cov`` up to jitter.

    Cholesky first; eigendecomposition with clipped eigenvalues otherwise.
    """
    chol = jittered_cholesky(cov)
    if chol is not None:
        return chol
    _check_psd(cov)
    w, v = linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def mvn_sample(spec, count, seed=None):
    """Draw ``count`` i.i.d. rows from ``N(spec.mean, spec.covariance)``.

    Parameters
    ----------
    spec : GaussianSpec
    count : int
    seed : int or numpy.random.Generator, optional

    Returns
    -------
    ndarray, shape (count, q)
    """
    if count < 1:
        raise InvalidInputError("count must be positive")
    factor = sqrt_factor(spec.covariance)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(count), spec.dim))
    return spec.mean + z @ factor.T


def _first_primes(n):
    limit = max(16, int(n * (np.log(n + 2) + np.log(np.log(n + 2)))) + 10)
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for k in range(2, int(limit**0.5) + 1):
        if sieve[k]:
            sieve[k * k :: k] = False
    return np.flatnonzero(sieve)[:n]


def _truncated_mean(u):
    # E[X | X <= u] for standard normal X
    log_ratio = -0.5 * u * u - 0.5 * np.log(2 * np.pi) - log_ndtr(u)
    return -np.exp(log_ratio)


def _reordered_cholesky(cov, upper):
    """Pivoted Cholesky with Genz-Bretz priority ordering, batched.

    Parameters
    ----------
    cov : array, shape (B, q, q)
    upper : array, shape (B, q)

    At step k the variable with the smallest conditional probability of
    satisfying its bound is moved to position k.  Near-zero pivots produce
    deterministic (indicator) rows with zero diagonal.
    """
    nb, q = upper.shape
    c = cov.copy()
    b = upper.copy()
    L = np.zeros((nb, q, q))
    y = np.zeros((nb, q))
    rows = np.arange(nb)
    scale = np.trace(cov, axis1=1, axis2=2) / q
    tol = (1e-12 * np.maximum(scale, np.finfo(float).tiny))[:, None]
    for k in range(q):
        shift = np.einsum("bij,bj->bi", L[:, k:, :k], y[:, :k])
        var = np.diagonal(c, axis1=1, axis2=2)[:, k:] - np.sum(L[:, k:, :k] ** 2, axis=2)
        ok = var > tol
        with np.errstate(divide="ignore", invalid="ignore"):
            prob = np.where(ok, ndtr((b[:, k:] - shift) / np.where(ok, np.sqrt(np.abs(var)), 1.0)),
                            (b[:, k:] - shift >= 0).astype(float))
        j = k + np.argmin(prob, axis=1)
        # swap k and j in every problem (a no-op where j == k)
        b[rows, k], b[rows, j] = b[rows, j], b[rows, k].copy()
        ck, cj = c[rows, k, :].copy(), c[rows, j, :].copy()
        c[rows, k, :], c[rows, j, :] = cj, ck
        ck, cj = c[rows, :, k].copy(), c[rows, :, j].copy()
        c[rows, :, k], c[rows, :, j] = cj, ck
        lk, lj = L[rows, k, :].copy(), L[rows, j, :].copy()
        L[rows, k, :], L[rows, j, :] = lj, lk
        piv = c[:, k, k] - np.sum(L[:, k, :k] ** 2, axis=1)
        live = piv > tol[:, 0]
        d = np.sqrt(np.where(live, piv, 1.0))
        col = (c[:, k + 1:, k] - np.einsum("bij,bj->bi", L[:, k + 1:, :k], L[:, k, :k]))
        L[:, k, k] = np.where(live, d, 0.0)
        L[:, k + 1:, k] = np.where(live[:, None], col / d[:, None], 0.0)
        cond = (b[:, k] - np.sum(L[:, k, :k] * y[:, :k], axis=1)) / d
        y[:, k] = np.where(live, _truncated_mean(np.where(live, cond, 0.0)), 0.0)
    return L, b


def _integrand(L, b, w):
    """Genz integrand for a batch: ``w`` has shape (B, n, q), returns (B, n)."""
    nb, n, q = w.shape
    f = np.ones((nb, n))
    ys = np.zeros((nb, n, q))
    lo, hi = 1e-16, 1.0 - 1e-16
    for i in range(q):
        s = np.einsum("bnj,bj->bn", ys[:, :, :i], L[:, i, :i])
        d = L[:, i, i][:, None]
        live = d > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            e = np.where(live, ndtr((b[:, i, None] - s) / np.where(live, d, 1.0)),
                         (b[:, i, None] - s >= 0.0).astype(float))
        f *= e
        if i < q - 1:
            ys[:, :, i] = np.where(live, ndtri(np.clip(w[:, :, i] * e, lo, hi)), 0.0)
    return f


def _validate_accuracy(accuracy):
    if accuracy <= 0:
        raise InvalidInputError("accuracy must be positive")


def mvn_cdf_at_zero(spec, accuracy=1e-3, seed=0, max_points=2**16):
    """Probability that every component of a Gaussian vector is <= 0.

    Parameters
    ----------
    spec : GaussianSpec
    accuracy : float
        Target absolute error (3-sigma estimate from the lattice shifts).
    seed : int
        Seed of the random lattice shifts; the result is deterministic in it.
    max_points : int
        Upper bound on lattice points per shift.

    Returns
    -------
    (float, float)
        The probability and its estimated absolute error.
    """
    _validate_accuracy(accuracy)
    q = spec.dim
    if q < 1:
        raise InvalidInputError("dimension must be at least 1")
    if q > MAX_CDF_DIM:
        raise UnsupportedSizeError(f"dimension {q} exceeds maximum {MAX_CDF_DIM}")
    cov, upper = spec.covariance, -spec.mean

    if q == 1:
        var = cov[0, 0]
        if var < 0:
            raise NumericalError("negative variance")
        if var == 0.0:
            return float(upper[0] >= 0), 0.0
        return float(ndtr(upper[0] / np.sqrt(var))), 0.0

    _check_psd(cov)
    values, errors = _orthant_batch(cov[None], upper[None], accuracy, seed, max_points)
    return float(values[0]), float(errors[0])


def mvn_cdf_at_zero_batch(means, covs, accuracy=1e-3, seed=0, max_points=2**16):
    """``mvn_cdf_at_zero`` for many Gaussians of one dimension at once.

    Parameters
    ----------
    means : array, shape (B, q)
    covs : array, shape (B, q, q)

    Returns
    -------
    (ndarray, ndarray)
        Probabilities and estimated absolute errors, each of shape (B,).
        Element ``b`` equals ``mvn_cdf_at_zero`` of problem ``b`` with the
        same ``accuracy``, ``seed`` and ``max_points``.
    """
    _validate_accuracy(accuracy)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    if means.ndim != 2 or covs.shape != means.shape + means.shape[-1:]:
        raise InvalidInputError("expected means (B, q) and covariances (B, q, q)")
    nb, q = means.shape
    if q > MAX_CDF_DIM:
        raise UnsupportedSizeError(f"dimension {q} exceeds maximum {MAX_CDF_DIM}")
    if nb == 0:
        return np.zeros(0), np.zeros(0)
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
        raise InvalidInputError("mean and covariance must be finite")
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    if q == 1:
        out = [mvn_cdf_at_zero(GaussianSpec(m, c), accuracy, seed, max_points)
               for m, c in zip(means, covs)]
        return np.array([v for v, _ in out]), np.array([e for _, e in out])
    scale = np.maximum(np.trace(covs, axis1=1, axis2=2) / q, 0.0)
    lam_min = np.linalg.eigvalsh(covs)[:, 0]
    bad = lam_min < -_JITTER_STOP * np.maximum(scale, np.finfo(float).tiny)
    if np.any(bad):
        raise NumericalError(
            f"covariance {int(np.argmax(bad))} is not positive semi-definite "
            f"(min eigenvalue {lam_min[bad][0]:.3g})"
        )
    return _orthant_batch(covs, -means, accuracy, seed, max_points)


def _orthant_batch(covs, upper, accuracy, seed, max_points):
    nb, q = upper.shape
    L, b = _reordered_cholesky(covs, upper)
    values = np.empty(nb)
    errors = np.empty(nb)
    # independent (or deterministic) components: the product form is exact
    indep = ~np.any(np.tril(L, -1), axis=(1, 2))
    d = np.diagonal(L, axis1=1, axis2=2)[indep]
    with np.errstate(divide="ignore", invalid="ignore"):
        probs = np.where(d > 0, ndtr(b[indep] / np.where(d > 0, d, 1.0)), b[indep] >= 0)
    values[indep] = np.prod(probs, axis=1)
    errors[indep] = 0.0
    rng = np.random.default_rng(seed)
    gen = np.sqrt(_first_primes(q)) % 1.0
    active = np.flatnonzero(~indep)
    n = _START_POINTS
    while active.size:
        shifts = rng.random((_N_SHIFTS, q))
        totals = np.zeros((active.size, _N_SHIFTS))
        # all shifts of one block of lattice points in a single pass
        step = max(1, _CHUNK // _N_SHIFTS)
        per_call = max(1, _BATCH_POINTS // (step * _N_SHIFTS * q))
        for start in range(1, n + 1, step):
            k = np.arange(start, min(start + step, n + 1))[:, None]
            frac = (k * gen)[None] + shifts[:, None]
            frac -= np.floor(frac)  # much faster than % 1.0
            w = np.abs(2.0 * frac - 1.0).reshape(-1, q)
            for lo in range(0, active.size, per_call):
                idx = active[lo:lo + per_call]
                ww = np.broadcast_to(w, (idx.size,) + w.shape)
                f = _integrand(L[idx], b[idx], ww).reshape(idx.size, _N_SHIFTS, -1)
                totals[lo:lo + per_call] += f.sum(axis=2)
        estimates = totals / n
        value = estimates.mean(axis=1)
        error = 3.0 * estimates.std(axis=1, ddof=1) / np.sqrt(_N_SHIFTS)
        done = (error <= accuracy) | (n >= max_points)
        values[active[done]] = np.clip(value[done], 0.0, 1.0)
        errors[active[done]] = error[done]
        active = active[~done]
        n *= 2
    return values, errors
