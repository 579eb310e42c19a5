"""Gaussian-process regression, one independent model per objective.

Inputs are rescaled to the unit box and outputs standardized before fitting;
kernel hyperparameters therefore live in those normalized units while every
public prediction is returned in the original units.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import (
    DegenerateUpdateError,
    IllConditionedError,
    InvalidInputError,
    NumericalError,
    UnsupportedSizeError,
)
from .mvn import GaussianSpec, sqrt_factor

KERNEL_FAMILIES = ("squared-exponential", "matern-5/2", "matern-3/2")
MAX_SIM_POINTS = 4096
SERIAL_VERSION = 1

# relative posterior variance below which a noise-free site counts as known
DEGENERATE_VARIANCE = 1e-8

_JITTER_LEVELS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class Kernel:
    """Stationary kernel on unit-scaled inputs.

    ``k(x, x) == variance`` for every family.
    """

    family: str
    lengthscales: np.ndarray
    variance: float

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise InvalidInputError(f"unknown kernel family {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if np.any(ls <= 0) or self.variance <= 0:
            raise InvalidInputError("lengthscales and variance must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))

    def __call__(self, a, b):
        return self.variance * _correlation(self.family, _sqdist(a, b, self.lengthscales))


def _sqdist(a, b, lengthscales):
    a = a / lengthscales
    b = b / lengthscales
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.clip(d2, 0.0, None)


def _correlation(family, d2):
    if family == "squared-exponential":
        return np.exp(-0.5 * d2)
    r = np.sqrt(d2)
    if family == "matern-5/2":
        return (1.0 + _SQRT5 * r + 5.0 / 3.0 * d2) * np.exp(-_SQRT5 * r)
    return (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)


def _correlation_and_grads(family, x, lengthscales):
    """Correlation matrix and its derivatives w.r.t. each log-lengthscale."""
    diffs = [np.subtract.outer(x[:, j], x[:, j]) ** 2 / lengthscales[j] ** 2
             for j in range(x.shape[1])]
    d2 = np.sum(diffs, axis=0)
    corr = _correlation(family, d2)
    if family == "squared-exponential":
        factor = corr
    else:
        r = np.sqrt(d2)
        if family == "matern-5/2":
            factor = 5.0 / 3.0 * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
        else:
            factor = 3.0 * np.exp(-_SQRT3 * r)
    return corr, [factor * dj for dj in diffs]


@dataclass
class FitConfig:
    """Multi-start maximum-likelihood settings (normalized units)."""

    n_restarts: int = 10
    seed: int = 0
    lengthscale_bounds: tuple = (0.01, 2.0)
    variance_bounds: tuple = (0.05, 20.0)
    nugget_bounds: tuple = (1e-8, 1.0)
    maxiter: int = 200


def _cholesky_escalating(mat, base):
    eye = np.eye(mat.shape[0])
    for rel in _JITTER_LEVELS:
        try:
            return linalg.cholesky(mat + rel * base * eye, lower=True), rel * base
        except linalg.LinAlgError:
            continue
    return None, None


@dataclass(frozen=True, eq=False)
class GpModel:
    """A fitted zero-mean GP for a single objective.

    Attributes hold the raw design (original units) plus the normalization
    and the factorized covariance ``chol`` of the normalized problem.
    """

    kernel: Kernel
    inputs: np.ndarray
    outputs: np.ndarray
    noise_vars: np.ndarray
    input_lower: np.ndarray
    input_range: np.ndarray
    y_mean: float
    y_scale: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def prior_variance(self):
        return self.kernel.variance * self.y_scale**2

    @property
    def n_obs(self):
        return self.inputs.shape[0]

    def _scaled(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.inputs.shape[1]:
            raise InvalidInputError(
                f"points have dimension {points.shape[1]}, model expects {self.inputs.shape[1]}"
            )
        return (points - self.input_lower) / self.input_range

    def _cross(self, points):
        ks = self.kernel(self._xs, self._scaled(points))
        v = linalg.solve_triangular(self.chol, ks, lower=True)
        return ks, v

    @property
    def _xs(self):
        return (self.inputs - self.input_lower) / self.input_range

    def predict(self, points):
        """Posterior means and variances at ``points`` (original units)."""
        ks, v = self._cross(points)
        mean = self.y_mean + self.y_scale * (ks.T @ self.alpha)
        var = self.kernel.variance - np.sum(v * v, axis=0)
        return mean, np.clip(var, 0.0, None) * self.y_scale**2

    def predict_cov(self, points_a, points_b=None):
        """Posterior cross-covariance ``k(A,B) - k(A,X) K^-1 k(X,B)``."""
        _, va = self._cross(points_a)
        if points_b is None:
            sa = self._scaled(points_a)
            cov = self.kernel(sa, sa) - va.T @ va
            cov = 0.5 * (cov + cov.T)
        else:
            _, vb = self._cross(points_b)
            cov = self.kernel(self._scaled(points_a), self._scaled(points_b)) - va.T @ vb
        return cov * self.y_scale**2

    def log_marginal_likelihood(self):
        """Log marginal likelihood of the normalized outputs."""
        z = (self.outputs - self.y_mean) / self.y_scale
        return float(-0.5 * z @ self.alpha - np.log(np.diag(self.chol)).sum()
                     - 0.5 * len(z) * np.log(2 * np.pi))

    def to_dict(self):
        return {
            "version": SERIAL_VERSION,
            "family": self.kernel.family,
            "lengthscales": self.kernel.lengthscales.tolist(),
            "variance": self.kernel.variance,
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "noise_vars": self.noise_vars.tolist(),
            "input_lower": self.input_lower.tolist(),
            "input_range": self.input_range.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("version") != SERIAL_VERSION:
            raise InvalidInputError(f"unsupported model version {data.get('version')!r}")
        kernel = Kernel(data["family"], data["lengthscales"], data["variance"])
        lower = np.asarray(data["input_lower"])
        bounds = np.column_stack([lower, lower + np.asarray(data["input_range"])])
        return make_model(kernel, data["inputs"], data["outputs"], data["noise_vars"],
                          input_bounds=bounds, y_mean=data["y_mean"], y_scale=data["y_scale"])


def _closest_pair(x):
    if len(x) < 2:
        return None
    d2 = _sqdist(x, x, np.ones(x.shape[1]))
    np.fill_diagonal(d2, np.inf)
    i, j = np.unravel_index(np.argmin(d2), d2.shape)
    return (int(min(i, j)), int(max(i, j)))


def _normalization(inputs, input_bounds):
    if input_bounds is None:
        lower, upper = inputs.min(0), inputs.max(0)
    else:
        bounds = np.asarray(input_bounds, dtype=float)
        lower, upper = bounds[:, 0], bounds[:, 1]
    rng = upper - lower
    return lower, np.where(rng > 0, rng, 1.0)


def _check_data(inputs, outputs, noise_vars):
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    outputs = np.asarray(outputs, dtype=float).ravel()
    n = inputs.shape[0]
    if outputs.shape[0] != n:
        raise InvalidInputError(f"{n} inputs but {outputs.shape[0]} outputs")
    if noise_vars is not None:
        noise_vars = np.broadcast_to(np.asarray(noise_vars, dtype=float), (n,)).copy()
        if np.any(noise_vars < 0):
            raise InvalidInputError("noise variances must be nonnegative")
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(outputs))):
        raise InvalidInputError("inputs and outputs must be finite")
    return inputs, outputs, noise_vars


def make_model(kernel, inputs, outputs, noise_vars, input_bounds=None, y_mean=0.0, y_scale=1.0):
    """Condition a GP with fixed hyperparameters on data.

    With the default ``y_mean=0, y_scale=1`` and unit ``input_bounds`` the
    model is exactly the textbook zero-mean GP with kernel ``kernel``.
    """
    inputs, outputs, noise_vars = _check_data(inputs, outputs, noise_vars)
    if noise_vars is None:
        noise_vars = np.zeros(len(outputs))
    if input_bounds is None:
        input_bounds = np.tile([0.0, 1.0], (inputs.shape[1], 1))
    exact = np.flatnonzero(noise_vars == 0)
    if exact.size > 1:
        # repeated noise-free inputs make K singular; jitter would hide it
        _, first, inverse = np.unique(inputs[exact], axis=0, return_index=True,
                                      return_inverse=True)
        inverse = inverse.ravel()
        dup = np.flatnonzero(first[inverse] != np.arange(exact.size))
        if dup.size:
            pair = (int(exact[first[inverse[dup[0]]]]), int(exact[dup[0]]))
            raise IllConditionedError(
                f"rows {pair} are identical noise-free inputs", pair=pair)
    lower, rng = _normalization(inputs, input_bounds)
    xs = (inputs - lower) / rng
    if kernel.lengthscales.shape[0] not in (1, xs.shape[1]):
        raise InvalidInputError("lengthscale count does not match input dimension")
    K = kernel(xs, xs) + np.diag(noise_vars / y_scale**2)
    chol, jitter = _cholesky_escalating(K, kernel.variance)
    if chol is None:
        pair = _closest_pair(inputs)
        raise IllConditionedError(
            f"covariance matrix is singular even with jitter; closest inputs are rows {pair}",
            pair=pair,
        )
    z = (outputs - y_mean) / y_scale
    alpha = linalg.cho_solve((chol, True), z)
    return GpModel(kernel, inputs, outputs, noise_vars, lower, rng, float(y_mean),
                   float(y_scale), chol, alpha, jitter)


def _neg_lml(theta, xs, z, family, fixed_noise):
    d = xs.shape[1]
    ls = np.exp(theta[:d])
    var = np.exp(theta[d])
    corr, dcorr = _correlation_and_grads(family, xs, ls)
    n = len(z)
    if fixed_noise is None:
        nugget = np.exp(theta[d + 1])
        noise = np.full(n, nugget)
    else:
        noise = fixed_noise
    K = var * corr + np.diag(noise)
    chol, _ = _cholesky_escalating(K, var)
    if chol is None:
        return 1e10, np.zeros_like(theta)
    alpha = linalg.cho_solve((chol, True), z)
    lml = -0.5 * z @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - linalg.cho_solve((chol, True), np.eye(n))
    grad = np.empty_like(theta)
    for j in range(d):
        grad[j] = 0.5 * np.sum(W * (var * dcorr[j]))
    grad[d] = 0.5 * np.sum(W * (var * corr))
    if fixed_noise is None:
        grad[d + 1] = 0.5 * np.trace(W) * nugget
    return -lml, -grad


def fit(inputs, outputs, noise_vars=None, kernel_family="matern-5/2", config=None,
        input_bounds=None):
    """Fit hyperparameters by multi-start maximum likelihood.

    Parameters
    ----------
    inputs : array, shape (n, d)
    outputs : array, shape (n,)
    noise_vars : array, shape (n,), optional
        Known per-observation noise variances.  When omitted a homoskedastic
        nugget is estimated jointly with the kernel hyperparameters.
    kernel_family : str
    config : FitConfig, optional
    input_bounds : array, shape (d, 2), optional
        Box used to rescale inputs to the unit cube; defaults to the data range.

    Returns
    -------
    GpModel
    """
    config = config or FitConfig()
    inputs, outputs, noise_vars = _check_data(inputs, outputs, noise_vars)
    if inputs.shape[0] < 2:
        raise InvalidInputError("at least two observations are required")
    if kernel_family not in KERNEL_FAMILIES:
        raise InvalidInputError(f"unknown kernel family {kernel_family!r}")
    lower, rng = _normalization(inputs, input_bounds)
    xs = (inputs - lower) / rng
    y_mean = float(outputs.mean())
    y_scale = float(outputs.std())
    if not y_scale > 1e-12 * max(1.0, abs(y_mean)):
        y_scale = 1.0
    z = (outputs - y_mean) / y_scale
    fixed = None if noise_vars is None else noise_vars / y_scale**2

    d = xs.shape[1]
    bounds = [tuple(np.log(config.lengthscale_bounds))] * d
    bounds.append(tuple(np.log(config.variance_bounds)))
    if fixed is None:
        bounds.append(tuple(np.log(config.nugget_bounds)))
    bounds = np.array(bounds)
    starts = [np.clip(np.r_[np.full(d, np.log(0.3)), 0.0, np.log(1e-3)][: len(bounds)],
                      bounds[:, 0], bounds[:, 1])]
    gen = np.random.default_rng(config.seed)
    for _ in range(max(config.n_restarts - 1, 0)):
        starts.append(gen.uniform(bounds[:, 0], bounds[:, 1]))

    best = None
    for x0 in starts:
        res = optimize.minimize(_neg_lml, x0, args=(xs, z, kernel_family, fixed), jac=True,
                                method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": config.maxiter})
        if best is None or res.fun < best.fun:
            best = res
    theta = best.x
    kernel = Kernel(kernel_family, np.exp(theta[:d]), np.exp(theta[d]))
    if noise_vars is None:
        noise_vars = np.full(len(z), np.exp(theta[d + 1]) * y_scale**2)
    return make_model(kernel, inputs, outputs, noise_vars, input_bounds=np.column_stack(
        [lower, lower + rng]), y_mean=y_mean, y_scale=y_scale)


def predict(model, points):
    return model.predict(points)


def predict_cov(model, points_a, points_b=None):
    return model.predict_cov(points_a, points_b)


@dataclass(frozen=True)
class MultiGp:
    """Independent GP models, one per objective, sharing the same design."""

    models: tuple

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise InvalidInputError("at least one model is required")
        ref = models[0].inputs
        for m in models[1:]:
            if m.inputs.shape != ref.shape or not np.array_equal(m.inputs, ref):
                raise InvalidInputError("all models must share the same inputs")
        object.__setattr__(self, "models", models)

    @property
    def p(self):
        return len(self.models)

    def predict(self, points):
        """Means and variances, each of shape (n_points, p)."""
        out = [m.predict(points) for m in self.models]
        return np.column_stack([o[0] for o in out]), np.column_stack([o[1] for o in out])

    def to_json(self):
        return json.dumps({"version": SERIAL_VERSION,
                           "models": [m.to_dict() for m in self.models]})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if data.get("version") != SERIAL_VERSION:
            raise InvalidInputError(f"unsupported container version {data.get('version')!r}")
        return cls(tuple(GpModel.from_dict(m) for m in data["models"]))


def fit_multi(inputs, outputs, noise_vars=None, kernel_family="matern-5/2", config=None,
              input_bounds=None):
    """Fit one GP per column of ``outputs`` (shape (n, p))."""
    config = config or FitConfig()
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    p = outputs.shape[1]
    seeds = np.random.SeedSequence(config.seed).generate_state(p)
    models = []
    for i in range(p):
        cfg = FitConfig(config.n_restarts, int(seeds[i]), config.lengthscale_bounds,
                        config.variance_bounds, config.nugget_bounds, config.maxiter)
        nv = None if noise_vars is None else np.asarray(noise_vars, dtype=float)[:, i]
        models.append(fit(inputs, outputs[:, i], nv, kernel_family, cfg, input_bounds))
    return MultiGp(tuple(models))


def observation_dist(multi, point, obs_noise_vars):
    """Predictive distribution of a noisy observation of all objectives at ``point``."""
    tau2 = np.broadcast_to(np.asarray(obs_noise_vars, dtype=float), (multi.p,))
    mean, var = multi.predict(np.atleast_2d(point))
    return GaussianSpec(mean[0], np.diag(var[0] + tau2))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Joint posterior draws of all objectives over a finite point set.

    ``draws`` has shape (M, N_sim, p).  ``sim_points`` are grid indices when
    the ensemble was simulated on a strategy grid.
    """

    sim_points: np.ndarray
    coords: np.ndarray
    draws: np.ndarray
    seed: object = None

    @property
    def size(self):
        return self.draws.shape[0]


def simulate_paths(multi, points, M, seed=None, indices=None):
    """Draw ``M`` joint conditional simulations over ``points``.

    Parameters
    ----------
    multi : MultiGp
    points : array, shape (N_sim, d)
    M : int
    seed : int, optional
    indices : array of int, optional
        Grid indices of ``points``, stored on the ensemble.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_sim = points.shape[0]
    if n_sim > MAX_SIM_POINTS:
        raise UnsupportedSizeError(
            f"{n_sim} simulation points exceed the limit of {MAX_SIM_POINTS}"
        )
    streams = np.random.SeedSequence(seed).spawn(multi.p)
    draws = np.empty((M, n_sim, multi.p))
    for i, model in enumerate(multi.models):
        mean, _ = model.predict(points)
        cov = model.predict_cov(points)
        try:
            factor = sqrt_factor(cov)
        except NumericalError as exc:
            raise NumericalError(
                f"cannot factorize the {n_sim}x{n_sim} posterior covariance of objective {i}; "
                "try fewer simulation points"
            ) from exc
        z = np.random.default_rng(streams[i]).standard_normal((M, n_sim))
        draws[:, :, i] = mean + z @ factor.T
    if indices is None:
        indices = np.arange(n_sim)
    return PathEnsemble(np.asarray(indices), points, draws, seed)


def _find_row(coords, x):
    hits = np.flatnonzero(np.all(coords == x, axis=1))
    return int(hits[0]) if hits.size else None


def _draws_at_new_site(ensemble, model, i, x, rng):
    # sample Y(x) jointly with the existing draws: Y(x) | Y(X_sim)
    c_ss = model.predict_cov(ensemble.coords)
    c_xs = model.predict_cov(x, ensemble.coords)[0]
    mean_s, _ = model.predict(ensemble.coords)
    mean_x, var_x = model.predict(x)
    chol, _ = _cholesky_escalating(c_ss, max(model.prior_variance, 1e-300))
    if chol is None:
        raise NumericalError("cannot factorize simulation covariance")
    w = linalg.cho_solve((chol, True), c_xs)
    resid = ensemble.draws[:, :, i] - mean_s
    cond_var = max(var_x[0] - c_xs @ w, 0.0)
    return mean_x[0] + resid @ w + np.sqrt(cond_var) * rng.standard_normal(ensemble.size)


def update_weights(multi, x, coords, obs_noise_vars):
    """Per-objective kriging weights ``lambda_i(x)`` over ``coords``.

    Returns an array of shape (N_sim, p); a column is zero when the site is
    already known exactly for that objective.
    """
    x = np.atleast_2d(x)
    tau2 = np.broadcast_to(np.asarray(obs_noise_vars, dtype=float), (multi.p,))
    lam = np.zeros((coords.shape[0], multi.p))
    for i, model in enumerate(multi.models):
        _, var = model.predict(x)
        if tau2[i] == 0.0 and var[0] <= DEGENERATE_VARIANCE * model.prior_variance:
            continue
        lam[:, i] = model.predict_cov(x, coords)[0] / (var[0] + tau2[i])
    return lam


def foxy_update(ensemble, multi, x_new, f_new, obs_noise_vars, seed=None):
    """Turn base draws into draws conditioned on one more observation.

    Each draw is shifted by ``lambda(x) * (f_new - Y(x_new))`` where
    ``lambda(x) = k_n(x, X_sim) / (k_n(x, x) + tau^2)``.  When ``x_new`` is not
    one of the ensemble's points its draw values are simulated conditionally
    on the ensemble first (seeded by ``seed``).
    """
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    f_new = np.broadcast_to(np.asarray(f_new, dtype=float), (multi.p,))
    tau2 = np.broadcast_to(np.asarray(obs_noise_vars, dtype=float), (multi.p,))
    for i, model in enumerate(multi.models):
        _, var = model.predict(x_new)
        if tau2[i] == 0.0 and var[0] <= DEGENERATE_VARIANCE * model.prior_variance:
            raise DegenerateUpdateError(
                f"objective {i} is already known exactly at the update point"
            )
    lam = update_weights(multi, x_new, ensemble.coords, tau2)
    row = _find_row(ensemble.coords, x_new[0])
    rng = np.random.default_rng(seed)
    new = ensemble.draws.copy()
    for i, model in enumerate(multi.models):
        if row is not None:
            at_x = ensemble.draws[:, row, i]
        else:
            at_x = _draws_at_new_site(ensemble, model, i, x_new, rng)
        new[:, :, i] += (f_new[i] - at_x)[:, None] * lam[None, :, i]
    return PathEnsemble(ensemble.sim_points, ensemble.coords, new, ensemble.seed)
