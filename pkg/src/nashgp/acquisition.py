"""Acquisition functions and subset-selection scores.

``prob_equilibrium`` is the posterior probability that a grid point is a
pure Nash equilibrium.  ``sur_criterion`` is the expected residual
uncertainty (determinant of the covariance of simulated equilibria) after
one more observation, estimated with updated conditional simulations.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import InvalidInputError
from .game import equilibrium_points
from .gp import update_weights
from .mvn import mvn_cdf_at_zero_batch, sqrt_factor

SIGMA_FLOOR = 1e-12
# alternatives whose pairwise win bound is below this get probability 0
PRUNE_BOUND = 1e-9
# orthant problems per batched CDF call
_CDF_BATCH = 512


@dataclass
class AcquisitionConfig:
    """Sizes of the Monte-Carlo pieces of the acquisition functions.

    ``M`` draws of the objectives and ``K`` draws of the new observation for
    the SUR estimate, ``R`` samples per slice for the Monte-Carlo branch of
    the equilibrium probability, used once a player has more than
    ``cdf_switch`` alternatives.
    """

    M: int = 20
    K: int = 20
    R: int = 512
    cdf_switch: int = 20
    n_sim: int = 1296
    n_cand: int = 256
    cdf_accuracy: float = 1e-3

    def __post_init__(self):
        for name in ("M", "K", "R", "n_sim", "n_cand"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.cdf_switch < 0:
            raise InvalidInputError("cdf_switch must be nonnegative")
        if self.n_cand > self.n_sim:
            raise InvalidInputError("n_cand cannot exceed n_sim")


@dataclass(frozen=True)
class EquilibriumTarget:
    """A target point and a box in objective space."""

    target: np.ndarray
    box_low: np.ndarray
    box_high: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.box_low, dtype=float)
        hi = np.asarray(self.box_high, dtype=float)
        if np.any(lo > hi):
            raise InvalidInputError("empty box: box_low exceeds box_high")
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        object.__setattr__(self, "box_low", lo)
        object.__setattr__(self, "box_high", hi)


def slice_members(grid, player):
    """Flat indices of every slice along ``player``, shape (N / m_i, m_i).

    Row ``s`` lists the grid points sharing one opponent profile, ordered by
    the player's own action index.
    """
    idx = np.arange(grid.N).reshape(grid.shape)
    return np.moveaxis(idx, player, -1).reshape(-1, grid.shape[player])


def _difference_operator(m, own):
    # rows e_own - e_j for j != own
    D = -np.eye(m)
    D[:, own] += 1.0
    return np.delete(D, own, axis=0)


def _exact_problems(mean, cov, members):
    """Difference-vector Gaussians of the alternatives that survive pruning.

    Returns the surviving members and their stacked means and covariances;
    pruned members have probability 0.
    """
    m = mean.shape[0]
    # P(own is min) <= min_j P(own <= j); skip the CDF when that is negligible
    var = np.diag(cov)
    gap_sd = np.sqrt(np.clip(var[:, None] + var[None] - 2 * cov, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (mean[None] - mean[:, None]) / gap_sd
    z = np.where(gap_sd > 0, z, np.where(mean[None] >= mean[:, None], np.inf, -np.inf))
    np.fill_diagonal(z, np.inf)
    bound = ndtr(z.min(axis=1))
    keep = [l for l in members if bound[l] >= PRUNE_BOUND]
    if not keep:
        return keep, np.zeros((0, m - 1)), np.zeros((0, m - 1, m - 1))
    D = np.stack([_difference_operator(m, l) for l in keep])
    means = D @ mean
    covs = D @ cov @ np.swapaxes(D, 1, 2)
    return keep, means, covs


def _orthant_probabilities(means, covs, cfg):
    out = np.empty(means.shape[0])
    for lo in range(0, means.shape[0], _CDF_BATCH):
        out[lo:lo + _CDF_BATCH] = mvn_cdf_at_zero_batch(
            means[lo:lo + _CDF_BATCH], covs[lo:lo + _CDF_BATCH], cfg.cdf_accuracy)[0]
    return out


def slice_probabilities(mean, cov, cfg, rng, members=None):
    """Probability that each alternative attains the slice minimum.

    Parameters
    ----------
    mean : array, shape (m,)
    cov : array, shape (m, m)
        Posterior mean and covariance of one objective along one slice.
    members : sequence of int, optional
        Alternatives to evaluate (all by default).
    """
    m = mean.shape[0]
    members = list(range(m) if members is None else members)
    if m == 1:
        return np.ones(len(members))
    if m - 1 <= cfg.cdf_switch:
        keep, means, covs = _exact_problems(mean, cov, members)
        found = dict(zip(keep, _orthant_probabilities(means, covs, cfg)))
        return np.array([found.get(l, 0.0) for l in members])
    # one shared sample batch per slice
    samples = mean + rng.standard_normal((cfg.R, m)) @ sqrt_factor(cov).T
    wins = samples == samples.min(axis=1, keepdims=True)
    freq = wins.mean(axis=0)
    return freq[members]


def player_probabilities(model, grid, player, cfg, seed=0, points=None):
    """``P_i`` at every grid point for objective/player ``player``."""
    rng = np.random.default_rng(seed)
    coords = grid.points() if points is None else points
    means, _ = model.predict(coords)
    out = np.zeros(grid.N)
    m = grid.shape[player]
    if m == 1:
        return np.ones(grid.N)
    rows = slice_members(grid, player)
    if m - 1 > cfg.cdf_switch:
        for row in rows:
            out[row] = slice_probabilities(means[row], model.predict_cov(coords[row]), cfg, rng)
        return out
    # exact branch: gather every surviving alternative of every slice, then batch
    targets, all_means, all_covs = [], [], []
    for row in rows:
        keep, mu, cov = _exact_problems(means[row], model.predict_cov(coords[row]), range(m))
        targets.extend(row[keep])
        all_means.append(mu)
        all_covs.append(cov)
    if targets:
        out[np.asarray(targets)] = _orthant_probabilities(
            np.concatenate(all_means), np.concatenate(all_covs), cfg)
    return out


def prob_equilibrium_grid(multi, grid, cfg, seed=0):
    """Equilibrium probability of every point of ``grid``, shape (N,)."""
    coords = grid.points()
    seeds = np.random.SeedSequence(seed).generate_state(grid.p)
    pe = np.ones(grid.N)
    for i in range(grid.p):
        pe *= player_probabilities(multi.models[i], grid, i, cfg, int(seeds[i]), coords)
    return np.clip(pe, 0.0, 1.0)


def prob_equilibrium(multi, grid, x_index, cfg, seed=0):
    """Equilibrium probability of one grid point.

    The product over players of the probability that the point's own action
    minimizes that player's objective along its slice.
    """
    tup = grid.unravel(np.atleast_1d(x_index))[0]
    seeds = np.random.SeedSequence(seed).generate_state(grid.p)
    pe = 1.0
    for i in range(grid.p):
        rng = np.random.default_rng(int(seeds[i]))
        others = list(tup)
        others[i] = slice(None)
        row = np.arange(grid.N).reshape(grid.shape)[tuple(others)]
        c = grid.points(row)
        mean, _ = multi.models[i].predict(c)
        cov = multi.models[i].predict_cov(c)
        pe *= slice_probabilities(mean, cov, cfg, rng, members=[int(tup[i])])[0]
    return float(np.clip(pe, 0.0, 1.0))


def gamma_hat(points):
    """Determinant of the sample covariance of equilibrium points.

    Rows containing NaN (draws without an equilibrium) are dropped; fewer
    than two remaining rows give 0.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    pts = pts[~np.isnan(pts).any(axis=1)]
    if pts.shape[0] < 2:
        return 0.0
    q = np.atleast_2d(np.cov(pts, rowvar=False, ddof=1))
    return float(max(np.linalg.det(q), 0.0))


def gamma_hat_batch(points):
    """``gamma_hat`` of each leading slice of ``points``, shape (K, M, p).

    Equal to ``[gamma_hat(points[k]) for k in range(K)]``.
    """
    pts = np.asarray(points, dtype=float)
    ok = ~np.isnan(pts).any(axis=-1)
    n = ok.sum(axis=1)
    filled = np.where(ok[..., None], pts, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = filled.sum(axis=1) / n[:, None]
        dev = np.where(ok[..., None], pts - mu[:, None], 0.0)
        cov = np.einsum("kmi,kmj->kij", dev, dev) / (n - 1)[:, None, None]
    out = np.zeros(pts.shape[0])
    good = n >= 2
    if np.any(good):
        out[good] = np.clip(np.linalg.det(cov[good]), 0.0, None)
    return out


def sur_criterion(multi, ensemble, sim_shape, x_pos, cfg, seed=0, obs_noise_vars=0.0,
                  xi=None):
    """Expected residual equilibrium uncertainty after observing ``x_pos``.

    Parameters
    ----------
    multi : MultiGp
    ensemble : PathEnsemble
        Base draws on a factorial set of shape ``sim_shape``.
    x_pos : int
        Position of the candidate inside the ensemble points.
    cfg : AcquisitionConfig
    seed : int
        Seeds the K standard-normal observation draws when ``xi`` is None.
    obs_noise_vars : float or array of p floats
    xi : array, shape (K, p), optional
        Standard-normal draws shared across candidates (common random numbers).

    Returns
    -------
    float
    """
    p = multi.p
    tau2 = np.broadcast_to(np.asarray(obs_noise_vars, dtype=float), (p,))
    if xi is None:
        xi = np.random.default_rng(seed).standard_normal((cfg.K, p))
    x = ensemble.coords[x_pos][None]
    mean, var = multi.predict(x)
    F = mean[0] + np.sqrt(var[0] + tau2) * xi
    lam = update_weights(multi, x, ensemble.coords, tau2)
    at_x = ensemble.draws[:, x_pos, :]
    shift = F[:, None, :] - at_x[None]
    updated = ensemble.draws[None] + shift[:, :, None, :] * lam[None, None]
    pts, _ = equilibrium_points(updated, sim_shape)
    return float(np.mean(gamma_hat_batch(pts)))


def _sd(var):
    return np.maximum(np.sqrt(np.clip(var, 0.0, None)), SIGMA_FLOOR)


def score_target(multi, points, target):
    """Posterior density of each point's objectives at ``target``."""
    mean, var = multi.predict(points)
    z = (np.asarray(target, dtype=float) - mean) / _sd(var)
    return np.prod(np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi), axis=1)


def score_box(multi, points, box_low, box_high):
    """Posterior probability that each point's objectives lie in the box."""
    mean, var = multi.predict(points)
    sd = _sd(var)
    hi = ndtr((np.asarray(box_high, dtype=float) - mean) / sd)
    lo = ndtr((np.asarray(box_low, dtype=float) - mean) / sd)
    return np.prod(np.clip(hi - lo, 0.0, None), axis=1)


def _per_player_count(target_size, p):
    k = max(1, int(round(target_size ** (1.0 / p))))
    while k**p < target_size:
        k += 1
    while k > 1 and (k - 1) ** p >= target_size:
        k -= 1
    return k


def select_subset(grid, scores, target_size, seed=0, forced=None):
    """Random factorial sub-grid favoring high-score actions.

    Each action gets the mean score of all grid points that use it.  Per
    player, the actions of the ``forced`` points and the top action are kept,
    and the others are sampled without replacement proportionally to their
    marginal score until ``k`` actions are kept, ``k`` being the smallest
    integer with ``k ** p >= target_size``.

    Parameters
    ----------
    grid : StrategyGrid
    scores : array, shape (N,)
        Nonnegative scores, not all zero.
    target_size : int
    seed : int
    forced : sequence of int, optional
        Flat indices whose actions must survive.  Their actions may push a
        player's count above ``k``.

    Returns
    -------
    (StrategyGrid, ndarray)
        The sub-grid and its points' flat indices in ``grid``.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (grid.N,):
        raise InvalidInputError("one score per grid point is required")
    if not np.all(np.isfinite(scores)) or np.any(scores < 0):
        raise InvalidInputError("scores must be finite and nonnegative")
    if target_size >= grid.N:
        return grid, np.arange(grid.N)
    if not np.any(scores > 0):
        raise InvalidInputError("scores are all zero")
    rng = np.random.default_rng(seed)
    k = _per_player_count(target_size, grid.p)
    nd = scores.reshape(grid.shape)
    kept = (grid.unravel(np.asarray(forced, dtype=int)) if forced is not None and len(forced)
            else np.zeros((0, grid.p), dtype=int))
    subsets = []
    for i in range(grid.p):
        axes = tuple(j for j in range(grid.p) if j != i)
        marg = nd.mean(axis=axes) if axes else nd
        m = grid.shape[i]
        must = np.unique(np.r_[int(np.argmax(marg)), kept[:, i]]).astype(int)
        rest = np.setdiff1d(np.arange(m), must)
        need = max(min(k, m) - must.size, 0)
        w = marg[rest]
        positive = rest[w > 0]
        if need == 0:
            picked = np.zeros(0, dtype=int)
        elif need <= positive.size:
            picked = rng.choice(rest, size=need, replace=False, p=w / w.sum())
        else:
            zeros = rest[w <= 0]
            picked = np.r_[positive, rng.choice(zeros, size=need - positive.size, replace=False)]
        subsets.append(np.sort(np.r_[must, picked]).astype(int))
    return grid.subgrid(subsets)
