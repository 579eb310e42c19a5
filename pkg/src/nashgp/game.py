"""Finite games on full-factorial strategy grids.

A grid point is addressed by a flat index in ``range(N)``, the C-order
ravel of the per-player action tuple ``(k_1, ..., k_p)``.  Coordinates are
only produced on demand, so grids with millions of points stay cheap.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, InvalidInputError

MAX_GRID_SIZE = 10**7


class StrategyGrid:
    """Cross product of per-player action sets.

    Parameters
    ----------
    per_player_actions : list of arrays
        The i-th entry has shape (m_i, d_i); each row is one action.
    bounds : array, shape (d, 2), optional
        Box used for rescaled distances; defaults to the action ranges.
    """

    def __init__(self, per_player_actions, bounds=None, max_size=MAX_GRID_SIZE):
        actions = []
        for i, a in enumerate(per_player_actions):
            a = np.asarray(a, dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            if a.ndim != 2 or a.shape[0] < 1:
                raise InvalidInputError(f"player {i} needs a nonempty (m_i, d_i) action array")
            if np.unique(a, axis=0).shape[0] != a.shape[0]:
                raise InvalidInputError(f"player {i} has duplicate actions")
            actions.append(a)
        if not actions:
            raise InvalidInputError("at least one player is required")
        self.actions = actions
        self.shape = tuple(a.shape[0] for a in actions)
        self.block_dims = tuple(a.shape[1] for a in actions)
        size = 1
        for m in self.shape:
            size *= m
        if size > max_size:
            raise InvalidInputError(f"grid size {size} exceeds the limit {max_size}")
        self.N = size
        self.p = len(actions)
        self.d = sum(self.block_dims)
        self._offsets = np.cumsum((0,) + self.block_dims)
        if bounds is None:
            lo = np.concatenate([a.min(0) for a in actions])
            hi = np.concatenate([a.max(0) for a in actions])
            bounds = np.column_stack([lo, hi])
        self.bounds = np.asarray(bounds, dtype=float).reshape(self.d, 2)

    def __repr__(self):
        return f"StrategyGrid(shape={self.shape}, block_dims={self.block_dims})"

    def block(self, i):
        """Slice of the coordinate vector owned by player ``i``."""
        return slice(self._offsets[i], self._offsets[i + 1])

    def unravel(self, indices):
        """Action tuples, shape (n, p), for flat indices."""
        indices = np.asarray(indices)
        if np.any(indices < 0) or np.any(indices >= self.N):
            raise InvalidInputError("grid index out of range")
        return np.stack(np.unravel_index(indices, self.shape), axis=-1)

    def ravel(self, tuples):
        tuples = np.asarray(tuples)
        return np.ravel_multi_index(tuple(np.moveaxis(tuples, -1, 0)), self.shape)

    def points(self, indices=None):
        """Coordinates, shape (n, d), of the given flat indices (all if None)."""
        if indices is None:
            indices = np.arange(self.N)
        tup = self.unravel(np.atleast_1d(indices))
        return np.concatenate([self.actions[i][tup[:, i]] for i in range(self.p)], axis=1)

    def rescale(self, x):
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        width = np.where(hi > lo, hi - lo, 1.0)
        return (np.asarray(x, dtype=float) - lo) / width

    def nearest(self, x):
        """Flat index of the grid point nearest to each row of ``x``.

        Distances are measured in rescaled coordinates; the squared distance
        splits over player blocks, so each block is matched independently.
        """
        xs = self.rescale(np.atleast_2d(x))
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        width = np.where(hi > lo, hi - lo, 1.0)
        tup = np.empty((xs.shape[0], self.p), dtype=int)
        for i in range(self.p):
            blk = self.block(i)
            acts = (self.actions[i] - lo[blk]) / width[blk]
            d2 = ((xs[:, None, blk] - acts[None]) ** 2).sum(-1)
            tup[:, i] = d2.argmin(1)
        return self.ravel(tup)

    def subgrid(self, action_subsets):
        """Factorial sub-grid keeping the listed actions of each player.

        Returns the new grid and, for each of its flat indices, the matching
        index in this grid.
        """
        subsets = [np.unique(np.asarray(s, dtype=int)) for s in action_subsets]
        if len(subsets) != self.p:
            raise InvalidInputError("one action subset per player is required")
        for i, s in enumerate(subsets):
            if s.size == 0 or s[0] < 0 or s[-1] >= self.shape[i]:
                raise InvalidInputError(f"invalid action subset for player {i}")
        sub = StrategyGrid([self.actions[i][s] for i, s in enumerate(subsets)], self.bounds)
        mesh = np.meshgrid(*subsets, indexing="ij")
        parent = np.ravel_multi_index(tuple(m.ravel() for m in mesh), self.shape)
        return sub, parent


@dataclass(frozen=True, eq=False)
class PayoffTensor:
    """Objective values at every grid point, shape (N, p).

    ``+inf`` entries are allowed (a profile that can never be a best
    response); NaN is rejected.
    """

    grid: StrategyGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.N, self.grid.p):
            raise InvalidInputError(
                f"values shape {values.shape} != ({self.grid.N}, {self.grid.p})"
            )
        if np.isnan(values).any():
            raise InvalidInputError("payoff values must not be NaN")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class NashOutcome:
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def exists(self):
        return self.indices.size > 0


def nash_mask(values, shape):
    """Boolean mask of pure Nash equilibria.

    Parameters
    ----------
    values : array, shape (..., N, p)
        Leading axes are batch axes (e.g. several simulated draws).
    shape : tuple of int
        Grid shape ``(m_1, ..., m_p)``.

    Returns
    -------
    array of bool, shape (..., N)
    """
    values = np.asarray(values)
    batch = values.shape[:-2]
    p = len(shape)
    nd = values.reshape(batch + tuple(shape) + (p,))
    nb = len(batch)
    mask = np.ones(batch + tuple(shape), dtype=bool)
    for i in range(p):
        col = nd[..., i]
        mins = col.min(axis=nb + i, keepdims=True)
        mask &= (col == mins) & np.isfinite(mins)
    return mask.reshape(batch + (-1,))


def nash_extract(tensor):
    """All pure Nash equilibria of a payoff tensor (possibly none)."""
    mask = nash_mask(tensor.values, tensor.grid.shape)
    idx = np.flatnonzero(mask)
    return NashOutcome(idx, tensor.values[idx])


def equilibrium_points(draws, shape):
    """Representative equilibrium value of each draw.

    Parameters
    ----------
    draws : array, shape (..., N, p)

    Returns
    -------
    points : array, shape (..., p)
        Componentwise mean of the draw's equilibrium values; NaN rows where
        the draw has no pure equilibrium.
    counts : array of int, shape (...)
    """
    draws = np.asarray(draws, dtype=float)
    batch = draws.shape[:-2]
    p = draws.shape[-1]
    mask = nash_mask(draws, shape)
    counts = mask.sum(-1)
    # equilibria are sparse: accumulate only the flagged entries
    flat = mask.reshape(-1, mask.shape[-1])
    rows, cols = np.nonzero(flat)
    vals = draws.reshape(-1, draws.shape[-2], p)[rows, cols]
    sums = np.zeros((flat.shape[0], p))
    np.add.at(sums, rows, vals)
    with np.errstate(invalid="ignore", divide="ignore"):
        points = sums.reshape(batch + (p,)) / counts[..., None]
    points[counts == 0] = np.nan
    return points, counts


def best_response(tensor, player, opponents_index, tol=0.0):
    """Minimizing own actions of ``player`` against fixed opponents.

    ``opponents_index`` lists the action indices of the other players in
    player order, skipping ``player`` itself.  Actions within ``tol`` of the
    minimum count as minimizing.
    """
    grid = tensor.grid
    if not 0 <= player < grid.p:
        raise InvalidInputError(f"player {player} out of range")
    opp = list(opponents_index)
    if len(opp) != grid.p - 1:
        raise InvalidInputError(f"expected {grid.p - 1} opponent indices")
    others = [j for j in range(grid.p) if j != player]
    for j, k in zip(others, opp):
        if not 0 <= k < grid.shape[j]:
            raise InvalidInputError(f"action {k} out of range for player {j}")
    nd = tensor.values[:, player].reshape(grid.shape)
    idx = list(opp)
    idx.insert(player, slice(None))
    col = nd[tuple(idx)]
    if not np.isfinite(col.min()):
        return set()
    return {int(k) for k in np.flatnonzero(col <= col.min() + tol)}


def write_tensor_csv(path, tensor):
    """Write ``index, a_1..a_p, y_1..y_p`` rows."""
    grid = tensor.grid
    tup = grid.unravel(np.arange(grid.N))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"a_{i + 1}" for i in range(grid.p)]
                   + [f"y_{i + 1}" for i in range(grid.p)])
        for n in range(grid.N):
            w.writerow([n, *tup[n].tolist(), *[repr(float(v)) for v in tensor.values[n]]])


def read_tensor_csv(path, grid):
    values = np.full((grid.N, grid.p), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            values[int(row[0])] = [float(v) for v in row[1 + grid.p:]]
    return PayoffTensor(grid, values)


@dataclass
class InnerSolverConfig:
    """Finite-difference projected gradient descent for best responses."""

    max_iter: int = 50
    fd_step: float = 1e-6
    armijo: float = 1e-4
    min_step: float = 1e-12
    xtol: float = 1e-7


@dataclass
class FixedPointResult:
    x: np.ndarray
    evaluations: int
    converged: bool
    iterations: int
    trajectory: list = field(default_factory=list)


class _CountingObjective:
    def __init__(self, objective):
        self.objective = objective
        self.count = 0

    def __call__(self, x, context):
        self.count += 1
        y = np.asarray(self.objective(x), dtype=float)
        if not np.all(np.isfinite(y)):
            raise EvaluationError(f"non-finite objective {y} at x={x} ({context})")
        return y


def _best_response_continuous(f, player, x, blk, lo, hi, cfg, context):
    """Minimize y_player over block ``blk`` with the others fixed at ``x``."""
    width = np.where(hi > lo, hi - lo, 1.0)
    u = x[blk].copy()

    def g(v):
        z = x.copy()
        z[blk] = v
        return f(z, context)[player]

    fu = g(u)
    step = 0.1
    for _ in range(cfg.max_iter):
        h = cfg.fd_step * width
        grad = np.empty_like(u)
        for j in range(u.size):
            e = np.zeros_like(u)
            e[j] = h[j]
            grad[j] = (g(np.clip(u + e, lo, hi)) - g(np.clip(u - e, lo, hi))) / (
                np.clip(u + e, lo, hi)[j] - np.clip(u - e, lo, hi)[j])
        # gradient scaled to the unit box so one step size fits every block
        sgrad = grad * width
        if not np.any(sgrad):
            break
        t = min(2.0 * step, 1.0)
        while True:
            cand = np.clip(u - t * sgrad * width / max(np.linalg.norm(sgrad), 1e-300), lo, hi)
            moved = cand - u
            fc = g(cand)
            if fc <= fu + cfg.armijo * grad @ moved:
                break
            t *= 0.5
            if t < cfg.min_step:
                cand, fc = u, fu
                break
        step = t
        done = np.max(np.abs(cand - u) / width) < cfg.xtol
        u, fu = cand, fc
        if done:
            break
    return u


def fixed_point_solve(objective, bounds, block_dims, x0, alpha=0.5, k_max=100, tol=1e-5,
                      inner=None):
    """Relaxed best-response iteration for continuous games.

    Parameters
    ----------
    objective : callable
        ``objective(x) -> array of p costs`` on the box.
    bounds : array, shape (d, 2)
    block_dims : sequence of int
        Number of coordinates owned by each player.
    x0 : array, shape (d,)
    alpha : float
        Relaxation factor in (0, 1).
    k_max : int
        Maximum number of outer iterations.
    tol : float
        Stop once the rescaled step norm falls below ``tol``.
    inner : InnerSolverConfig, optional

    Returns
    -------
    FixedPointResult
        ``evaluations`` counts every objective call, finite-difference probes
        included.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError("alpha must lie in (0, 1)")
    inner = inner or InnerSolverConfig()
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    width = np.where(hi > lo, hi - lo, 1.0)
    offsets = np.cumsum((0,) + tuple(block_dims))
    blocks = [slice(offsets[i], offsets[i + 1]) for i in range(len(block_dims))]
    f = _CountingObjective(objective)
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    traj = [x.copy()]
    for k in range(k_max):
        z = x.copy()
        for i, blk in enumerate(blocks):
            z[blk] = _best_response_continuous(f, i, x, blk, lo[blk], hi[blk], inner,
                                               f"outer iteration {k}, player {i}")
        x_new = alpha * z + (1.0 - alpha) * x
        traj.append(x_new.copy())
        step = np.linalg.norm((x_new - x) / width)
        x = x_new
        if step <= tol:
            return FixedPointResult(x, f.count, True, k + 1, traj)
    return FixedPointResult(x, f.count, False, k_max, traj)
