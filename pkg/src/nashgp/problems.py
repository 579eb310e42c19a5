"""Benchmark games.

* ``p1``: two-player, two-variable game built from Branin-type costs.
* ``diffgame``: four players steering a planar state with spline controls.
* ``quadratic``: random coupled quadratic game with a linear-algebra NE,
  optionally with additive Gaussian noise.
"""

import shlex
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.stats import qmc

from .errors import EvaluationError, InvalidInputError
from .game import StrategyGrid


@dataclass
class GameProblem:
    """A vector cost function on a box, one cost per player.

    ``evaluate`` maps an array of shape (n, d) to shape (n, p) and must be
    deterministic; observation noise is added by :meth:`observe`.
    """

    name: str
    block_dims: tuple
    bounds: np.ndarray
    evaluate: object
    noise_sd: np.ndarray = None
    nash: np.ndarray = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.block_dims = tuple(int(b) for b in self.block_dims)
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        if self.bounds.shape[0] != self.d:
            raise InvalidInputError("bounds do not match the block dimensions")
        if self.noise_sd is not None:
            self.noise_sd = np.broadcast_to(np.asarray(self.noise_sd, dtype=float),
                                            (self.p,)).copy()

    @property
    def d(self):
        return sum(self.block_dims)

    @property
    def p(self):
        return len(self.block_dims)

    @property
    def noisy(self):
        return self.noise_sd is not None and bool(np.any(self.noise_sd > 0))

    def __call__(self, x):
        """Noise-free costs at a single point, shape (p,)."""
        return np.asarray(self.evaluate(np.atleast_2d(x)), dtype=float)[0]

    def observe(self, x, rng=None):
        """Costs at the rows of ``x`` with additive noise when configured."""
        y = np.asarray(self.evaluate(np.atleast_2d(x)), dtype=float)
        if self.noisy:
            y = y + np.random.default_rng(rng).standard_normal(y.shape) * self.noise_sd
        return y


# --------------------------------------------------------------------------- P1

P1_BOUNDS = np.array([[-5.0, 10.0], [0.0, 15.0]])
P1_NASH = np.array([-3.786, 15.0])


def p1_evaluate(x1, x2):
    """The two P1 costs; arrays broadcast."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    b = 5.1 * (x1 / (2 * np.pi)) ** 2
    c = (1 - 1 / (8 * np.pi)) * np.cos(x1) + 1
    y1 = (x2 - b + 5 / np.pi * x1 - 6) ** 2 + 10 * c
    rad = (10.5 - x1) * (x1 + 5.5) * (x2 + 0.5)
    if np.any(rad < 0):
        raise EvaluationError("negative radicand in P1 second cost; input outside the box")
    y2 = -np.sqrt(rad) - (x2 - b - 6) ** 2 / 30 - c / 3
    return y1, y2


def p1_problem():
    def evaluate(x):
        y1, y2 = p1_evaluate(x[:, 0], x[:, 1])
        return np.column_stack([y1, y2])

    return GameProblem("p1", (1, 1), P1_BOUNDS, evaluate, nash=P1_NASH.copy())


# ------------------------------------------------------------ differential game


@dataclass
class DifferentialGameSpec:
    """Open-loop game: ``z' = v0 + sum_i exp(-theta_i t) x_i(t)``, ``z(0) = z0``."""

    T: float = 4.0
    steps: int = 40
    v0: tuple = (0.0, 0.0)
    z0: tuple = (0.0, 0.5)
    targets: tuple = ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0))
    thetas: tuple = (0.25, 0.0, 0.5, 0.0)
    kappa: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.kappa < 1:
            raise InvalidInputError("steps and kappa must be at least 1")
        if len(self.targets) != len(self.thetas):
            raise InvalidInputError("one target and one theta per player")

    @property
    def p(self):
        return len(self.thetas)

    @property
    def d(self):
        return 2 * self.kappa * self.p


def spline_basis(kappa, s):
    """Order-``kappa`` B-spline basis on [0, 1] without interior knots.

    Returns shape (len(s), kappa); kappa=1 is the constant function.
    """
    s = np.asarray(s, dtype=float)
    if kappa == 1:
        return np.ones((s.size, 1))
    knots = np.r_[np.zeros(kappa), np.ones(kappa)]
    return BSpline.design_matrix(np.clip(s, 0.0, 1.0), knots, kappa - 1).toarray()


def diffgame_evaluate(spec, x):
    """Player costs ``0.5 |z(T) - target_i|^2 + 0.5 |x_i|^2_{L2(0,T)}``.

    Parameters
    ----------
    spec : DifferentialGameSpec
    x : array, shape (n, d) or (d,)
        Player i owns ``(a_1..a_kappa, b_1..b_kappa)`` at offset ``2 kappa i``.

    Returns
    -------
    array, shape (n, p)
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.d:
        raise InvalidInputError(f"expected {spec.d} decision variables, got {x.shape[1]}")
    n, p, kap = x.shape[0], spec.p, spec.kappa
    dt = spec.T / spec.steps
    t = dt * np.arange(spec.steps)
    basis = spline_basis(kap, t / spec.T)  # (steps, kappa)
    coef = x.reshape(n, p, 2, kap)
    controls = np.einsum("npck,sk->npsc", coef, basis)  # (n, p, steps, 2)
    decay = np.exp(-np.outer(spec.thetas, t))  # (p, steps)
    drift = np.asarray(spec.v0) + np.einsum("ps,npsc->nsc", decay, controls)
    zT = np.asarray(spec.z0) + dt * drift.sum(1)
    targets = np.asarray(spec.targets, dtype=float)
    miss = 0.5 * ((zT[:, None, :] - targets[None]) ** 2).sum(-1)
    energy = 0.5 * dt * (controls**2).sum(axis=(2, 3))
    return miss + energy


def diffgame_problem(spec=None, box=6.0):
    spec = spec or DifferentialGameSpec()
    bounds = np.tile([-box, box], (spec.d, 1))
    return GameProblem("diffgame", (2 * spec.kappa,) * spec.p, bounds,
                       lambda x: diffgame_evaluate(spec, x), params={"spec": spec})


# ------------------------------------------------------------- quadratic game


def quadratic_game(p=2, block_dims=None, seed=0, noise_sd=None, coupling=0.4, box=1.0,
                   max_retries=20):
    """Random quadratic game ``y_i = x_i'A_i x_i / 2 + x_i'B_i x_-i + c_i'x_i``.

    ``A_i`` is symmetric positive definite, so each player's problem is
    strictly convex and the NE solves the stacked first-order system
    ``G x = -c``.  The NE is drawn inside the middle half of the box, and
    ``coupling`` bounds the spectral norm of ``A_i^-1 B_i``.
    """
    block_dims = tuple(block_dims or (1,) * p)
    if len(block_dims) != p:
        raise InvalidInputError("one block dimension per player")
    d = sum(block_dims)
    offsets = np.cumsum((0,) + block_dims)
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        G = np.zeros((d, d))
        for i, di in enumerate(block_dims):
            blk = slice(offsets[i], offsets[i + 1])
            q = np.linalg.qr(rng.standard_normal((di, di)))[0]
            A = q @ np.diag(rng.uniform(1.0, 3.0, di)) @ q.T
            others = [j for j in range(d) if not offsets[i] <= j < offsets[i + 1]]
            B = rng.standard_normal((di, len(others)))
            if B.size:
                scale = np.linalg.norm(np.linalg.solve(A, B), 2)
                B *= coupling / scale
            G[blk, blk] = A
            G[blk, others] = B
        if abs(np.linalg.det(G)) > 1e-8:
            break
    else:
        raise InvalidInputError("could not draw a nonsingular quadratic game")
    target = rng.uniform(-0.5 * box, 0.5 * box, d)
    c = -G @ target
    nash = np.linalg.solve(G, -c)
    blocks = [slice(offsets[i], offsets[i + 1]) for i in range(p)]

    def evaluate(x):
        out = np.empty((x.shape[0], p))
        for i, blk in enumerate(blocks):
            xi = x[:, blk]
            # x_i'(A_i x_i + B_i x_-i) - x_i'A_i x_i / 2 + c_i'x_i
            coupled = np.einsum("nj,jk,nk->n", xi, G[blk], x)
            own = np.einsum("nj,jk,nk->n", xi, G[blk, blk], xi)
            out[:, i] = coupled - 0.5 * own + xi @ c[blk]
        return out

    bounds = np.tile([-box, box], (d, 1))
    return GameProblem("quadratic", block_dims, bounds, evaluate, noise_sd=noise_sd,
                       nash=nash, params={"G": G, "c": c})


def quadratic_gradients(problem, x):
    """Own-block gradients ``A_i x_i + B_i x_-i + c_i`` stacked, shape (d,)."""
    return problem.params["G"] @ x + problem.params["c"]


# ------------------------------------------------------------- external problem


class ExternalProblem:
    """Costs computed by an external program speaking a line protocol.

    The program reads ``x_1 ... x_d`` lines on stdin and answers each with
    a ``y_1 ... y_p`` line on stdout.
    """

    def __init__(self, command, p):
        self.p = p
        self._lock = threading.Lock()
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)

    def __call__(self, x):
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], self.p))
        with self._lock:
            for n, row in enumerate(x):
                self._proc.stdin.write(" ".join(repr(float(v)) for v in row) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
                if not line:
                    raise EvaluationError("external problem closed its output")
                vals = line.split()
                if len(vals) != self.p:
                    raise EvaluationError(f"expected {self.p} values, got {line.strip()!r}")
                out[n] = [float(v) for v in vals]
        return out

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


def external_problem(command, block_dims, bounds, noise_sd=None):
    ext = ExternalProblem(command, len(block_dims))
    return GameProblem("external", block_dims, bounds, ext, noise_sd=noise_sd,
                       params={"command": command})


# ------------------------------------------------------------------ grids


def _lhd(n, dim, rng):
    if n == 1:
        return np.full((1, dim), 0.5)
    return qmc.LatinHypercube(d=dim, seed=rng).random(n)


def build_factorial_grid(problem, per_player_counts, scheme="regular", seed=0,
                         max_size=None):
    """Full-factorial strategy grid over the problem box.

    ``regular`` places evenly spaced actions (a per-dimension count of
    ``m_i ** (1/d_i)``, which must be an integer); ``lhd`` draws one Latin
    hypercube of ``m_i`` actions per player.
    """
    counts = tuple(int(c) for c in per_player_counts)
    if len(counts) != problem.p or min(counts) < 1:
        raise InvalidInputError("one positive action count per player is required")
    size = int(np.prod(counts, dtype=object))
    limit = max_size or 10**7
    if size > limit:
        raise InvalidInputError(f"grid size {size} exceeds the limit {limit}")
    rng = np.random.default_rng(seed)
    actions = []
    offsets = np.cumsum((0,) + problem.block_dims)
    for i, (m, di) in enumerate(zip(counts, problem.block_dims)):
        b = problem.bounds[offsets[i]:offsets[i + 1]]
        if scheme == "regular":
            per_dim = int(round(m ** (1.0 / di)))
            if per_dim**di != m:
                raise InvalidInputError(f"{m} actions cannot form a regular {di}-D grid")
            axes = [np.linspace(lo, hi, per_dim) if per_dim > 1 else np.array([(lo + hi) / 2])
                    for lo, hi in b]
            mesh = np.meshgrid(*axes, indexing="ij")
            unit = np.column_stack([g.ravel() for g in mesh])
            actions.append(unit)
        elif scheme in ("lhd", "lhd-per-player"):
            unit = _lhd(m, di, rng)
            actions.append(b[:, 0] + unit * (b[:, 1] - b[:, 0]))
        else:
            raise InvalidInputError(f"unknown grid scheme {scheme!r}")
    return StrategyGrid(actions, problem.bounds, max_size=limit)


# --------------------------------------------------------------- registry


def _diffgame_factory(kappa=1, T=4.0, steps=40, thetas=None, box=6.0, z0=None):
    kw = {"kappa": int(kappa), "T": float(T), "steps": int(steps)}
    if thetas is not None:
        kw["thetas"] = tuple(float(t) for t in thetas)
    if z0 is not None:
        kw["z0"] = tuple(float(v) for v in z0)
    return diffgame_problem(DifferentialGameSpec(**kw), box=box)


def _quadratic_factory(p=2, block_dims=None, seed=0, noise_sd=None, coupling=0.4, box=1.0):
    return quadratic_game(p=p, block_dims=None if block_dims is None else tuple(block_dims),
                          seed=seed, noise_sd=noise_sd, coupling=coupling, box=box)


def _external_factory(command, block_dims, bounds, noise_sd=None):
    return external_problem(command, tuple(block_dims), np.asarray(bounds, dtype=float),
                            noise_sd=noise_sd)


PROBLEMS = {
    "p1": (lambda: p1_problem(), "two-player Branin-type game on [-5,10]x[0,15]"),
    "diffgame": (_diffgame_factory, "four-player open-loop differential game"),
    "quadratic": (_quadratic_factory, "random coupled quadratic game, optional noise"),
    "external": (_external_factory, "external executable speaking the line protocol"),
}


def make_problem(name, **params):
    """Build a registered problem by name."""
    if name not in PROBLEMS:
        raise InvalidInputError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}")
    try:
        return PROBLEMS[name][0](**params)
    except TypeError as exc:
        raise InvalidInputError(f"bad parameters for problem {name!r}: {exc}") from None
