"""Sequential design loop for locating a Nash equilibrium on a grid.

Every iteration refits the GP models, selects a factorial simulation subset
``X_sim`` (by posterior density at a target first, then by probability of
falling in the box of simulated equilibria), simulates the objectives on it,
selects a candidate subset ``X_cand`` by equilibrium probability and picks
the next point by either maximal equilibrium probability (``pe``) or minimal
expected residual uncertainty (``sur``).

All randomness is derived from ``(seed, purpose, iteration)`` so a run can
be resumed from a checkpoint and reproduce the uninterrupted log exactly.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from .acquisition import (
    AcquisitionConfig,
    gamma_hat,
    prob_equilibrium_grid,
    score_box,
    score_target,
    select_subset,
    sur_criterion,
)
from .errors import InvalidInputError
from .game import equilibrium_points, nash_mask
from .gp import FitConfig, fit_multi, simulate_paths

log = logging.getLogger(__name__)

MODES = ("pe", "sur")
NO_NE_PATIENCE = 3

_FIT, _SIM, _PE, _XI, _SUB_SIM, _SUB_CAND, _EVAL, _DESIGN = range(8)


def derive_seed(seed, *keys):
    return int(np.random.SeedSequence([int(seed) % 2**63, *keys]).generate_state(1)[0])


@dataclass
class RunConfig:
    n0: int = 6
    n_max: int = 30
    acquisition: str = "pe"
    cfg: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    stop_eps: float = 0.0
    seed: int = 0
    repetitions_per_point: int = 1
    kernel: str = "matern-5/2"
    n_restarts: int = 10

    def __post_init__(self):
        if isinstance(self.cfg, dict):
            self.cfg = AcquisitionConfig(**self.cfg)
        if self.acquisition not in MODES:
            raise InvalidInputError(f"acquisition must be one of {MODES}")
        if self.n0 < 2 or self.n0 >= self.n_max:
            raise InvalidInputError("need 2 <= n0 < n_max")
        if self.repetitions_per_point < 1:
            raise InvalidInputError("repetitions_per_point must be at least 1")
        if self.stop_eps < 0:
            raise InvalidInputError("stop_eps must be nonnegative")


@dataclass
class IterationRecord:
    iteration: int
    n_obs: int
    evaluations: int
    n_sim: int
    n_cand: int
    no_ne_fraction: float
    gamma: float
    best_pe: float
    estimate_index: int
    estimate_values: list
    chosen_index: int = None
    criterion: float = None
    observed: list = None
    warning: str = None
    wall_time: float = 0.0


@dataclass
class RunLog:
    config: dict
    records: list = field(default_factory=list)
    design: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    noise_vars: list = field(default_factory=list)
    evaluations: int = 0
    final_index: int = None
    final_values: list = None
    stopped_early: bool = False
    box: list = None
    target: list = None
    no_ne_streak: int = 0

    def evaluations_to_convergence(self):
        """Evaluations spent when the estimate last changed to its final value."""
        if self.final_index is None or not self.records:
            return None
        n = self.records[-1].evaluations
        for rec in reversed(self.records):
            if rec.estimate_index != self.final_index:
                break
            n = rec.evaluations
        return n

    def to_jsonl(self, timing=False):
        lines = [json.dumps({"type": "config", **self.config}, sort_keys=True)]
        for rec in self.records:
            d = asdict(rec)
            if not timing:
                d.pop("wall_time")
            lines.append(json.dumps({"type": "iteration", **d}, sort_keys=True))
        lines.append(json.dumps({
            "type": "final",
            "final_index": self.final_index,
            "final_values": self.final_values,
            "evaluations": self.evaluations,
            "evaluations_to_convergence": self.evaluations_to_convergence(),
            "stopped_early": self.stopped_early,
            "design": self.design,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"

    def checkpoint(self):
        d = asdict(self)
        return json.dumps(d)

    @classmethod
    def from_checkpoint(cls, text):
        d = json.loads(text)
        d["records"] = [IterationRecord(**r) for r in d["records"]]
        return cls(**d)


def _config_dict(config):
    return asdict(config)


def maximin_lhs(n, dim, seed, candidates=50):
    """Best of ``candidates`` random Latin hypercubes by minimal pairwise distance."""
    rng = np.random.default_rng(seed)
    best, best_d = None, -1.0
    for _ in range(candidates):
        perms = np.column_stack([rng.permutation(n) for _ in range(dim)])
        x = (perms + rng.random((n, dim))) / n
        d = pdist(x).min() if n > 1 else 0.0
        if d > best_d:
            best, best_d = x, d
    return best


def initial_design(grid, n0, seed=0):
    """``n0`` distinct grid indices from a maximin Latin hypercube.

    Samples are snapped to the nearest grid point in rescaled coordinates;
    duplicates are replaced by fresh uniform draws until all are distinct.
    """
    if n0 > grid.N:
        raise InvalidInputError(f"n0={n0} exceeds grid size {grid.N}")
    if n0 == grid.N:
        return list(range(grid.N))
    rng = np.random.default_rng(derive_seed(seed, _DESIGN))
    lo, hi = grid.bounds[:, 0], grid.bounds[:, 1]
    unit = maximin_lhs(n0, grid.d, rng)
    chosen = []
    for idx in grid.nearest(lo + unit * (hi - lo)):
        if int(idx) not in chosen:
            chosen.append(int(idx))
    tries = 0
    while len(chosen) < n0:
        tries += 1
        if tries > 100 * n0:
            free = np.setdiff1d(np.arange(grid.N), chosen)
            chosen.extend(int(i) for i in rng.choice(free, n0 - len(chosen), replace=False))
            break
        idx = int(grid.nearest(lo + rng.random(grid.d) * (hi - lo))[0])
        if idx not in chosen:
            chosen.append(idx)
    return chosen


def should_stop(mode, current_best_pe, current_min_j, stop_eps):
    if stop_eps <= 0:
        return False
    if mode == "pe":
        return current_best_pe is not None and current_best_pe >= 1.0 - stop_eps
    return current_min_j is not None and current_min_j <= stop_eps


class _Run:
    def __init__(self, problem, grid, config, log_):
        self.problem = problem
        self.grid = grid
        self.config = config
        self.log = log_
        self.noise_mode = ("fixed" if config.repetitions_per_point > 1
                           else "estimate" if problem.noisy else "zero")

    @property
    def n_obs(self):
        return len(self.log.design)

    def observe(self, idx):
        reps = self.config.repetitions_per_point
        x = self.grid.points([idx])
        rng = np.random.default_rng(derive_seed(self.config.seed, _EVAL, self.n_obs))
        ys = self.problem.observe(np.repeat(x, reps, axis=0), rng)
        self.log.evaluations += reps
        mean = ys.mean(axis=0)
        var = ys.var(axis=0, ddof=1) / reps if reps > 1 else np.zeros(ys.shape[1])
        self.log.design.append(int(idx))
        self.log.observations.append(mean.tolist())
        self.log.noise_vars.append(var.tolist())

    def fit(self, it):
        X = self.grid.points(self.log.design)
        F = np.asarray(self.log.observations)
        noise = None if self.noise_mode == "estimate" else np.asarray(self.log.noise_vars)
        cfg = FitConfig(n_restarts=self.config.n_restarts,
                        seed=derive_seed(self.config.seed, _FIT, it))
        return fit_multi(X, F, noise, self.config.kernel, cfg, input_bounds=self.grid.bounds)

    def obs_noise(self, multi):
        if self.noise_mode == "zero":
            return np.zeros(multi.p)
        if self.noise_mode == "fixed":
            return np.asarray(self.log.noise_vars).mean(axis=0)
        return np.array([m.noise_vars.mean() for m in multi.models])

    def analyze(self, it):
        cfg = self.config.cfg
        grid = self.grid
        multi = self.fit(it)
        points = grid.points()
        state = self.log
        mu, _ = multi.predict(points)
        # the posterior-mean equilibria always join X_sim
        mean_ne = np.flatnonzero(nash_mask(mu, grid.shape))
        if state.box is None:
            te, _ = equilibrium_points(mu, grid.shape)
            if not np.isnan(te).any():
                state.target = te.tolist()
            scores = (score_target(multi, points, state.target) if state.target is not None
                      else np.ones(grid.N))
        else:
            scores = score_box(multi, points, *state.box)
        if not np.any(scores > 0):
            scores = np.ones(grid.N)
        sim_grid, sim_idx = select_subset(grid, scores, cfg.n_sim,
                                          derive_seed(self.config.seed, _SUB_SIM, it),
                                          forced=mean_ne)
        ens = simulate_paths(multi, grid.points(sim_idx), cfg.M,
                             derive_seed(self.config.seed, _SIM, it), indices=sim_idx)
        psi, counts = equilibrium_points(ens.draws, sim_grid.shape)
        finite = psi[counts > 0]
        if finite.shape[0]:
            state.box = [finite.min(axis=0).tolist(), finite.max(axis=0).tolist()]
            state.no_ne_streak = 0
        else:
            state.no_ne_streak += 1
        pe = prob_equilibrium_grid(multi, sim_grid, cfg, derive_seed(self.config.seed, _PE, it))
        cand_scores = pe if np.any(pe > 0) else np.ones(sim_grid.N)
        _, cand_pos = select_subset(sim_grid, cand_scores, cfg.n_cand,
                                    derive_seed(self.config.seed, _SUB_CAND, it))
        best = int(cand_pos[np.argmax(pe[cand_pos])])
        est = int(sim_idx[best])
        mu_est, _ = multi.predict(grid.points([est]))
        rec = IterationRecord(
            iteration=it, n_obs=self.n_obs, evaluations=self.log.evaluations,
            n_sim=int(sim_grid.N), n_cand=int(cand_pos.size),
            no_ne_fraction=float(np.mean(counts == 0)), gamma=gamma_hat(psi),
            best_pe=float(pe[best]), estimate_index=est, estimate_values=mu_est[0].tolist())
        if state.no_ne_streak >= NO_NE_PATIENCE:
            rec.warning = "no pure equilibrium in any simulated draw"
            log.warning("iteration %d: %s", it, rec.warning)
        return multi, ens, sim_grid, sim_idx, pe, cand_pos, rec

    def choose(self, it, multi, ens, sim_grid, sim_idx, pe, cand_pos):
        cfg = self.config.cfg
        observed = set(self.log.design)
        allow_repeat = self.noise_mode != "zero"

        def free(pos):
            return np.array([q for q in pos if allow_repeat or int(sim_idx[q]) not in observed],
                            dtype=int)

        pool = free(cand_pos)
        if pool.size == 0:
            pool = free(np.arange(sim_grid.N))
        if pool.size == 0:
            return None, None
        if self.config.acquisition == "pe":
            q = int(pool[np.argmax(pe[pool])])
            return int(sim_idx[q]), float(pe[q])
        xi = np.random.default_rng(derive_seed(self.config.seed, _XI, it)).standard_normal(
            (cfg.K, multi.p))
        tau2 = self.obs_noise(multi)
        J = np.array([sur_criterion(multi, ens, sim_grid.shape, int(q), cfg, obs_noise_vars=tau2,
                                    xi=xi) for q in pool])
        k = int(np.argmin(J))
        return int(sim_idx[pool[k]]), float(J[k])


def run(problem, grid, config, checkpoint_path=None, resume=None):
    """Run the sequential design and return its :class:`RunLog`.

    Parameters
    ----------
    problem : GameProblem
    grid : StrategyGrid
    config : RunConfig
    checkpoint_path : path, optional
        Written after every evaluation.
    resume : RunLog, optional
        A checkpointed log to continue from.
    """
    if resume is not None:
        if resume.final_index is not None:
            return resume
        state = resume
    else:
        state = RunLog(config=_config_dict(config))
    r = _Run(problem, grid, config, state)
    if not state.design:
        for idx in initial_design(grid, config.n0, config.seed):
            r.observe(idx)
        _save(checkpoint_path, state)
    it = len(state.records)
    while True:
        t0 = time.perf_counter()
        multi, ens, sim_grid, sim_idx, pe, cand_pos, rec = r.analyze(it)
        last = r.n_obs >= config.n_max
        stop = should_stop(config.acquisition, rec.best_pe, None, config.stop_eps)
        if not last and not stop:
            chosen, crit = r.choose(it, multi, ens, sim_grid, sim_idx, pe, cand_pos)
            rec.chosen_index, rec.criterion = chosen, crit
            if config.acquisition == "sur":
                stop = should_stop("sur", None, crit, config.stop_eps)
            if chosen is None:
                stop = True
        if last or stop:
            state.final_index = rec.estimate_index
            state.final_values = rec.estimate_values
            state.stopped_early = bool(stop and not last)
            rec.chosen_index = None if last or stop else rec.chosen_index
            rec.wall_time = time.perf_counter() - t0
            state.records.append(rec)
            break
        r.observe(rec.chosen_index)
        rec.observed = state.observations[-1]
        rec.wall_time = time.perf_counter() - t0
        state.records.append(rec)
        log.info("iteration %d: chose %d (criterion %.4g), estimate %d (P_E %.3f)", it,
                 rec.chosen_index, rec.criterion, rec.estimate_index, rec.best_pe)
        _save(checkpoint_path, state)
        it += 1
    _save(checkpoint_path, state)
    return state


def _save(path, state):
    if path is None:
        return
    with open(path, "w") as fh:
        fh.write(state.checkpoint())
