import json

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from nashgp import loop
from nashgp.acquisition import AcquisitionConfig
from nashgp.errors import InvalidInputError
from nashgp.game import PayoffTensor, nash_extract
from nashgp.loop import RunConfig, RunLog, initial_design, run, should_stop
from nashgp.problems import build_factorial_grid, p1_problem, quadratic_game

SMALL = AcquisitionConfig(M=10, K=5, n_sim=121, n_cand=30)


def small_config(**kw):
    base = dict(n0=5, n_max=9, cfg=SMALL, n_restarts=2, seed=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def quad():
    pb = quadratic_game(p=2, seed=2)
    return pb, build_factorial_grid(pb, (11, 11))


# ---------------------------------------------------------------- design


def test_exhaustive_initial_design():
    grid = build_factorial_grid(p1_problem(), (3, 4))
    assert initial_design(grid, 12) == list(range(12))


def test_design_is_distinct_and_reproducible():
    grid = build_factorial_grid(p1_problem(), (31, 31))
    a = initial_design(grid, 6, seed=4)
    assert len(set(a)) == 6
    assert a == initial_design(grid, 6, seed=4)
    assert a != initial_design(grid, 6, seed=5)


def test_design_is_spread_out():
    grid = build_factorial_grid(p1_problem(), (31, 31))
    unit = grid.rescale(grid.points())
    rng = np.random.default_rng(0)
    random_min = [pdist(unit[rng.choice(grid.N, 6, replace=False)]).min() for _ in range(1000)]
    chosen = pdist(unit[initial_design(grid, 6, seed=0)]).min()
    assert chosen >= np.percentile(random_min, 5)


def test_design_larger_than_grid():
    grid = build_factorial_grid(p1_problem(), (2, 2))
    with pytest.raises(InvalidInputError):
        initial_design(grid, 5)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kw",
    [dict(n0=1), dict(n0=10, n_max=10), dict(acquisition="ei"),
     dict(repetitions_per_point=0), dict(stop_eps=-1.0)],
)
def test_config_rejects(kw):
    with pytest.raises(InvalidInputError):
        RunConfig(**kw)


def test_config_accepts_dict_for_acquisition_settings():
    assert RunConfig(cfg={"M": 7}).cfg.M == 7


def test_stopping_rule():
    assert not should_stop("pe", 1.0, None, 0.0)
    assert not should_stop("sur", None, 0.0, 0.0)
    assert should_stop("pe", 0.995, None, 0.01)
    assert not should_stop("pe", 0.98, None, 0.01)
    assert should_stop("sur", None, 1e-9, 1e-6)
    assert not should_stop("sur", None, 1e-3, 1e-6)


# ------------------------------------------------------------------ runs


def test_exhaustive_limit_stops_with_true_equilibrium():
    pb = quadratic_game(p=2, seed=0)
    grid = build_factorial_grid(pb, (4, 4))
    cfg = RunConfig(n0=16, n_max=17, cfg=AcquisitionConfig(M=10, K=5, n_sim=16, n_cand=16),
                    n_restarts=2)
    out = run(pb, grid, cfg)
    truth = nash_extract(PayoffTensor(grid, pb.evaluate(grid.points()))).indices
    assert out.final_index in truth.tolist()
    assert out.evaluations == 16 and len(out.records) == 1


@pytest.mark.parametrize("mode", ["pe", "sur"])
def test_budget_and_no_repeats(quad, mode):
    pb, grid = quad
    out = run(pb, grid, small_config(acquisition=mode))
    assert out.evaluations <= 9
    assert len(out.design) == len(set(out.design))
    its = [r.iteration for r in out.records]
    assert its == sorted(its)
    for rec in out.records:
        assert rec.n_cand <= SMALL.n_cand + 2 * 11
        assert rec.estimate_index in range(grid.N)
    assert out.records[-1].chosen_index is None
    assert out.final_index == out.records[-1].estimate_index


def test_noisy_budget_counts_repetitions(quad):
    pb = quadratic_game(p=2, seed=2, noise_sd=0.05)
    grid = quad[1]
    out = run(pb, grid, small_config(n0=4, n_max=6, repetitions_per_point=3))
    assert out.evaluations == 6 * 3
    assert len(out.design) == 6
    assert all(v[0] > 0 for v in out.noise_vars)


def test_runs_are_reproducible(quad):
    pb, grid = quad
    a = run(pb, grid, small_config(acquisition="sur"))
    b = run(pb, grid, small_config(acquisition="sur"))
    assert a.to_jsonl() == b.to_jsonl()


def test_resume_reproduces_uninterrupted_run(quad, monkeypatch, tmp_path):
    pb, grid = quad
    saved = []
    real_save = loop._save

    def spy(path, state):
        saved.append(state.checkpoint())
        real_save(path, state)

    monkeypatch.setattr(loop, "_save", spy)
    full = run(pb, grid, small_config(), checkpoint_path=tmp_path / "ck.json")
    monkeypatch.setattr(loop, "_save", real_save)
    assert json.loads((tmp_path / "ck.json").read_text())["final_index"] == full.final_index
    # resume from a checkpoint taken mid-run
    partial = RunLog.from_checkpoint(saved[2])
    assert partial.final_index is None and 0 < len(partial.records) < len(full.records)
    resumed = run(pb, grid, small_config(), resume=partial)
    assert resumed.to_jsonl() == full.to_jsonl()
    # a finished log is returned unchanged
    assert run(pb, grid, small_config(), resume=full) is full


def test_jsonl_layout(quad):
    pb, grid = quad
    out = run(pb, grid, small_config(n_max=7))
    lines = [json.loads(s) for s in out.to_jsonl().splitlines()]
    assert lines[0]["type"] == "config" and lines[-1]["type"] == "final"
    assert all(r["type"] == "iteration" and "wall_time" not in r for r in lines[1:-1])
    assert "wall_time" in json.loads(out.to_jsonl(timing=True).splitlines()[1])
    assert out.evaluations_to_convergence() <= out.evaluations


def test_convergence_count():
    log = RunLog(config={}, final_index=3)
    for n, est in zip((6, 7, 8, 9), (1, 3, 2, 3)):
        log.records.append(loop.IterationRecord(0, n, n, 0, 0, 0.0, 0.0, 0.0, est, []))
    assert log.evaluations_to_convergence() == 9
    log.records[-2].estimate_index = 3
    assert log.evaluations_to_convergence() == 7


def test_early_stop_in_pe_mode(quad):
    pb, grid = quad
    out = run(pb, grid, small_config(n_max=25, stop_eps=0.5))
    assert out.stopped_early
    assert out.records[-1].best_pe >= 0.5
    assert out.evaluations < 25
