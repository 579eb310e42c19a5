import sys

import numpy as np
import pytest

from nashgp.errors import EvaluationError, InvalidInputError
from nashgp.game import PayoffTensor, StrategyGrid, fixed_point_solve, nash_extract
from nashgp.problems import (
    P1_NASH,
    PROBLEMS,
    DifferentialGameSpec,
    build_factorial_grid,
    diffgame_evaluate,
    diffgame_problem,
    make_problem,
    p1_evaluate,
    p1_problem,
    quadratic_game,
    quadratic_gradients,
    spline_basis,
)

# ---------------------------------------------------------------------- P1


def test_p1_grid_equilibrium_is_nearest_the_known_point():
    pb = p1_problem()
    grid = build_factorial_grid(pb, (31, 31))
    assert grid.N == 961
    out = nash_extract(PayoffTensor(grid, pb.evaluate(grid.points())))
    assert out.indices.tolist() == [int(grid.nearest(P1_NASH[None])[0])]


def test_p1_branin_cancellation():
    x1 = np.linspace(-5, 10, 7)
    x2 = 5.1 * (x1 / (2 * np.pi)) ** 2 - 5 / np.pi * x1 + 6
    y1, _ = p1_evaluate(x1, x2)
    np.testing.assert_allclose(y1, 10 * ((1 - 1 / (8 * np.pi)) * np.cos(x1) + 1), atol=1e-10)


def test_p1_corners_are_finite():
    pb = p1_problem()
    corners = np.array([[a, b] for a in pb.bounds[0] for b in pb.bounds[1]])
    assert np.all(np.isfinite(pb.evaluate(corners)))


def test_p1_outside_the_box_is_an_error():
    with pytest.raises(EvaluationError):
        p1_evaluate(11.0, 5.0)


# ------------------------------------------------------- differential game


def test_free_dynamics():
    spec = DifferentialGameSpec()
    y = diffgame_evaluate(spec, np.zeros(spec.d))[0]
    expected = 0.5 * ((np.array(spec.z0) - np.array(spec.targets)) ** 2).sum(1)
    np.testing.assert_allclose(y, expected)


def test_symmetric_configuration():
    spec = DifferentialGameSpec(thetas=(0.0,) * 4, z0=(0.0, 0.0))
    pb = diffgame_problem(spec)
    levels = (-1.0, 0.0, 1.0)
    actions = np.array([[a, b] for a in levels for b in levels])
    grid = StrategyGrid([actions] * 4, pb.bounds)
    out = nash_extract(PayoffTensor(grid, pb.evaluate(grid.points())))
    pts = grid.points(out.indices)
    assert np.any(np.all(pts == 0.0, axis=1))
    # the continuous first-order solution u_i = target_i also sits on this grid
    aim = np.array(spec.targets).ravel()
    assert np.any(np.all(pts == aim, axis=1))


def test_symmetric_first_order_solution_is_stationary():
    # against the others, each player's cost is a quadratic in its own control
    spec = DifferentialGameSpec(thetas=(0.0,) * 4, z0=(0.0, 0.0))
    pb = diffgame_problem(spec)
    x = np.array(spec.targets, dtype=float).ravel()
    base = pb(x)
    h = 1e-5
    for i in range(4):
        for c in range(2):
            e = np.zeros(8)
            e[2 * i + c] = h
            grad = (pb(x + e)[i] - pb(x - e)[i]) / (2 * h)
            assert abs(grad) < 1e-6
    # the players' pulls cancel: the state ends at the centre
    assert np.allclose(base, 0.5 * 2 + 0.5 * 4 * 2)


def test_costs_positive_on_random_controls():
    pb = diffgame_problem()
    x = np.random.default_rng(0).uniform(-6, 6, (500, 8))
    assert np.all(pb.evaluate(x) > 0)


def test_euler_refinement_is_first_order():
    # each doubling of the step count roughly halves the change
    rng = np.random.default_rng(1)
    for kappa in (1, 2):
        x = rng.uniform(-6, 6, (50, 8 * kappa))
        y = [diffgame_evaluate(DifferentialGameSpec(kappa=kappa, steps=s), x)
             for s in (40, 80, 160, 320)]
        gaps = [np.abs(y[k] - y[k + 1]).max() for k in range(3)]
        for a, b in zip(gaps, gaps[1:]):
            assert 1.6 < a / b < 2.4


@pytest.mark.xfail(strict=True, reason=(
    "explicit Euler with 40 steps is first-order: extreme random controls on "
    "[-6, 6] move a cost by up to 6% (kappa=1) and 15% (kappa=2) when the "
    "step count doubles; the median change is about 0.5% and 1.3%"))
def test_euler_refinement_within_two_percent():
    rng = np.random.default_rng(1)
    for kappa in (1, 2):
        coarse = DifferentialGameSpec(kappa=kappa, steps=40)
        fine = DifferentialGameSpec(kappa=kappa, steps=80)
        x = rng.uniform(-6, 6, (50, coarse.d))
        a, b = diffgame_evaluate(coarse, x), diffgame_evaluate(fine, x)
        assert np.max(np.abs(a - b) / np.abs(b)) < 0.02


def test_spline_basis_partition_of_unity():
    s = np.linspace(0, 1, 11)
    for kappa in (1, 2, 3):
        basis = spline_basis(kappa, s)
        assert basis.shape == (11, kappa)
        np.testing.assert_allclose(basis.sum(axis=1), 1.0)


def test_diffgame_dimension_check():
    with pytest.raises(InvalidInputError):
        diffgame_evaluate(DifferentialGameSpec(), np.zeros(5))
    with pytest.raises(InvalidInputError):
        DifferentialGameSpec(steps=0)


# --------------------------------------------------------------- quadratic


def test_decoupled_quadratic():
    pb = quadratic_game(p=3, seed=1, coupling=0.0)
    G, c = pb.params["G"], pb.params["c"]
    for i in range(3):
        assert abs(G[i, i] * pb.nash[i] + c[i]) < 1e-12
        assert np.all(G[i, np.arange(3) != i] == 0)


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_gradients_vanish_at_the_equilibrium(seed):
    pb = quadratic_game(p=2, block_dims=(2, 2), seed=seed)
    assert np.max(np.abs(quadratic_gradients(pb, pb.nash))) < 1e-8
    # the closed form agrees with finite differences of the costs
    x = np.random.default_rng(seed).uniform(-1, 1, 4)
    h = 1e-6
    fd = []
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd.append((pb(x + e)[j // 2] - pb(x - e)[j // 2]) / (2 * h))
    np.testing.assert_allclose(fd, quadratic_gradients(pb, x), atol=1e-6)


def test_quadratic_fixed_point_recovers_linear_solution():
    pb = quadratic_game(p=2, block_dims=(2, 2), seed=7)
    res = fixed_point_solve(pb, pb.bounds, pb.block_dims, np.zeros(4), k_max=200)
    np.testing.assert_allclose(res.x, pb.nash, atol=1e-4)


def test_quadratic_grid_equilibrium_is_near_the_solution():
    pb = quadratic_game(p=2, seed=3)
    grid = build_factorial_grid(pb, (31, 31))
    out = nash_extract(PayoffTensor(grid, pb.evaluate(grid.points())))
    cell = 2.0 / 30
    assert out.exists
    assert np.all(np.abs(grid.points(out.indices) - pb.nash) <= 1.5 * cell)


def test_noise_is_added_only_when_asked():
    pb = quadratic_game(p=2, seed=0, noise_sd=0.1)
    x = np.zeros((2000, 2))
    y = pb.observe(x, rng=0)
    assert abs(y[:, 0].std() - 0.1) < 0.01
    np.testing.assert_array_equal(pb(x[0]), quadratic_game(p=2, seed=0)(x[0]))


# ------------------------------------------------------------------- grids


def test_grid_sizes():
    assert build_factorial_grid(p1_problem(), (31, 31)).N == 961
    big = build_factorial_grid(diffgame_problem(), (17,) * 4, scheme="lhd", seed=0)
    assert big.N == 83_521 and big.shape == (17,) * 4
    assert big.points([big.N - 1]).shape == (1, 8)
    one = build_factorial_grid(p1_problem(), (1, 1))
    assert one.N == 1
    np.testing.assert_allclose(one.points(), [[2.5, 7.5]])


def test_lhd_actions_stay_in_box_and_are_stratified():
    pb = diffgame_problem()
    grid = build_factorial_grid(pb, (9,) * 4, scheme="lhd", seed=3)
    for acts in grid.actions:
        assert np.all((acts >= -6) & (acts <= 6))
        bins = np.floor((acts + 6) / 12 * 9).astype(int)
        for col in bins.T:
            assert sorted(col) == list(range(9))


def test_grid_arguments_validated():
    pb = p1_problem()
    with pytest.raises(InvalidInputError):
        build_factorial_grid(pb, (31,))
    with pytest.raises(InvalidInputError):
        build_factorial_grid(pb, (10, 10), scheme="sobol")
    with pytest.raises(InvalidInputError):
        build_factorial_grid(diffgame_problem(), (10,) * 4)  # 10 is not a square
    with pytest.raises(InvalidInputError):
        build_factorial_grid(diffgame_problem(), (100,) * 4, scheme="lhd")


# ----------------------------------------------------------------- registry


def test_registry():
    assert {"p1", "diffgame", "quadratic", "external"} <= set(PROBLEMS)
    assert make_problem("quadratic", p=3).p == 3
    assert make_problem("diffgame", kappa=2).d == 16
    with pytest.raises(InvalidInputError):
        make_problem("rosenbrock")
    with pytest.raises(InvalidInputError):
        make_problem("p1", noise=1.0)


def test_external_protocol(tmp_path):
    script = tmp_path / "game.py"
    script.write_text(
        "import sys\n"
        "for line in sys.stdin:\n"
        "    a, b = map(float, line.split())\n"
        "    print((a - b) ** 2, a + b, flush=True)\n"
    )
    pb = make_problem("external", command=[sys.executable, str(script)],
                      block_dims=[1, 1], bounds=[[0, 1], [0, 1]])
    try:
        np.testing.assert_allclose(pb.evaluate(np.array([[0.5, 0.25], [1.0, 0.0]])),
                                   [[0.0625, 0.75], [1.0, 1.0]])
    finally:
        pb.evaluate.close()


def test_external_bad_reply(tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("import sys\nfor line in sys.stdin:\n    print('1.0', flush=True)\n")
    pb = make_problem("external", command=[sys.executable, str(script)],
                      block_dims=[1, 1], bounds=[[0, 1], [0, 1]])
    try:
        with pytest.raises(EvaluationError):
            pb.evaluate(np.array([[0.5, 0.5]]))
    finally:
        pb.evaluate.close()
