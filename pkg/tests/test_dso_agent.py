import numpy as np
import pytest

from evmarket import (
    DSOSpec,
    DSOSubproblem,
    PriceVector,
    StorageSpec,
    TimeGrid,
    Tolerances,
    generation_cost,
    solve_dso,
    storage_tracking_penalty,
)
from evmarket.dso_agent import ConvergenceError, dso_objective

from bruteforce import dso_bruteforce_1slot, dso_bruteforce_storage
from conftest import SLOT_HOURS, TABLE1_DSO, TABLE1_STORAGE


def make_sub(prices, dso=TABLE1_DSO, storage=TABLE1_STORAGE, energy_now=None, slot_hours=SLOT_HOURS):
    prices = np.asarray(prices, dtype=float)
    if energy_now is None:
        energy_now = storage.energy_reference
    return DSOSubproblem(
        dso=dso,
        storage=storage,
        energy_now=energy_now,
        window=TimeGrid(0, prices.size, slot_hours),
        prices=PriceVector(prices),
    )


def test_generation_cost_values():
    assert generation_cost(10.0, 0.06, 0.9) == pytest.approx(15.0)
    assert generation_cost(0.0, 0.06, 0.9) == 0.0
    # vertex of the quadratic at -b/(2a)
    assert generation_cost(-7.5, 0.06, 0.9) == pytest.approx(-3.375)


def test_tracking_penalty_hand_cases():
    grid1 = TimeGrid(0, 1, 0.25)
    assert storage_tracking_penalty(100.0, np.array([0.0]), TABLE1_STORAGE, grid1) == 0.0
    assert storage_tracking_penalty(100.0, np.array([4.0]), TABLE1_STORAGE, grid1) == pytest.approx(1.0)
    grid2 = TimeGrid(0, 2, 0.25)
    # one step out, one step back: deviations 1 then 0
    assert storage_tracking_penalty(
        100.0, np.array([4.0, -4.0]), TABLE1_STORAGE, grid2
    ) == pytest.approx(1.0)
    # any number of idle slots at the reference cost nothing
    grid5 = TimeGrid(0, 5, 0.25)
    assert storage_tracking_penalty(100.0, np.zeros(5), TABLE1_STORAGE, grid5) == 0.0


def test_zero_price_zero_linear_cost_stays_idle():
    dso = DSOSpec(0.06, 0.0, 0.0, 100.0)
    sol = solve_dso(make_sub(np.zeros(3), dso=dso))
    np.testing.assert_allclose(sol.generation.values, 0.0, atol=1e-6)
    np.testing.assert_allclose(sol.storage_power.values, 0.0, atol=1e-6)
    assert sol.objective == pytest.approx(0.0, abs=1e-9)


def test_one_slot_zero_price_hand_kkt():
    sol = solve_dso(make_sub([0.0]))
    # generation pinned at zero, storage at the stationary point of
    # -a*ps^2 + b*ps - (throughput*slot_hours*ps)^2
    expected_ps = 0.9 / (2 * 0.06 + 2 * 0.25 * 0.25)
    np.testing.assert_allclose(sol.generation.values, [0.0], atol=1e-7)
    np.testing.assert_allclose(sol.storage_power.values, [expected_ps], atol=1e-6)
    gen, ps, value = dso_bruteforce_1slot(make_sub([0.0]))
    assert sol.objective == pytest.approx(value, abs=1e-3)


def test_one_slot_table1_price_against_grid():
    sub = make_sub([16.0 * SLOT_HOURS])
    sol = solve_dso(sub)
    gen, ps, value = dso_bruteforce_1slot(sub)
    assert sol.objective == pytest.approx(value, rel=1e-6, abs=1e-3)
    np.testing.assert_allclose(sol.generation.values, [gen], atol=0.02)
    np.testing.assert_allclose(sol.storage_power.values, [ps], atol=0.02)


def test_two_slot_matches_reduced_grid_oracle():
    rng = np.random.default_rng(2)
    for _ in range(3):
        lam = rng.uniform(0.0, 6.0, size=2)
        sub = make_sub(lam, energy_now=float(rng.uniform(95.0, 105.0)))
        sol = solve_dso(sub)
        _, _, ref = dso_bruteforce_storage(sub)
        rel = abs(sol.objective - ref) / max(1.0, abs(ref))
        assert rel <= 1e-3
        assert sol.objective >= ref - 1e-3


def test_solution_respects_boxes_and_stationarity():
    rng = np.random.default_rng(9)
    eps = Tolerances()
    for _ in range(100):
        n = int(rng.integers(1, 7))
        dso = DSOSpec(
            cost_quadratic=float(rng.uniform(0.01, 0.3)),
            cost_linear=float(rng.uniform(0.0, 2.0)),
            power_min=0.0,
            power_max=float(rng.uniform(30.0, 150.0)),
        )
        bound = float(rng.uniform(10.0, 120.0))
        storage = StorageSpec(
            power_min=-bound,
            power_max=bound,
            energy_initial=100.0,
            energy_reference=float(rng.uniform(80.0, 120.0)),
            throughput=float(rng.uniform(0.1, 1.0)),
            tracking_weight=float(rng.uniform(0.1, 2.0)),
        )
        sub = make_sub(
            rng.uniform(0.0, 8.0, size=n),
            dso=dso,
            storage=storage,
            energy_now=float(rng.uniform(80.0, 120.0)),
        )
        sol = solve_dso(sub, eps=eps)
        assert sol.kkt_residual <= 1e-4
        assert np.all(sol.generation.values >= dso.power_min - 1e-9)
        assert np.all(sol.generation.values <= dso.power_max + 1e-9)
        assert np.all(sol.storage_power.values >= storage.power_min - 1e-9)
        assert np.all(sol.storage_power.values <= storage.power_max + 1e-9)


def test_returned_point_beats_random_feasible_points():
    rng = np.random.default_rng(31)
    sub = make_sub(rng.uniform(0.0, 5.0, size=2))
    sol = solve_dso(sub)
    best = sol.objective
    for _ in range(10_000):
        gen = rng.uniform(sub.dso.power_min, sub.dso.power_max, size=2)
        ps = rng.uniform(sub.storage.power_min, sub.storage.power_max, size=2)
        assert dso_objective(sub, gen, ps) <= best + 1e-9


def test_uniform_price_raise_never_reduces_supply():
    rng = np.random.default_rng(13)
    for _ in range(25):
        n = int(rng.integers(1, 6))
        lam = rng.uniform(0.0, 4.0, size=n)
        bump = float(rng.uniform(0.05, 2.0))
        low = solve_dso(make_sub(lam)).generation.values.sum()
        high = solve_dso(make_sub(lam + bump)).generation.values.sum()
        assert high >= low - 1e-6


def test_warm_start_does_not_change_answer():
    rng = np.random.default_rng(4)
    lam = rng.uniform(0.0, 5.0, size=6)
    sub = make_sub(lam)
    cold = solve_dso(sub)
    other = solve_dso(make_sub(lam + 1.0))
    warm = solve_dso(sub, start=(other.generation.values, other.storage_power.values))
    np.testing.assert_allclose(cold.generation.values, warm.generation.values, atol=1e-5)
    np.testing.assert_allclose(cold.storage_power.values, warm.storage_power.values, atol=1e-5)


def test_nonconvergence_raises_with_residual():
    sub = make_sub([4.0, 2.0])
    with pytest.raises(ConvergenceError) as info:
        solve_dso(sub, max_iter=1)
    assert info.value.residual > 0
