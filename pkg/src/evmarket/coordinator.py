"""Price coordination for one time slot.

The coordinator broadcasts a price vector, collects the vehicles' demand and
the supplier's offer, and moves the prices against the balance violation
``supply - demand`` (which is exactly the gradient of the dual function),
projecting onto nonnegative prices.  It stops when the worst per-slot
imbalance falls below the balance tolerance.

Only prices flow toward the agents and only power curves (plus the private
objective values summed into the dual value) flow back; the coordinator never
sees utilities, costs or battery states.  Agent solves within one iteration
are independent of each other and could run concurrently; they are evaluated
in a fixed order here so that runs stay bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dso_agent import DSOSolution, DSOSubproblem, solve_dso
from .ev_agent import EVBatchWorkspace, EVSolution, EVSubproblem
from .model import PowerProfile, PriceVector, Tolerances

__all__ = [
    "ConvergenceConfig",
    "DualIterationState",
    "NegotiationResult",
    "update_price",
    "evaluate_dual",
    "negotiate_slot",
]


@dataclass(frozen=True)
class ConvergenceConfig:
    """Settings of the price-adjustment loop.

    ``step_size`` is in price units per kW of imbalance.  With the
    ``diminishing`` schedule the step at iteration ``k`` is
    ``step_size / sqrt(k + 1)``.
    """

    step_size: float = 0.005
    balance_tolerance: float = 0.1
    max_iterations: int = 2000
    step_schedule: str = "constant"

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.balance_tolerance <= 0:
            raise ValueError("balance_tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.step_schedule not in ("constant", "diminishing"):
            raise ValueError("step_schedule must be 'constant' or 'diminishing'")

    def step_at(self, k: int) -> float:
        if self.step_schedule == "diminishing":
            return self.step_size / math.sqrt(k + 1)
        return self.step_size


@dataclass(frozen=True, eq=False)
class DualIterationState:
    """Everything produced by one evaluation of the dual function."""

    iteration: int
    prices: PriceVector
    demand: PowerProfile
    supply: PowerProfile
    residual: PowerProfile
    dual_value: float
    ev_solutions: tuple[EVSolution, ...]
    dso_solution: DSOSolution

    @property
    def residual_norm(self) -> float:
        if len(self.residual) == 0:
            return 0.0
        return float(np.abs(self.residual.values).max())


@dataclass(frozen=True, eq=False)
class NegotiationResult:
    """Final state of one slot's negotiation."""

    prices: PriceVector
    demand: PowerProfile
    supply: PowerProfile
    storage_power: PowerProfile
    ev_profiles: tuple[PowerProfile, ...]
    ev_solutions: tuple[EVSolution, ...]
    iterations: int
    residual: PowerProfile
    residual_norm: float
    converged: bool
    dual_value: float
    residual_history: tuple[float, ...]


def update_price(prices: PriceVector, residual: PowerProfile, step: float) -> PriceVector:
    """Move prices against the balance violation, clipped at zero."""
    if len(prices) != len(residual):
        raise ValueError("price and residual lengths differ")
    return PriceVector(np.maximum(prices.values - step * residual.values, 0.0))


def evaluate_dual(
    prices: PriceVector,
    ev_subs: Sequence[EVSubproblem],
    dso_sub: DSOSubproblem,
    eps: Tolerances = Tolerances(),
    iteration: int = 0,
    mu_hints: np.ndarray | None = None,
    dso_start: tuple[np.ndarray, np.ndarray] | None = None,
    workspace: EVBatchWorkspace | None = None,
) -> DualIterationState:
    """Solve every agent subproblem at ``prices`` and assemble the imbalance.

    Vehicle subproblems see the leading slice of ``prices`` covering their own
    window (the carried price fields are replaced); vehicles contribute zero
    demand past their departure.  The dual value is the sum of the agents'
    optimal objectives.
    """
    n = dso_sub.window.length
    if len(prices) != n:
        raise ValueError("price vector length must equal the coordination window")
    for sub in ev_subs:
        if sub.window.start != dso_sub.window.start or sub.window.length > n:
            raise ValueError("vehicle windows must be embedded in the coordination window")

    if ev_subs:
        if workspace is None:
            workspace = EVBatchWorkspace(ev_subs)
        workspace.load_prices([prices.values[: sub.window.length] for sub in ev_subs])
        ev_solutions = workspace.solve(eps=eps, mu_hints=mu_hints)
    else:
        ev_solutions = []
    dso_solution = solve_dso(
        replace(dso_sub, prices=prices), eps=eps, start=dso_start
    )

    demand = np.zeros(n)
    for sub, sol in zip(ev_subs, ev_solutions):
        demand[: sub.window.length] += sol.profile.values
    supply = dso_solution.generation.values
    residual = supply - demand
    dual_value = dso_solution.objective + sum(sol.objective for sol in ev_solutions)

    return DualIterationState(
        iteration=iteration,
        prices=prices,
        demand=PowerProfile(demand),
        supply=PowerProfile(supply),
        residual=PowerProfile(residual),
        dual_value=dual_value,
        ev_solutions=tuple(ev_solutions),
        dso_solution=dso_solution,
    )


def negotiate_slot(
    ev_subs: Sequence[EVSubproblem],
    dso_sub: DSOSubproblem,
    warm_start_price: float,
    config: ConvergenceConfig = ConvergenceConfig(),
    eps: Tolerances = Tolerances(),
) -> NegotiationResult:
    """Run the price loop for one slot from a constant warm-start vector.

    Iterates agent solves and price updates until the worst per-slot imbalance
    is within ``config.balance_tolerance`` or ``config.max_iterations`` price
    updates have been spent.  The returned powers always come from a full
    agent solve at the returned prices.  Non-convergence is flagged, never
    raised; the caller decides policy.
    """
    n = dso_sub.window.length
    prices = PriceVector.constant(max(warm_start_price, 0.0), n)

    history: list[float] = []
    workspace = EVBatchWorkspace(ev_subs) if ev_subs else None
    mu_hints: np.ndarray | None = None
    dso_start: tuple[np.ndarray, np.ndarray] | None = None
    state = None
    converged = False
    iterations = 0
    for k in range(config.max_iterations + 1):
        state = evaluate_dual(
            prices,
            ev_subs,
            dso_sub,
            eps=eps,
            iteration=k,
            mu_hints=mu_hints,
            dso_start=dso_start,
            workspace=workspace,
        )
        history.append(state.residual_norm)
        iterations = k
        if state.residual_norm <= config.balance_tolerance:
            converged = True
            break
        if k == config.max_iterations:
            break
        prices = update_price(prices, state.residual, config.step_at(k))
        mu_hints = np.array([sol.energy_multiplier for sol in state.ev_solutions])
        dso_start = (
            state.dso_solution.generation.values,
            state.dso_solution.storage_power.values,
        )

    assert state is not None
    return NegotiationResult(
        prices=state.prices,
        demand=state.demand,
        supply=state.supply,
        storage_power=state.dso_solution.storage_power,
        ev_profiles=tuple(sol.profile for sol in state.ev_solutions),
        ev_solutions=state.ev_solutions,
        iterations=iterations,
        residual=state.residual,
        residual_norm=state.residual_norm,
        converged=converged,
        dual_value=state.dual_value,
        residual_history=tuple(history),
    )
