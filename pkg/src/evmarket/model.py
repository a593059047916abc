"""Domain types shared by every part of the charging-market simulator.

Unit conventions used throughout the package:

* power in kW, energy in kWh,
* scenario-level prices in euro cent per kWh,
* window-level prices (the vectors exchanged during a negotiation) in
  euro cent per kW held for one slot, i.e. the scenario price multiplied
  by the slot duration in hours.  Agent objectives charge ``price * power``
  per slot, so this keeps per-slot money amounts consistent.

All types here are immutable after construction and safe to share between
concurrently running agent solves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "TimeGrid",
    "EVSession",
    "DSOSpec",
    "StorageSpec",
    "PriceVector",
    "PowerProfile",
    "SlotRecord",
    "Tolerances",
    "ValidationReport",
    "ScenarioValidationError",
    "remaining_energy_after",
    "validate_scenario",
]


@dataclass(frozen=True)
class TimeGrid:
    """A planning window: ``length`` slots of ``slot_hours`` each, starting at slot ``start``."""

    start: int
    length: int
    slot_hours: float

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("window must contain at least one slot")
        if self.slot_hours <= 0:
            raise ValueError("slot duration must be positive")

    @property
    def slots(self) -> range:
        return range(self.start, self.start + self.length)

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class EVSession:
    """One vehicle's charging request.

    ``energy_needed`` is the energy (kWh) that still has to reach the battery
    before ``departure``; it shrinks as power is applied.  ``loss_fraction``
    is the share of drawn power lost in conversion, so one slot at ``p`` kW
    stores ``(1 - loss_fraction) * slot_hours * p`` kWh.

    Invariants (checked by :func:`validate_scenario`, not the constructor):
    arrival <= departure, 0 <= power_min <= power_max, energy_needed >= 0,
    0 <= loss_fraction < 1, weight >= 0.
    """

    ev_id: str
    arrival: int
    departure: int
    power_min: float
    power_max: float
    weight: float
    loss_fraction: float
    energy_needed: float

    def energy_rate(self, slot_hours: float) -> float:
        """kWh stored per kW drawn during one slot."""
        return (1.0 - self.loss_fraction) * slot_hours


@dataclass(frozen=True)
class DSOSpec:
    """Generation cost and bounds of the single supplier.

    Producing net power ``q`` for one slot costs ``cost_quadratic * q**2 +
    cost_linear * q``.  ``cost_quadratic`` must be positive so the cost is
    strictly convex.
    """

    cost_quadratic: float
    cost_linear: float
    power_min: float = 0.0
    power_max: float = float("inf")


@dataclass(frozen=True)
class StorageSpec:
    """Storage element operated by the supplier.

    Positive ``storage_power`` discharges toward generation; the stored energy
    follows ``x' = x - throughput * slot_hours * storage_power``.  The supplier
    objective penalises deviation from ``energy_reference`` with weight
    ``tracking_weight`` per squared kWh.
    """

    power_min: float
    power_max: float
    energy_initial: float
    energy_reference: float
    throughput: float = 1.0
    tracking_weight: float = 1.0


def _as_readonly_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError("expected a one-dimensional sequence")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PriceVector:
    """Nonnegative per-slot prices over one planning window."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_readonly_vector(self.values)
        if arr.size == 0:
            raise ValueError("price vector must not be empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("prices must be finite")
        if np.any(arr < 0):
            raise ValueError("prices must be nonnegative")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, idx):
        return self.values[idx]

    @staticmethod
    def constant(level: float, length: int) -> "PriceVector":
        return PriceVector(np.full(length, float(level)))


@dataclass(frozen=True, eq=False)
class PowerProfile:
    """A per-slot power sequence (kW) over one planning window."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = _as_readonly_vector(self.values)
        if not np.all(np.isfinite(arr)):
            raise ValueError("powers must be finite")
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, idx):
        return self.values[idx]

    @staticmethod
    def zeros(length: int) -> "PowerProfile":
        return PowerProfile(np.zeros(length))


@dataclass(frozen=True)
class SlotRecord:
    """Applied closed-loop outcome for one time slot.

    ``price_applied`` is in euro cent per kWh (scenario units), powers in kW,
    ``storage_energy`` is the stored energy after the slot.  ``per_ev`` maps
    vehicle id to ``(applied power kW, remaining energy kWh)``.
    """

    slot: int
    price_applied: float
    demand_total: float
    generation: float
    storage_power: float
    storage_energy: float
    per_ev: Mapping[str, tuple[float, float]]
    iterations: int
    residual: float
    converged: bool


@dataclass(frozen=True)
class Tolerances:
    """Numeric tolerances shared by the agent solvers."""

    kkt: float = 1e-6
    energy: float = 1e-6

    def __post_init__(self) -> None:
        if self.kkt <= 0 or self.energy <= 0:
            raise ValueError("tolerances must be positive")


def remaining_energy_after(
    energy_needed: float, power: float, loss_fraction: float, slot_hours: float
) -> float:
    """Remaining required energy after one slot at ``power`` kW."""
    return energy_needed - (1.0 - loss_fraction) * slot_hours * power


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of scenario validation; empty ``violations`` means well-formed."""

    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "scenario ok"
        return "\n".join(self.violations)


class ScenarioValidationError(ValueError):
    """Raised when an operation requires a well-formed scenario but got violations."""

    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


def _check_session(ev, label: str, out: list[str]) -> None:
    if ev.departure < ev.arrival:
        out.append(f"{label}: empty charging window (departure before arrival)")
    if ev.power_min < 0:
        out.append(f"{label}: power_min must be nonnegative")
    if ev.power_max < ev.power_min:
        out.append(f"{label}: power_max below power_min")
    if ev.energy_needed < 0:
        out.append(f"{label}: energy must be nonnegative")
    if not 0 <= ev.loss_fraction < 1:
        out.append(f"{label}: loss fraction must lie in [0, 1)")
    if ev.weight < 0:
        out.append(f"{label}: weight must be nonnegative")


def validate_scenario(scenario) -> ValidationReport:
    """Collect every invariant violation in ``scenario``; empty report iff well-formed.

    Accepts any object with the :class:`~evmarket.scenario_io.Scenario` field
    layout (duck typed so the model layer stays free of parsing concerns).
    """
    out: list[str] = []

    grid = scenario.grid
    if grid.num_slots < 1:
        out.append("grid: num_slots must be at least 1")
    if grid.slot_minutes <= 0:
        out.append("grid: slot_minutes must be positive")

    dso = scenario.dso
    if dso.cost_quadratic <= 0:
        out.append("dso: cost not strictly convex (quadratic coefficient must be positive)")
    if dso.power_min > dso.power_max:
        out.append("dso: power_min above power_max")

    storage = scenario.storage
    if storage is not None:
        if not (storage.power_min <= 0 <= storage.power_max):
            out.append("storage: power bounds must straddle zero")
        if storage.energy_initial < 0:
            out.append("storage: energy_initial must be nonnegative")
        if storage.energy_reference < 0:
            out.append("storage: energy_reference must be nonnegative")
        if not 0 < storage.throughput <= 1:
            out.append("storage: throughput must lie in (0, 1]")
        if storage.tracking_weight < 0:
            out.append("storage: tracking_weight must be nonnegative")

    solver = scenario.solver
    if solver.initial_price < 0:
        out.append("solver: initial_price must be nonnegative")
    if solver.step_size <= 0:
        out.append("solver: step_size must be positive")
    if solver.balance_tolerance <= 0:
        out.append("solver: balance_tolerance must be positive")
    if solver.max_iterations < 1:
        out.append("solver: max_iterations must be at least 1")
    if solver.step_schedule not in ("constant", "diminishing"):
        out.append("solver: step_schedule must be 'constant' or 'diminishing'")
    if solver.kkt_tolerance <= 0:
        out.append("solver: kkt_tolerance must be positive")
    if solver.energy_tolerance <= 0:
        out.append("solver: energy_tolerance must be positive")

    fleet = scenario.fleet
    if fleet is not None:
        if fleet.count < 0:
            out.append("fleet: count must be nonnegative")
        _check_session(
            _FleetProbe(fleet), "fleet", out
        )

    seen: set[str] = set()
    for ev in scenario.evs:
        label = f"ev {ev.ev_id}"
        if ev.ev_id in seen:
            out.append(f"{label}: duplicate id")
        seen.add(ev.ev_id)
        _check_session(ev, label, out)

    return ValidationReport(tuple(out))


class _FleetProbe:
    """Adapts a fleet spec to the per-session checks (window fields are vacuous)."""

    def __init__(self, fleet):
        self.arrival = 0
        self.departure = 0
        self.power_min = fleet.power_min
        self.power_max = fleet.power_max
        self.weight = fleet.weight
        self.loss_fraction = fleet.loss_fraction
        self.energy_needed = 0.0
