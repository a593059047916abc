"""Supplier subproblem: joint generation and storage dispatch at given prices.

The supplier maximizes ``sum_t [price(t) * P_l(t) - C(P_l(t) - P_s(t))]`` minus
a quadratic penalty for letting the stored energy drift away from its
reference, over box bounds on both generation ``P_l`` and storage power
``P_s``.  The objective is a strictly concave quadratic, solved by accelerated
projected gradient with a fixed step ``1/L``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import DSOSpec, PowerProfile, PriceVector, StorageSpec, TimeGrid, Tolerances

__all__ = [
    "DSOSubproblem",
    "DSOSolution",
    "ConvergenceError",
    "generation_cost",
    "storage_tracking_penalty",
    "solve_dso",
]


class ConvergenceError(RuntimeError):
    """Solver failed to reach the requested stationarity residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class DSOSubproblem:
    """Supplier data for one negotiation window; ``energy_now`` is the stored energy."""

    dso: DSOSpec
    storage: StorageSpec
    energy_now: float
    window: TimeGrid
    prices: PriceVector

    def __post_init__(self) -> None:
        if len(self.prices) != self.window.length:
            raise ValueError("price vector length must equal the window length")


@dataclass(frozen=True)
class DSOSolution:
    generation: PowerProfile
    storage_power: PowerProfile
    objective: float
    kkt_residual: float


def generation_cost(net_power, quad_coeff: float, lin_coeff: float):
    """Cost of producing ``net_power`` for one slot: ``quad*q**2 + lin*q``."""
    return quad_coeff * net_power * net_power + lin_coeff * net_power


def storage_tracking_penalty(
    energy_now: float, storage_power, storage: StorageSpec, grid: TimeGrid
) -> float:
    """Sum over the window of squared deviation of stored energy from reference.

    The stored energy after slot ``j`` is ``energy_now`` minus the cumulative
    discharged energy ``throughput * slot_hours * sum_{i<=j} P_s(i)``.
    """
    values = storage_power.values if isinstance(storage_power, PowerProfile) else np.asarray(
        storage_power, dtype=float
    )
    if values.size != grid.length:
        raise ValueError("profile length must equal the window length")
    moved = storage.throughput * grid.slot_hours * np.cumsum(values)
    dev = energy_now - moved - storage.energy_reference
    return float(np.dot(dev, dev))


# Quadratic forms reused across negotiation iterations, keyed by the window
# length and cost parameters (prices and stored energy only shift the linear
# term).
_FORM_CACHE: dict[tuple, tuple[np.ndarray, float]] = {}


def _quadratic_form(n: int, quad: float, rho: float, dtc: float) -> tuple[np.ndarray, float]:
    key = (n, quad, rho, dtc)
    cached = _FORM_CACHE.get(key)
    if cached is not None:
        return cached
    eye = np.eye(n)
    top = np.hstack([eye, -eye])
    bot = np.hstack([-eye, eye])
    q_mat = 2.0 * quad * np.vstack([top, bot])
    idx = np.arange(n)
    overlap = n - np.maximum(idx[:, None], idx[None, :])
    q_mat[n:, n:] += 2.0 * rho * dtc * dtc * overlap
    lipschitz = float(np.linalg.eigvalsh(q_mat)[-1])
    _FORM_CACHE[key] = (q_mat, lipschitz)
    return q_mat, lipschitz


def solve_dso(
    sub: DSOSubproblem,
    eps: Tolerances = Tolerances(),
    max_iter: int = 100_000,
    start: tuple[np.ndarray, np.ndarray] | None = None,
) -> DSOSolution:
    """Return the unique maximizer of the supplier objective on the boxes.

    ``start`` warm-starts the iteration (used by the coordinator across price
    updates); it never changes the answer beyond the stationarity tolerance.
    Raises :class:`ConvergenceError` if the residual target is not met within
    ``max_iter`` iterations.
    """
    n = sub.window.length
    lam = sub.prices.values
    quad, lin = sub.dso.cost_quadratic, sub.dso.cost_linear
    st = sub.storage
    rho = st.tracking_weight
    dtc = st.throughput * sub.window.slot_hours
    drift = sub.energy_now - st.energy_reference

    q_mat, lipschitz = _quadratic_form(n, quad, rho, dtc)
    counts = np.arange(n, 0, -1, dtype=float)
    g = np.concatenate([lam - lin, np.full(n, lin) + 2.0 * rho * dtc * drift * counts])
    lo = np.concatenate([np.full(n, sub.dso.power_min), np.full(n, st.power_min)])
    hi = np.concatenate([np.full(n, sub.dso.power_max), np.full(n, st.power_max)])
    constant = -rho * n * drift * drift

    if start is not None:
        z = np.clip(np.concatenate([start[0], start[1]]), lo, hi)
    else:
        z = np.clip(np.zeros(2 * n), lo, hi)

    def value(point: np.ndarray) -> float:
        return float(g @ point - 0.5 * point @ (q_mat @ point))

    # Projected gradient guarantees monotone ascent; a Newton step on the
    # estimated free set, accepted only when it improves the objective, makes
    # the active set settle in a handful of iterations.  Convergence is always
    # certified by the projected-stationarity residual, never assumed.
    inv_l = 1.0 / lipschitz
    span = float(np.max(hi - lo)) if np.all(np.isfinite(hi - lo)) else 1.0
    best = value(z)
    residual = math.inf
    converged = False
    for _ in range(max_iter):
        grad = g - q_mat @ z
        residual = float(np.abs(z - np.clip(z + grad, lo, hi)).max())
        if residual <= eps.kkt:
            converged = True
            break
        act_tol = min(1e-4 * (1.0 + span), residual)
        at_lo = (z - lo <= act_tol) & (grad < 0)
        at_hi = (hi - z <= act_tol) & (grad > 0)
        free = ~(at_lo | at_hi)
        trial = np.where(at_lo, lo, np.where(at_hi, hi, z))
        if free.any():
            rhs = g[free] - q_mat[np.ix_(free, ~free)] @ trial[~free]
            try:
                trial[free] = np.linalg.solve(q_mat[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                trial = None
            else:
                trial = np.clip(trial, lo, hi)
        if trial is not None:
            trial_value = value(trial)
            if trial_value > best + 1e-14 * (1.0 + abs(best)):
                z = trial
                best = trial_value
                continue
        z = np.clip(z + inv_l * grad, lo, hi)
        best = value(z)
    if not converged:
        raise ConvergenceError(
            f"supplier solve stalled at residual {residual:.3e} after {max_iter} iterations",
            residual,
        )

    objective = float(g @ z - 0.5 * z @ (q_mat @ z) + constant)
    return DSOSolution(
        generation=PowerProfile(z[:n]),
        storage_power=PowerProfile(z[n:]),
        objective=objective,
        kkt_residual=residual,
    )


def dso_objective(sub: DSOSubproblem, generation, storage_power) -> float:
    """Evaluate the supplier objective at an arbitrary point (used by tests)."""
    gen = generation.values if isinstance(generation, PowerProfile) else np.asarray(generation)
    ps = storage_power.values if isinstance(storage_power, PowerProfile) else np.asarray(
        storage_power
    )
    net = gen - ps
    revenue = float(sub.prices.values @ gen)
    cost = float(np.sum(generation_cost(net, sub.dso.cost_quadratic, sub.dso.cost_linear)))
    tracking = storage_tracking_penalty(sub.energy_now, ps, sub.storage, sub.window)
    return revenue - cost - sub.storage.tracking_weight * tracking
