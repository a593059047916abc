"""Per-vehicle subproblem: maximize charging utility minus energy cost.

Each vehicle maximizes ``sum_t [w * ln(1 + p(t)) - price(t) * p(t)]`` over its
remaining window, subject to its power box and the requirement that the energy
still needed is fully delivered by departure.  The optimizer has water-filling
structure: ``p(t) = clamp(w / (price(t) + mu * rate) - 1, p_min, p_max)`` for a
scalar multiplier ``mu`` on the terminal-energy constraint, found by bisection
so that the delivered energy matches the requirement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import EVSession, PowerProfile, PriceVector, TimeGrid, Tolerances

__all__ = ["EVSubproblem", "EVSolution", "utility", "solve_ev", "solve_ev_batch"]

# Padding price for slots past a vehicle's departure; large enough that the
# water-filling formula pins padded slots to the lower bound.
_PAD_PRICE = 1e30


@dataclass(frozen=True)
class EVSubproblem:
    """One vehicle's data over its remaining window ``[window.start, departure)``."""

    session: EVSession
    window: TimeGrid
    prices: PriceVector

    def __post_init__(self) -> None:
        if len(self.prices) != self.window.length:
            raise ValueError("price vector length must equal the window length")
        if self.window.length != self.session.departure - self.window.start:
            raise ValueError("window must span exactly the slots up to departure")


@dataclass(frozen=True)
class EVSolution:
    """Optimal charging profile plus the terminal-energy multiplier.

    ``energy_multiplier`` prices one kWh of required energy in the same money
    unit as the slot prices.  ``feasible`` is False when the requirement cannot
    be met inside the box, in which case the profile is the best-effort
    saturation at the violated bound.
    """

    profile: PowerProfile
    energy_multiplier: float
    objective: float
    feasible: bool


def utility(power: float, weight: float, offset: float = 1.0) -> float:
    """Charging satisfaction ``weight * ln(offset + power)``: concave, increasing, 0 at 0."""
    if power < 0:
        raise ValueError("power must be nonnegative")
    return weight * math.log(offset + power)


def _clamped_power(q: np.ndarray, weight: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                   offset: float) -> np.ndarray:
    """Water-filling step: optimal power per slot at effective prices ``q``."""
    positive = q > 0
    raw = np.where(positive, weight / np.where(positive, q, 1.0) - offset, np.inf)
    return np.clip(raw, lo, hi)


class EVBatchWorkspace:
    """Precomputed arrays for repeatedly solving the same set of vehicles.

    The coordinator keeps one workspace per negotiation and re-solves it at
    every price update; only the prices change between calls.
    """

    def __init__(self, subproblems: Sequence[EVSubproblem], offset: float = 1.0):
        if not subproblems:
            raise ValueError("workspace needs at least one subproblem")
        slot_hours = subproblems[0].window.slot_hours
        for sub in subproblems:
            if sub.window.slot_hours != slot_hours:
                raise ValueError("subproblems must share the slot duration")
        self.subproblems = list(subproblems)
        self.offset = offset
        self.lengths = np.array([s.window.length for s in subproblems])
        self.width = int(self.lengths.max())
        self.mask = np.arange(self.width)[None, :] < self.lengths[:, None]
        self.maskf = self.mask.astype(float)
        self.weight = np.array([s.session.weight for s in subproblems])[:, None]
        self.lo = np.array([s.session.power_min for s in subproblems])[:, None]
        self.hi = np.array([s.session.power_max for s in subproblems])[:, None]
        self.rate = np.array([s.session.energy_rate(slot_hours) for s in subproblems])
        self.need = np.array([s.session.energy_needed for s in subproblems])
        cap_hi = self.rate * self.hi[:, 0] * self.lengths
        cap_lo = self.rate * self.lo[:, 0] * self.lengths
        self.over = self.need > cap_hi + 1e-12
        self.under = self.need < cap_lo - 1e-12
        self.solvable = ~(self.over | self.under)
        self.clamp_hi_price = self.weight[:, 0] / (offset + self.hi[:, 0])
        self.clamp_lo_price = self.weight[:, 0] / (offset + self.lo[:, 0])
        self.lam = np.full((len(subproblems), self.width), _PAD_PRICE)

    def load_prices(self, price_rows: Sequence[np.ndarray]) -> None:
        for i, row in enumerate(price_rows):
            self.lam[i, : self.lengths[i]] = row

    def _energy_at(self, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = self.lam + (mu * self.rate)[:, None]
        p = _clamped_power(q, self.weight, self.lo, self.hi, self.offset)
        return p, self.rate * np.einsum("ij,ij->i", p, self.maskf)

    def solve(
        self,
        eps: Tolerances = Tolerances(),
        mu_hints: np.ndarray | None = None,
        max_iter: int = 200,
    ) -> list[EVSolution]:
        lam, mask = self.lam, self.mask
        need, rate = self.need, self.rate
        over, under, solvable = self.over, self.under, self.solvable

        # Saturation bounds: below mu_low every slot sits at the upper bound,
        # above mu_high every slot sits at the lower bound.
        lam_max = np.where(mask, lam, -np.inf).max(axis=1)
        lam_min = np.where(mask, lam, np.inf).min(axis=1)
        mu_low = (self.clamp_hi_price - lam_max) / rate - 1.0
        mu_high = (self.clamp_lo_price - lam_min) / rate + 1.0

        lo_mu = mu_low
        hi_mu = mu_high
        if mu_hints is not None:
            hints = np.asarray(mu_hints, dtype=float)
            span = 0.02 * (mu_high - mu_low) + 1e-3
            good = np.isfinite(hints)
            cand_lo = np.where(good, np.maximum(mu_low, hints - span), mu_low)
            cand_hi = np.where(good, np.minimum(mu_high, hints + span), mu_high)
            # Expand geometrically until the energy residual changes sign
            # across the candidate bracket, falling back to the saturation
            # bounds; hints never change the result beyond tolerance.
            for _ in range(8):
                _, e_lo = self._energy_at(cand_lo)
                _, e_hi = self._energy_at(cand_hi)
                bad_lo = solvable & (e_lo < need)
                bad_hi = solvable & (e_hi > need)
                if not (bad_lo.any() or bad_hi.any()):
                    break
                span = span * 8.0
                cand_lo = np.where(bad_lo, np.maximum(mu_low, cand_lo - span), cand_lo)
                cand_hi = np.where(bad_hi, np.minimum(mu_high, cand_hi + span), cand_hi)
            else:
                cand_lo, cand_hi = mu_low.copy(), mu_high.copy()
            lo_mu, hi_mu = cand_lo, cand_hi

        mu = 0.5 * (lo_mu + hi_mu)
        active = solvable.copy()
        power, energy = self._energy_at(mu)
        for _ in range(max_iter):
            gap = energy - need
            active &= ~(np.abs(gap) <= eps.energy)
            if not active.any():
                break
            lo_mu = np.where(active & (gap > 0), mu, lo_mu)
            hi_mu = np.where(active & (gap < 0), mu, hi_mu)
            mu = np.where(active, 0.5 * (lo_mu + hi_mu), mu)
            power, energy = self._energy_at(mu)

        # Best-effort saturation for requirements outside the box.
        if over.any() or under.any():
            mu = np.where(over, mu_low, mu)
            mu = np.where(under, mu_high, mu)
            power, energy = self._energy_at(mu)

        feasible = np.abs(energy - need) <= eps.energy
        term = (self.weight * np.log(self.offset + power) - lam * power) * self.maskf
        objective = term.sum(axis=1)

        return [
            EVSolution(
                profile=PowerProfile(power[i, : self.lengths[i]]),
                energy_multiplier=float(mu[i]),
                objective=float(objective[i]),
                feasible=bool(feasible[i]),
            )
            for i in range(len(self.subproblems))
        ]


def solve_ev_batch(
    subproblems: Sequence[EVSubproblem],
    eps: Tolerances = Tolerances(),
    mu_hints: np.ndarray | None = None,
    max_iter: int = 200,
    offset: float = 1.0,
) -> list[EVSolution]:
    """Solve several vehicle subproblems at once (vectorized bisection).

    All subproblems must share the slot duration.  ``mu_hints`` optionally
    narrows the initial multiplier bracket around a previous solution.
    """
    if not subproblems:
        return []
    ws = EVBatchWorkspace(subproblems, offset=offset)
    ws.load_prices([sub.prices.values for sub in subproblems])
    return ws.solve(eps=eps, mu_hints=mu_hints, max_iter=max_iter)


def solve_ev(
    sub: EVSubproblem,
    eps: Tolerances = Tolerances(),
    offset: float = 1.0,
) -> EVSolution:
    """Solve one vehicle's subproblem; see :func:`solve_ev_batch`."""
    return solve_ev_batch([sub], eps=eps, offset=offset)[0]


def stationarity_residual(
    sub: EVSubproblem, solution: EVSolution, offset: float = 1.0
) -> float:
    """Largest violation of the first-order optimality conditions.

    Interior slots must satisfy ``w/(offset+p) = price + mu*rate`` exactly;
    slots at a bound only need the sign of that gradient to point outward.
    """
    p = solution.profile.values
    lam = sub.prices.values
    ses = sub.session
    rate = ses.energy_rate(sub.window.slot_hours)
    grad = ses.weight / (offset + p) - lam - solution.energy_multiplier * rate
    width = ses.power_max - ses.power_min
    edge = 1e-9 * max(1.0, width)
    at_lo = p <= ses.power_min + edge
    at_hi = p >= ses.power_max - edge
    res = np.abs(grad)
    res = np.where(at_lo, np.maximum(grad, 0.0), res)
    res = np.where(at_hi, np.maximum(-grad, 0.0), res)
    return float(res.max()) if res.size else 0.0
