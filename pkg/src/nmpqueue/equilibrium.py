"""Stationary states, throughput formulas and relaxation times.

Two throughput formulas are provided for a single-server queue with Poisson
input of rate ``L`` and service moments ``m1 = E(eta)``, ``m2 = E(eta^2)``:

* :func:`pk_rate` inverts ``rho = L^2 m2 / (2 (1 - L m1))``, the mean number
  of *waiting* customers;
* :func:`pk_rate_in_system` inverts ``rho = L m1 + L^2 m2 / (2 (1 - L m1))``,
  the mean number *in the system* (waiting plus in service).

The measure dynamics conserve the mean queue length counted with the customer
in service, so their long-run throughput is the second one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .engine import DEFAULT, EngineConfig, Flow
from .measure import Rectangle, StateMeasure, core_rectangle, eps_close, mean_queue, sup_distance
from .service import ServiceDistribution

CORE_BUDGET = 0.01


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float = math.nan):
        super().__init__(msg)
        self.residual = residual


def _check_moments(rho: float, m1: float, m2: float) -> None:
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if m1 < 1 or m2 < m1 * m1 * (1 - 1e-12):
        raise ValueError(f"inconsistent service moments m1 = {m1}, m2 = {m2}")


def pk_rate(rho: float, m1: float, m2: float) -> float:
    """Positive root ``L`` of ``rho = L^2 m2 / (2 (1 - L m1))``."""
    _check_moments(rho, m1, m2)
    a = m1 * rho
    # (sqrt(a^2 + 2 rho m2) - a) / m2 without cancellation
    return 2.0 * rho / (math.sqrt(a * a + 2.0 * rho * m2) + a)


def pk_rho(rate: float, m1: float, m2: float) -> float:
    return rate * rate * m2 / (2.0 * (1.0 - rate * m1))


def pk_rate_in_system(rho: float, m1: float, m2: float) -> float:
    """Root ``L`` in ``(0, 1/m1)`` of ``rho = L m1 + L^2 m2 / (2 (1 - L m1))``.

    Clearing the denominator gives ``(m2 - 2 m1^2) L^2 + 2 m1 (1 + rho) L - 2 rho = 0``.
    """
    _check_moments(rho, m1, m2)
    a = m2 - 2.0 * m1 * m1
    b = 2.0 * m1 * (1.0 + rho)
    return 4.0 * rho / (b + math.sqrt(b * b + 8.0 * a * rho))


def pk_rho_in_system(rate: float, m1: float, m2: float) -> float:
    return rate * m1 + pk_rho(rate, m1, m2)


@dataclass
class StationaryResult:
    state: StateMeasure
    rate: float
    rho: float
    iterations: int
    residual: float
    converged: bool = True

    @property
    def rect(self) -> Rectangle:
        return core_rectangle(self.state, CORE_BUDGET)

    def to_json(self) -> dict:
        return {
            "rate": self.rate,
            "rho": self.rho,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "mean_queue": mean_queue(self.state),
            "idle_mass": self.state.idle_mass,
            "lost_mass": self.state.lost_mass,
        }


def simple_state(rho: float) -> StateMeasure:
    """Mixture of the idle point and one ``tau = 0`` atom with mean ``rho``."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    n = max(1, math.ceil(rho))
    w = rho / n
    return StateMeasure.from_atoms({(n, 0): w}, idle_mass=1.0 - w)


def stationary_state(dist: ServiceDistribution, rho: float, tol: float = 1e-10, max_T: int = 200_000,
                     init: StateMeasure | None = None, config: EngineConfig = DEFAULT,
                     check_every: int = 16, strict: bool = True) -> StationaryResult:
    """Long-run limit of the dynamics started from a state with mean ``rho``.

    Every ``check_every`` steps the one-step change on the core rectangle of the
    current state is measured; the run stops once it falls below ``tol``.  The
    rate is the mean of ``lambda(t)`` over the final 10% of the run.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    nu = simple_state(rho) if init is None else init
    flow = Flow(nu, dist, config)
    lam: list[float] = []
    residual = math.inf
    prev: StateMeasure | None = None
    while flow.t < max_T:
        rate, _ = flow.step()
        lam.append(rate)
        if flow.t % check_every == check_every - 1:
            prev = flow.snapshot()
        elif prev is not None and flow.t % check_every == 0:
            cur = flow.snapshot()
            residual = sup_distance(cur, prev, core_rectangle(cur, CORE_BUDGET))
            prev = None
            if residual < tol:
                break
    converged = residual < tol
    if not converged and strict:
        raise ConvergenceError(f"no convergence within {max_T} steps (residual {residual:.3e})", residual)
    tail = lam[-max(1, len(lam) // 10):]
    return StationaryResult(flow.snapshot(), float(np.mean(tail)), float(mean_queue(nu)), flow.t, residual, converged)


def detect_T_bn(flow: Flow, target: StationaryResult | StateMeasure, rect: Rectangle, eps: float,
                horizon: int, after: int | None = None, trace: list[float] | None = None) -> int:
    """Step ``flow`` until its state is ``eps``-close to ``target`` on ``rect``.

    Every step is a scan point.  The current state is tested first when its time
    exceeds ``after``.  Rates of the steps taken are appended to ``trace``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    ref = target.state if isinstance(target, StationaryResult) else target
    after = flow.t - 1 if after is None else after
    tau_range = (rect.tau_lo, rect.tau_hi)

    def close() -> bool:
        # cheap idle test before materializing the rows
        if rect.has_idle and (ref.idle_mass > 0) != (flow.idle > 0):
            return False
        if rect.has_idle and ref.idle_mass > 0:
            r = flow.idle / ref.idle_mass
            if not (1 - eps < r < 1 + eps and 1 - eps < 1 / r < 1 + eps):
                return False
        return eps_close(flow.snapshot(tau_range), ref, rect, eps)

    if flow.t > after and close():
        return flow.t
    while flow.t < horizon:
        rate, _ = flow.step()
        if trace is not None:
            trace.append(rate)
        if flow.t > after and close():
            return flow.t
    raise ConvergenceError(f"state not {eps}-close to the target by t = {horizon}")


def c_pk_limit(triples: Iterable[Sequence[float]], tol: float = 1e-9, in_system: bool = False) -> float:
    """Throughput of the limit of ``(rho_k, m1_k, m2_k)``.

    The sequence counts as convergent when its last step moves every coordinate
    by at most ``tol`` relative to its size.
    """
    seq = [tuple(float(x) for x in t) for t in triples]
    if not seq:
        raise ValueError("empty sequence")
    if len(seq) > 1:
        last, prev = seq[-1], seq[-2]
        jump = max(abs(a - b) / max(1.0, abs(a)) for a, b in zip(last, prev))
        if jump > tol:
            raise ConvergenceError(f"sequence still moving by {jump:.3e} at its end")
    f = pk_rate_in_system if in_system else pk_rate
    value = f(*seq[-1])
    if not value > 0:
        raise ConvergenceError("limit throughput is not positive")
    return value
