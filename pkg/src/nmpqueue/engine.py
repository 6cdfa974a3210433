"""One-server measure dynamics: vertical shift, exit, Poisson inflow.

Two routes compute the same dynamics:

* ``stage_vertical`` / ``stage_exit`` / ``nmp_step`` act on immutable
  :class:`StateMeasure` values and follow the three stages literally;
* :class:`Flow` is the working engine used for long runs.  It keys rows by
  birth time so the vertical shift costs nothing, and it accumulates the
  Poisson inflow of rows that face no hazard (``Pois(a) * Pois(b) = Pois(a + b)``),
  convolving only when a hazard, a snapshot or the caller needs the row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .measure import (
    POISSON_TOL,
    PRUNE,
    Row,
    StateMeasure,
    _add_rows,
    convolve_poisson,
    convolve_row,
    poisson_window,
    prune_row,
    row_moment,
)
from .service import ServiceDistribution

log = logging.getLogger(__name__)


class ConservationError(RuntimeError):
    """Cumulative conservation drift exceeded the configured budget."""


class FixedPointError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class EngineConfig:
    prune: float = PRUNE
    poisson_tol: float = POISSON_TOL
    conservation_budget: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("prune", "poisson_tol", "conservation_budget"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


DEFAULT = EngineConfig()


@dataclass
class RateTrace:
    """Rates ``lam[t - 1] = lambda(t)`` for ``t = 1..T`` plus optional event marks."""

    lam: np.ndarray
    events: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.lam.size)

    def at(self, t: int) -> float:
        if not 1 <= t <= self.lam.size:
            raise IndexError(f"time {t} outside [1, {self.lam.size}]")
        return float(self.lam[t - 1])


@dataclass(frozen=True)
class StepReport:
    lambda_out: float
    mass_check: float
    mean_check: float


# -- literal stages on StateMeasure -------------------------------------

def stage_vertical(mu: StateMeasure) -> StateMeasure:
    rows = {tau + 1: (lo, arr) for tau, (lo, arr) in mu.rows.items()}
    return StateMeasure(rows, mu.idle_mass, mu.lost_mass, mu.lost_moment)


def stage_exit(phi: StateMeasure, dist: ServiceDistribution) -> tuple[StateMeasure, float]:
    if 0 in phi.rows:
        raise ValueError("stage_exit expects a shifted measure with an empty tau = 0 row")
    if phi.rows and max(phi.rows) > dist.max_support:
        raise ValueError(f"state has tau = {max(phi.rows)} beyond the hazard table ({dist.max_support})")
    rows: dict[int, Row] = {}
    down: Row | None = None
    idle = phi.idle_mass
    lam = 0.0
    for tau, (lo, arr) in phi.rows.items():
        p = dist.atom_hazard.get(tau, 0.0)
        if p < 1.0:
            rows[tau] = (lo, arr * (1.0 - p))
        if p > 0.0:
            ex = arr * p
            lam += float(ex.sum())
            if lo == 1:
                idle += float(ex[0])
                ex, lo = ex[1:], 2
            if ex.size:
                part = (lo - 1, ex)
                down = part if down is None else _add_rows(down, part)
    if down is not None:
        rows[0] = down
    return StateMeasure(rows, idle, phi.lost_mass, phi.lost_moment), lam


def nmp_step(mu: StateMeasure, dist: ServiceDistribution, config: EngineConfig = DEFAULT
             ) -> tuple[StateMeasure, StepReport]:
    from .measure import mean_queue

    before = mean_queue(mu) + mu.lost_moment
    psi, lam = stage_exit(stage_vertical(mu), dist)
    out = convolve_poisson(psi, lam, config.poisson_tol, config.prune)
    mean_check = mean_queue(out) + out.lost_moment - before - (lam * psi.total() - lam)
    return out, StepReport(lam, out.total() - mu.total(), mean_check)


# -- working engine -------------------------------------------------------

class _Row:
    __slots__ = ("lo", "arr", "pending", "mass", "moment")

    def __init__(self, lo: int, arr: np.ndarray, pending: float = 0.0):
        self.lo, self.arr, self.pending = lo, arr, pending
        self._refresh()

    def _refresh(self) -> None:
        self.mass = float(self.arr.sum())
        self.moment = row_moment(self.lo, self.arr)

    def effective_moment(self) -> float:
        return self.moment + self.mass * self.pending


class Flow:
    """Mutable single-server state advanced one step at a time."""

    def __init__(self, nu: StateMeasure, dist: ServiceDistribution, config: EngineConfig = DEFAULT):
        self.dist = dist
        self.config = config
        self.t = 0
        self.idle = float(nu.idle_mass)
        self.lost = float(nu.lost_mass)
        self.lost_moment = float(nu.lost_moment)
        self.rows: dict[int, _Row] = {}
        self._due: dict[int, list[int]] = {}
        for tau, (lo, arr) in nu.rows.items():
            birth = -tau
            self.rows[birth] = _Row(lo, np.array(arr, dtype=float))
            self._schedule(birth)
        self.initial_total = self.stored_mass() + self.lost
        self.drift = 0.0

    # bookkeeping
    def _schedule(self, birth: int) -> None:
        tau = self.t - birth
        a = self.dist.next_atom(tau)
        if a is None:
            raise ValueError(f"row at tau = {tau} lies beyond the service support (max {self.dist.max_support})")
        self._due.setdefault(birth + a, []).append(birth)

    def _materialize(self, row: _Row) -> None:
        if row.pending <= 0.0:
            return
        k_lo, pmf = poisson_window(row.pending, self.config.poisson_tol)
        m, mom = row.mass, row.effective_moment()
        row.lo, row.arr = convolve_row(row.lo, row.arr, k_lo, pmf)
        row.pending = 0.0
        row._refresh()
        self.lost += m - row.mass
        self.lost_moment += mom - row.moment
        self._prune(row)

    def _prune(self, row: _Row) -> None:
        lo, arr, dm, dmom = prune_row(row.lo, row.arr, self.config.prune)
        if dm:
            row.lo, row.arr = lo, arr
            self.lost += dm
            self.lost_moment += dmom
            row.mass -= dm
            row.moment -= dmom

    # queries
    def stored_mass(self) -> float:
        return self.idle + sum(r.mass for r in self.rows.values())

    def mean_queue(self) -> float:
        return sum(r.effective_moment() for r in self.rows.values())

    def banded_mean(self, band: tuple[int, float]) -> float:
        a, b = band
        return sum(r.effective_moment() for birth, r in self.rows.items() if a <= self.t - birth <= b)

    def snapshot(self, tau_range: tuple[int, float] | None = None) -> StateMeasure:
        """Materialized copy of the current state; the working state is left untouched."""
        rows: dict[int, Row] = {}
        lost, lm = self.lost, self.lost_moment
        for birth, r in self.rows.items():
            tau = self.t - birth
            if tau_range is not None and not tau_range[0] <= tau <= tau_range[1]:
                continue
            lo, arr = r.lo, r.arr
            if r.pending > 0.0:
                k_lo, pmf = poisson_window(r.pending, self.config.poisson_tol)
                lo, arr = convolve_row(lo, arr, k_lo, pmf)
                got = float(arr.sum())
                lost += r.mass - got
                lm += r.effective_moment() - row_moment(lo, arr)
            lo, arr, dm, dmom = prune_row(lo, arr, self.config.prune)
            lost += dm
            lm += dmom
            if arr.size:
                rows[tau] = (lo, arr.copy())
        return StateMeasure(rows, self.idle, lost, lm)

    # dynamics
    def step(self, lam_in: float | None = None) -> tuple[float, StepReport]:
        """Advance one step; returns the exit mass and the conservation report.

        With ``lam_in`` the inflow is exogenous (general flow process),
        otherwise it equals the exit mass (the non-linear process).
        """
        n_before = self.mean_queue() + self.lost_moment
        self.t += 1
        t = self.t
        lam = 0.0
        lam_moment = 0.0
        down: Row | None = None
        idle_gain = 0.0
        for birth in self._due.pop(t, ()):
            row = self.rows[birth]
            self._materialize(row)
            p = self.dist.atom_hazard[t - birth]
            lo = row.lo
            if p >= 1.0:
                ex = row.arr
                lam += row.mass
                lam_moment += row.moment
                del self.rows[birth]
            else:
                ex = row.arr * p
                lam += p * row.mass
                lam_moment += p * row.moment
                row.arr = row.arr * (1.0 - p)
                row.mass *= 1.0 - p
                row.moment *= 1.0 - p
                self._prune(row)
                if row.arr.size:
                    self._schedule(birth)
                else:
                    del self.rows[birth]
            if lo == 1:
                idle_gain += float(ex[0])
                ex, lo = ex[1:], 2
            if ex.size:
                part = (lo - 1, ex)
                down = part if down is None else _add_rows(down, part)
        # exits move n -> n - 1, the idle part included
        down_mass = lam - idle_gain
        down_moment = lam_moment - lam

        inflow = lam if lam_in is None else float(lam_in)
        if inflow < 0:
            raise ValueError(f"negative input rate {inflow} at t = {t}")
        if lam_in is None and lam > 1.0 + 1e-9:
            raise ValueError(f"endogenous rate {lam} exceeds 1")
        idle_b = self.idle + idle_gain
        stored_b = idle_b + down_mass
        # lost mass no longer receives inflow; its share is booked as lost moment
        lost_b = self.lost
        self.lost_moment += inflow * lost_b
        for r in self.rows.values():
            stored_b += r.mass
            r.pending += inflow

        if inflow > 0.0:
            k_lo, pmf = poisson_window(inflow, self.config.poisson_tol)
            new: Row | None = None
            if down is not None:
                new = convolve_row(down[0], down[1], k_lo, pmf)
            self.idle = idle_b * float(pmf[0]) if k_lo == 0 else 0.0
            if idle_b > 0.0:
                start = max(k_lo, 1)
                feed = idle_b * pmf[start - k_lo:]
                if feed.size:
                    new = (start, feed) if new is None else _add_rows(new, (start, feed))
            if new is not None:
                row = _Row(new[0], new[1])
                self.lost += down_mass + idle_b - self.idle - row.mass
                self.lost_moment += down_moment + (down_mass + idle_b) * inflow - row.moment
            else:
                row = None
                self.lost += idle_b - self.idle
                self.lost_moment += idle_b * inflow
        else:
            self.idle = idle_b
            row = None if down is None else _Row(down[0], down[1])

        if row is not None:
            self._prune(row)
            if row.arr.size:
                self.rows[t] = row
                self._schedule(t)

        n_after = self.mean_queue() + self.lost_moment
        mean_check = n_after - n_before - (inflow * (stored_b + lost_b) - lam)
        mass_check = self.stored_mass() + self.lost - self.initial_total
        self.drift += abs(mean_check)
        if self.drift > self.config.conservation_budget:
            raise ConservationError(
                f"cumulative mean drift {self.drift:.3e} exceeds budget {self.config.conservation_budget:.1e} at t = {t}"
            )
        return lam, StepReport(lam, mass_check, mean_check)


# -- runs -------------------------------------------------------------------

def geometric_schedule(T: int, pinned: Iterable[int] = ()) -> list[int]:
    times, t = set(), 1
    while t <= T:
        times.add(t)
        t *= 2
    times.update(int(p) for p in pinned if 1 <= p <= T)
    return sorted(times)


@dataclass
class RunResult:
    trace: RateTrace
    final: StateMeasure
    mean_queue: np.ndarray
    idle_mass: np.ndarray
    lost_mass: np.ndarray
    lost_moment: np.ndarray
    banded_mean: np.ndarray | None = None
    snapshots: dict[int, StateMeasure] = field(default_factory=dict)
    max_mean_drift: float = 0.0


def _run(nu: StateMeasure, dist: ServiceDistribution, T: int, lam_in: Sequence[float] | None,
         snapshots: str | Iterable[int] | None, band: tuple[int, float] | None,
         config: EngineConfig, monitor: Callable[[Flow, float], bool] | None) -> RunResult:
    if T < 1:
        raise ValueError("horizon must be at least 1")
    if snapshots == "geometric":
        snap_times = set(geometric_schedule(T))
    else:
        snap_times = set(snapshots or ())
    flow = Flow(nu, dist, config)
    lam = np.zeros(T)
    meanq = np.zeros(T)
    idle = np.zeros(T)
    lost = np.zeros(T)
    lost_mom = np.zeros(T)
    banded = np.zeros(T) if band is not None else None
    snaps = {}
    max_drift = 0.0
    n_used = T
    for i in range(T):
        rate, rep = flow.step(None if lam_in is None else lam_in[i])
        lam[i] = rate
        meanq[i] = flow.mean_queue()
        idle[i] = flow.idle
        lost[i] = flow.lost
        lost_mom[i] = flow.lost_moment
        max_drift = max(max_drift, abs(rep.mean_check))
        if banded is not None:
            banded[i] = flow.banded_mean(band)
        if flow.t in snap_times:
            snaps[flow.t] = flow.snapshot()
        if monitor is not None and monitor(flow, rate):
            n_used = i + 1
            break
    sl = slice(0, n_used)
    return RunResult(RateTrace(lam[sl]), flow.snapshot(), meanq[sl], idle[sl], lost[sl], lost_mom[sl],
                     None if banded is None else banded[sl], snaps, max_drift)


def nmp_run(nu: StateMeasure, dist: ServiceDistribution, T: int, snapshots: str | Iterable[int] | None = None,
            band: tuple[int, float] | None = None, config: EngineConfig = DEFAULT,
            monitor: Callable[[Flow, float], bool] | None = None) -> RunResult:
    """Iterate the non-linear dynamics for ``T`` steps.

    ``monitor(flow, rate)`` is called after every step; returning True stops the run early.
    """
    return _run(nu, dist, T, None, snapshots, band, config, monitor)


def gfp_run(nu: StateMeasure, dist: ServiceDistribution, lam_in: RateTrace | Sequence[float],
            config: EngineConfig = DEFAULT) -> RateTrace:
    """Exit-rate trace of the server driven by the exogenous rates ``lam_in``."""
    rates = np.asarray(lam_in.lam if isinstance(lam_in, RateTrace) else lam_in, dtype=float)
    if (rates < 0).any():
        raise ValueError("input rates must be nonnegative")
    flow = Flow(nu, dist, config)
    out = np.empty(rates.size)
    for i, r in enumerate(rates):
        out[i], _ = flow.step(r)
    return RateTrace(out)


@dataclass
class FixedPointResult:
    trace: RateTrace
    iterations: int
    residual: float


def fixed_point_solve(nu: StateMeasure, dist: ServiceDistribution, T: int, tol: float = 1e-12,
                      max_iter: int | None = None, config: EngineConfig = DEFAULT) -> FixedPointResult:
    """Solve ``lam = A(nu, lam)`` on ``[1, T]`` by iterating the input-to-output map from zero.

    Exits at time ``t`` only depend on inputs before ``t``, so the k-th iterate
    is exact on ``[1, k]`` and the iteration settles within ``T + 1`` rounds.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    max_iter = T + 2 if max_iter is None else max_iter
    lam = np.zeros(T)
    change = np.inf
    for k in range(1, max_iter + 1):
        b = gfp_run(nu, dist, lam, config).lam
        change = float(np.max(np.abs(b - lam))) if T else 0.0
        lam = b
        if change < tol:
            residual = float(np.max(np.abs(gfp_run(nu, dist, lam, config).lam - lam)))
            return FixedPointResult(RateTrace(lam), k, residual)
    raise FixedPointError(f"no fixed point within {max_iter} iterations", change)
