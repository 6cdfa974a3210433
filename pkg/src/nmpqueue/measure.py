"""Sparse sub-probability measures on the server state space.

A state is a mass at the idle point **0** plus, for every elapsed service time
``tau``, a contiguous row of masses over queue lengths ``n >= 1``.  Rows are
stored as ``(n_lo, masses)`` with ``masses[i]`` sitting at ``n = n_lo + i``.
Mass removed by truncation is never redistributed; it is accumulated in
``lost_mass``.  ``lost_moment`` collects the first moment it carried plus the
inflow it no longer receives, so ``mean_queue + lost_moment`` is conserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy import signal, stats

PRUNE = 1e-16
POISSON_TOL = 1e-14
# aggregates report a bracket instead of a point value above this much lost mass
BRACKET_THRESHOLD = 1e-8

Row = tuple[int, np.ndarray]


@dataclass(frozen=True)
class Rectangle:
    """Cells ``{(n, tau): n <= n_max, tau_lo <= tau <= tau_hi}``, plus **0** when ``tau_lo == 0``."""

    n_max: int
    tau_lo: int = 0
    tau_hi: int | float = math.inf

    def __post_init__(self) -> None:
        if self.n_max < 1 or self.tau_lo < 0 or self.tau_hi < self.tau_lo:
            raise ValueError(f"invalid rectangle {self}")

    @property
    def has_idle(self) -> bool:
        return self.tau_lo == 0

    def to_json(self) -> dict:
        hi = None if math.isinf(self.tau_hi) else int(self.tau_hi)
        return {"n_max": self.n_max, "tau_range": [self.tau_lo, hi]}

    @classmethod
    def from_json(cls, obj: dict) -> "Rectangle":
        lo, hi = obj["tau_range"]
        return cls(int(obj["n_max"]), int(lo), math.inf if hi is None else int(hi))


@dataclass(frozen=True)
class StateMeasure:
    rows: Mapping[int, Row] = field(default_factory=dict)
    idle_mass: float = 0.0
    lost_mass: float = 0.0
    lost_moment: float = 0.0

    # -- construction -------------------------------------------------
    @classmethod
    def from_atoms(cls, atoms: Mapping[tuple[int, int], float], idle_mass: float = 0.0,
                   lost_mass: float = 0.0, lost_moment: float = 0.0) -> "StateMeasure":
        by_tau: dict[int, dict[int, float]] = {}
        idle = float(idle_mass)
        for (n, tau), m in atoms.items():
            if m < 0:
                raise ValueError(f"negative mass at {(n, tau)}")
            if n == 0:
                if tau != 0:
                    raise ValueError("queue length 0 only allowed at the idle point (0, 0)")
                idle += m
                continue
            if n < 0 or tau < 0:
                raise ValueError(f"invalid state {(n, tau)}")
            by_tau.setdefault(int(tau), {})
            by_tau[int(tau)][int(n)] = by_tau[int(tau)].get(int(n), 0.0) + float(m)
        rows = {}
        for tau, cells in by_tau.items():
            lo, hi = min(cells), max(cells)
            arr = np.zeros(hi - lo + 1)
            for n, m in cells.items():
                arr[n - lo] = m
            rows[tau] = (lo, arr)
        return cls(rows, idle, lost_mass, lost_moment).pruned()

    @classmethod
    def idle(cls) -> "StateMeasure":
        return cls({}, 1.0)

    @classmethod
    def point(cls, n: int, tau: int) -> "StateMeasure":
        return cls.idle() if n == 0 else cls.from_atoms({(n, tau): 1.0})

    def pruned(self, threshold: float = PRUNE) -> "StateMeasure":
        rows, lost, lm = {}, self.lost_mass, self.lost_moment
        for tau, (lo, arr) in self.rows.items():
            lo, arr, dm, dmom = prune_row(lo, arr, threshold)
            lost += dm
            lm += dmom
            if arr.size:
                rows[tau] = (lo, arr)
        return StateMeasure(rows, self.idle_mass, lost, lm)

    # -- queries ------------------------------------------------------
    def atoms(self) -> Iterator[tuple[tuple[int, int], float]]:
        for tau in sorted(self.rows):
            lo, arr = self.rows[tau]
            for i in np.flatnonzero(arr):
                yield (lo + int(i), tau), float(arr[i])

    def mass(self, n: int, tau: int) -> float:
        if n == 0:
            return self.idle_mass if tau == 0 else 0.0
        row = self.rows.get(tau)
        if row is None:
            return 0.0
        lo, arr = row
        i = n - lo
        return float(arr[i]) if 0 <= i < arr.size else 0.0

    def stored_mass(self) -> float:
        return self.idle_mass + sum(float(arr.sum()) for _, arr in self.rows.values())

    def total(self) -> float:
        return self.stored_mass() + self.lost_mass

    def tau_max(self) -> int:
        return max(self.rows, default=0)

    def n_max(self) -> int:
        return max((lo + arr.size - 1 for lo, arr in self.rows.values()), default=0)

    def queue_marginal(self) -> np.ndarray:
        """Mass of each queue length ``n = 0, 1, ...`` summed over ``tau``."""
        out = np.zeros(self.n_max() + 1)
        out[0] = self.idle_mass
        for lo, arr in self.rows.values():
            out[lo:lo + arr.size] += arr
        return out

    def equals(self, other: "StateMeasure", atol: float = 0.0) -> bool:
        a, b = dict(self.atoms()), dict(other.atoms())
        keys = a.keys() | b.keys()
        if abs(self.idle_mass - other.idle_mass) > atol:
            return False
        return all(abs(a.get(k, 0.0) - b.get(k, 0.0)) <= atol for k in keys)

    # -- snapshot I/O -------------------------------------------------
    def write_csv(self, path: str | Path, header: list[str] | None = None) -> None:
        lines = [f"# {h}" for h in header or []]
        lines.append("n,tau,mass")
        lines.append(f"0,0,{self.idle_mass!r}")
        for (n, tau), m in self.atoms():
            lines.append(f"{n},{tau},{m!r}")
        lines.append(f"# lost_mass={self.lost_mass!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> "StateMeasure":
        atoms, idle, lost = {}, 0.0, 0.0
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("lost_mass="):
                    lost = float(line.split("=", 1)[1])
                continue
            if line.startswith("n,"):
                continue
            n, tau, m = line.split(",")
            if int(n) == 0:
                idle += float(m)
            else:
                atoms[(int(n), int(tau))] = float(m)
        return cls.from_atoms(atoms, idle, lost)


_NS = np.arange(1 << 16, dtype=float)


def index_vector(lo: int, size: int) -> np.ndarray:
    """Queue lengths ``lo .. lo + size - 1`` as floats (a view when possible)."""
    if lo + size <= _NS.size:
        return _NS[lo:lo + size]
    return np.arange(lo, lo + size, dtype=float)


def row_moment(lo: int, arr: np.ndarray) -> float:
    return float(arr @ index_vector(lo, arr.size))


def prune_row(lo: int, arr: np.ndarray, threshold: float = PRUNE) -> tuple[int, np.ndarray, float, float]:
    """Zero entries below ``threshold`` and trim the row; returns removed mass and moment."""
    if not arr.size or arr.min() >= threshold:
        return lo, arr, 0.0, 0.0
    small = arr < threshold
    removed = arr * small
    dm = float(removed.sum())
    dmom = float(removed @ index_vector(lo, arr.size))
    nz = np.flatnonzero(~small)
    if nz.size == 0:
        return lo, arr[:0], dm, dmom
    i0, i1 = int(nz[0]), int(nz[-1]) + 1
    if i1 - i0 == nz.size:
        return lo + i0, arr[i0:i1], dm, dmom
    out = np.where(small[i0:i1], 0.0, arr[i0:i1])
    return lo + i0, out, dm, dmom


# -- aggregates ----------------------------------------------------------

def mean_queue(mu: StateMeasure) -> float:
    """Mean queue length over stored atoms."""
    total = 0.0
    for lo, arr in mu.rows.values():
        total += row_moment(lo, arr)
    return total


def mean_queue_bracket(mu: StateMeasure) -> tuple[float, float]:
    """``(lower, upper)`` for the mean queue; the upper end restores the lost first moment."""
    m = mean_queue(mu)
    return m, m + mu.lost_moment


def banded_mean_queue(mu: StateMeasure, band: tuple[int, float]) -> float:
    a, b = band
    total = 0.0
    for tau, (lo, arr) in mu.rows.items():
        if a <= tau <= b:
            total += row_moment(lo, arr)
    return total


def core_rectangle(nu: StateMeasure, budget: float, tau_range: tuple[int, float] | None = None) -> Rectangle:
    """Smallest ``n_max`` leaving at most ``budget`` of the n-weighted mass outside."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    tau_lo, tau_hi = (0, nu.tau_max()) if tau_range is None else tau_range
    marg = nu.queue_marginal()
    weighted = marg * np.arange(marg.size)
    # tail[m] = sum_{n > m} n nu(n)
    tail = np.concatenate([np.cumsum(weighted[::-1])[::-1][1:], [0.0]])
    n_max = 1
    for m in range(1, marg.size):
        n_max = m
        if tail[m] <= budget:
            break
    return Rectangle(max(n_max, 1), tau_lo, tau_hi)


def eps_close(mu: StateMeasure, nu: StateMeasure, rect: Rectangle, eps: float) -> bool:
    """Both mass ratios lie in the open band ``(1 - eps, 1 + eps)`` on every cell of ``rect``."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def ok(x: np.ndarray, y: np.ndarray) -> bool:
        both_zero = (x == 0) & (y == 0)
        if ((x == 0) ^ (y == 0)).any():
            return False
        x, y = x[~both_zero], y[~both_zero]
        r = x / y
        s = y / x
        return bool(((r > 1 - eps) & (r < 1 + eps) & (s > 1 - eps) & (s < 1 + eps)).all())

    if rect.has_idle and not ok(np.array([mu.idle_mass]), np.array([nu.idle_mass])):
        return False
    taus = {t for t in mu.rows.keys() | nu.rows.keys() if rect.tau_lo <= t <= rect.tau_hi}
    for tau in taus:
        if not ok(_window(mu.rows.get(tau), rect.n_max), _window(nu.rows.get(tau), rect.n_max)):
            return False
    return True


def sup_distance(mu: StateMeasure, nu: StateMeasure, rect: Rectangle) -> float:
    """Largest absolute mass difference over the cells of ``rect``."""
    d = abs(mu.idle_mass - nu.idle_mass) if rect.has_idle else 0.0
    for tau in mu.rows.keys() | nu.rows.keys():
        if rect.tau_lo <= tau <= rect.tau_hi:
            diff = np.abs(_window(mu.rows.get(tau), rect.n_max) - _window(nu.rows.get(tau), rect.n_max))
            d = max(d, float(diff.max()))
    return d


def _window(row: Row | None, n_max: int) -> np.ndarray:
    """Masses at ``n = 1..n_max`` of a stored row as a dense vector."""
    out = np.zeros(n_max)
    if row is None:
        return out
    lo, arr = row
    hi = min(lo + arr.size - 1, n_max)
    if hi >= lo:
        out[lo - 1:hi] = arr[:hi - lo + 1]
    return out


# -- Poisson inflow ------------------------------------------------------

def poisson_pmf(lam: float, k: int) -> float:
    if lam < 0:
        raise ValueError("negative Poisson rate")
    if k < 0:
        return 0.0
    if lam == 0:
        return 1.0 if k == 0 else 0.0
    return math.exp(-lam + k * math.log(lam) - math.lgamma(k + 1))


def poisson_window(lam: float, tol: float = POISSON_TOL) -> tuple[int, np.ndarray]:
    """Poisson masses on ``[k_lo, k_hi]`` with each discarded tail below ``tol``.

    Returns ``(k_lo, pmf)``; the kept mass is ``1 - (discarded tails)``.
    """
    if lam < 0:
        raise ValueError("negative Poisson rate")
    if lam == 0:
        return 0, np.ones(1)
    if lam <= 8.0:
        # recursive terms far past the cut, then the smallest K with sum_{k > K} < tol
        p = math.exp(-lam)
        terms = [p]
        k = 0
        while k <= lam or p >= tol * 1e-6:
            k += 1
            p = p * lam / k
            terms.append(p)
        K = len(terms) - 1
        tail = 0.0
        while K > 0 and tail + terms[K] < tol:
            tail += terms[K]
            K -= 1
        return 0, np.array(terms[:K + 1])
    lo = int(stats.poisson.ppf(tol, lam))
    # ppf may land one below the exact cut; the left tail below lo stays < tol
    while lo > 0 and stats.poisson.cdf(lo - 1, lam) >= tol:
        lo -= 1
    hi = int(stats.poisson.isf(tol, lam)) + 1
    ks = np.arange(lo, hi + 1)
    return lo, stats.poisson.pmf(ks, lam)


def convolve_row(lo: int, arr: np.ndarray, k_lo: int, pmf: np.ndarray) -> Row:
    if arr.size * pmf.size > 50_000 and min(arr.size, pmf.size) > 64:
        out = signal.fftconvolve(arr, pmf)
        np.clip(out, 0.0, None, out=out)
    else:
        out = np.convolve(arr, pmf)
    return lo + k_lo, out


def convolve_poisson(psi: StateMeasure, lam: float, tol: float = POISSON_TOL,
                     prune: float = PRUNE, check_rate: bool = True) -> StateMeasure:
    """Spread every atom ``(n, tau)`` to ``(n + k, tau)`` with Poisson weight ``pi_lam(k)``.

    The idle point feeds the ``tau = 0`` row at ``n = k >= 1``.  Truncated
    Poisson tails and pruned atoms are moved to ``lost_mass``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if check_rate and not 0 <= lam <= 1 + 1e-9:
        raise ValueError(f"endogenous rate {lam} outside [0, 1]")
    if lam < 0:
        raise ValueError("negative Poisson rate")
    if lam == 0:
        return psi
    k_lo, pmf = poisson_window(lam, tol)
    kept = float(pmf.sum())
    # lost mass no longer receives inflow; its share is booked as lost moment
    lost, lm = psi.lost_mass, psi.lost_moment + lam * psi.lost_mass
    rows: dict[int, Row] = {}
    for tau, (lo, arr) in psi.rows.items():
        m = float(arr.sum())
        mom = row_moment(lo, arr)
        nlo, out = convolve_row(lo, arr, k_lo, pmf)
        rows[tau] = (nlo, out)
        got_m = float(out.sum())
        lost += m - got_m
        lm += mom + m * lam - row_moment(nlo, out)
    idle = psi.idle_mass
    new_idle = idle * (pmf[0] if k_lo == 0 else 0.0)
    if idle > 0:
        start = max(k_lo, 1)
        feed = idle * pmf[start - k_lo:]
        lost += idle * (1.0 - kept)
        lm += idle * lam - row_moment(start, feed)
        if feed.size:
            if 0 in rows:
                rows[0] = _add_rows(rows[0], (start, feed))
            else:
                rows[0] = (start, feed)
    return StateMeasure(rows, new_idle, lost, lm).pruned(prune)


def _add_rows(a: Row, b: Row) -> Row:
    lo = min(a[0], b[0])
    hi = max(a[0] + a[1].size, b[0] + b[1].size)
    out = np.zeros(hi - lo)
    out[a[0] - lo:a[0] - lo + a[1].size] += a[1]
    out[b[0] - lo:b[0] - lo + b[1].size] += b[1]
    return lo, out
