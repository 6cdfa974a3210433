"""Closed network of ``M`` FIFO servers with uniform routing.

Every step mirrors the single-server measure dynamics: busy servers age by
one, each completes with the hazard of its current age, and every departing
customer picks a destination uniformly among all ``M`` servers (itself
included).  Departures land before arrivals, so a customer routed back to its
own server joins the residual queue.

Randomness comes from one Philox stream per run.  Each step draws ``M``
uniforms for the completions and then one integer per departure, so the draw
layout depends only on the state and a seed reproduces the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .measure import Rectangle, StateMeasure
from .service import ServiceDistribution


@dataclass
class NetworkState:
    n: np.ndarray
    tau: np.ndarray
    rng: np.random.Generator = field(repr=False)
    t: int = 0

    @property
    def M(self) -> int:
        return int(self.n.size)

    @property
    def N(self) -> int:
        return int(self.n.sum())


@dataclass
class FlowStats:
    """Per-step departures and the arrival counts of the designated servers."""

    sigma: np.ndarray
    arrivals: np.ndarray  # shape (steps, len(designated))
    designated: tuple[int, ...]

    @property
    def pair_counts(self) -> np.ndarray:
        return self.arrivals[:, :2]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _atoms(nu: StateMeasure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cells = [(0, 0, nu.idle_mass)] + [(n, tau, m) for (n, tau), m in nu.atoms()]
    arr = np.array(cells, dtype=float)
    p = arr[:, 2] / arr[:, 2].sum()
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), p


def init_network(nu: StateMeasure, M: int, seed: int, exact_N: int | None = None,
                 max_tries: int = 100_000) -> NetworkState:
    """Draw the ``M`` server states i.i.d. from ``nu``.

    With ``exact_N`` the draw is repeated until the customer count matches,
    which conditions the i.i.d. law on the total.
    """
    if M < 1:
        raise ValueError("M must be positive")
    if nu.lost_mass > 1e-10 and nu.stored_mass() <= 0:
        raise ValueError("nu carries no stored mass")
    rng = make_rng(seed)
    ns, taus, p = _atoms(nu)
    for _ in range(max_tries):
        idx = rng.choice(ns.size, size=M, p=p)
        n, tau = ns[idx].copy(), taus[idx].copy()
        if exact_N is None or int(n.sum()) == exact_N:
            return NetworkState(n, tau, rng)
    raise RuntimeError(f"no draw with N = {exact_N} in {max_tries} tries")


class _Hazard:
    """Vectorized hazard lookup on a sparse support."""

    def __init__(self, dist: ServiceDistribution):
        self.support = np.array(dist.support, dtype=np.int64)
        self.h = np.array([dist.atom_hazard[a] for a in dist.support])

    def __call__(self, tau: np.ndarray) -> np.ndarray:
        i = np.searchsorted(self.support, tau)
        i = np.minimum(i, self.support.size - 1)
        return np.where(self.support[i] == tau, self.h[i], 0.0)


_HAZARD_CACHE: dict[int, tuple[ServiceDistribution, _Hazard]] = {}


def _hazard_of(dist: ServiceDistribution) -> _Hazard:
    hit = _HAZARD_CACHE.get(id(dist))
    if hit is None or hit[0] is not dist:
        hit = (dist, _Hazard(dist))
        _HAZARD_CACHE[id(dist)] = hit
    return hit[1]


def serve(state: NetworkState, dist: ServiceDistribution) -> np.ndarray:
    """Age the busy servers and draw completions; returns the mask of completed servers."""
    n, tau = state.n, state.tau
    busy = n > 0
    tau[busy] += 1
    u = state.rng.random(n.size)
    done = busy & (u < _hazard_of(dist)(tau))
    n[done] -= 1
    tau[done] = 0
    return done


def deliver(state: NetworkState, arrivals: np.ndarray) -> None:
    """Add arrivals; an idle server that receives customers starts one at age 0."""
    state.n += arrivals


def network_step(state: NetworkState, dist: ServiceDistribution) -> tuple[int, np.ndarray]:
    """Advance one step; returns the number of departures and the arrival counts."""
    sigma = int(serve(state, dist).sum())
    if sigma:
        dest = state.rng.integers(0, state.M, size=sigma)
        arrivals = np.bincount(dest, minlength=state.M)
        deliver(state, arrivals)
    else:
        arrivals = np.zeros(state.M, dtype=np.int64)
    state.t += 1
    return sigma, arrivals


def run_network(state: NetworkState, dist: ServiceDistribution, steps: int,
                designated: tuple[int, ...] = (0, 1)) -> FlowStats:
    if any(not 0 <= i < state.M for i in designated):
        raise ValueError("designated server outside the network")
    sigma = np.zeros(steps, dtype=np.int64)
    arr = np.zeros((steps, len(designated)), dtype=np.int64)
    idx = list(designated)
    for s in range(steps):
        sigma[s], a = network_step(state, dist)
        arr[s] = a[idx]
    return FlowStats(sigma, arr, tuple(designated))


def empirical_projection(state: NetworkState) -> StateMeasure:
    """``(1/M) sum_i delta_{omega_i}``."""
    busy = state.n > 0
    idle = float((~busy).sum()) / state.M
    keys, counts = np.unique(np.stack([state.n[busy], state.tau[busy]]), axis=1, return_counts=True)
    atoms = {(int(a), int(b)): c / state.M for a, b, c in zip(keys[0], keys[1], counts)}
    return StateMeasure.from_atoms(atoms, idle_mass=idle)


# -- chaos statistics -------------------------------------------------------

@dataclass(frozen=True)
class ChaosDistance:
    single: float
    pair: float


def _cells(rect: Rectangle, ref: StateMeasure, extra_taus) -> list[tuple[int, int]]:
    cells = [(0, 0)] if rect.has_idle else []
    taus = sorted({int(t) for t in extra_taus} | set(ref.rows))
    taus = [t for t in taus if rect.tau_lo <= t <= rect.tau_hi]
    cells += [(n, t) for t in taus for n in range(1, rect.n_max + 1)]
    return cells


def chaos_from_counts(counts: dict[tuple[int, int], int], reference: StateMeasure, rect: Rectangle) -> ChaosDistance:
    """Chaos statistics from the number of servers in each state (idle as ``(0, 0)``)."""
    cells = _cells(rect, reference, {tau for (n, tau) in counts if n > 0})
    q = np.array([reference.mass(*c) for c in cells])
    if q.sum() < 0.5:
        raise ValueError(f"reference keeps only {q.sum():.3f} of its mass on the rectangle")
    q /= q.sum()
    c = np.array([counts.get(cell, 0) for cell in cells], dtype=float)
    inside = c.sum()
    if inside == 0:
        return ChaosDistance(1.0, 1.0)
    single = 0.5 * float(np.abs(c / inside - q).sum())
    if inside < 2:
        return ChaosDistance(single, 1.0)
    pair = (np.outer(c, c) - np.diag(c)) / (inside * (inside - 1))
    return ChaosDistance(single, 0.5 * float(np.abs(pair - np.outer(q, q)).sum()))


def state_counts(state: NetworkState) -> dict[tuple[int, int], int]:
    n = state.n
    tau = np.where(n > 0, state.tau, 0)
    keys, cnt = np.unique(np.stack([n, tau]), axis=1, return_counts=True)
    return {(int(a), int(b)): int(k) for a, b, k in zip(keys[0], keys[1], cnt)}


def chaos_distance(state: NetworkState, reference: StateMeasure, rect: Rectangle) -> ChaosDistance:
    """Total-variation gaps of the empirical law and of the empirical pair law on ``rect``.

    Both laws are restricted to ``rect`` and renormalized.  The pair law counts
    ordered pairs of distinct servers and is compared with the product of the
    reference marginals.
    """
    return chaos_from_counts(state_counts(state), reference, rect)


# -- inflow statistics ------------------------------------------------------

@dataclass(frozen=True)
class InflowReport:
    mean: float
    chi2: float
    chi2_dof: int
    chi2_p: float
    cov: float
    cov_se: float
    conditional_tv: dict[int, float]
    conditional_p: float

    @property
    def cov_ok(self) -> bool:
        return abs(self.cov) <= 3 * self.cov_se


def _poisson_bins(x: np.ndarray, mean: float, min_expected: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Observed and expected counts on ``{0}, {1}, ..., {K-1}, [K, inf)`` and merged sparse ends."""
    W = x.size
    K = int(max(x.max(), stats.poisson.isf(1e-9, mean))) + 1
    obs = np.bincount(x, minlength=K + 1)[:K + 1].astype(float)
    obs[K] = (x >= K).sum()
    exp = W * stats.poisson.pmf(np.arange(K + 1), mean)
    exp[K] = W * stats.poisson.sf(K - 1, mean)
    # merge bins until each expected count reaches the minimum
    o_out, e_out, o_acc, e_acc = [], [], 0.0, 0.0
    for o, e in zip(obs, exp):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            o_out.append(o_acc)
            e_out.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 and e_out:
        o_out[-1] += o_acc
        e_out[-1] += e_acc
    return np.array(o_out), np.array(e_out)


def inflow_tests(flow: FlowStats, max_k: int = 2) -> InflowReport:
    """Poisson fit of the first designated server and independence from the second."""
    if flow.arrivals.shape[1] < 2:
        raise ValueError("need two designated servers")
    x = flow.arrivals[:, 0]
    y = flow.arrivals[:, 1]
    if x.size < 1000:
        raise ValueError(f"window of {x.size} steps is shorter than 1000")
    if flow.sigma.sum() == 0 or x.sum() == 0:
        raise ValueError("degenerate window: no departures")
    mean = float(x.mean())
    obs, exp = _poisson_bins(x, mean)
    if obs.size < 3:
        raise ValueError("too few bins for a goodness-of-fit test")
    exp *= obs.sum() / exp.sum()
    chi2, p = stats.chisquare(obs, exp, ddof=1)
    prod = (x - x.mean()) * (y - y.mean())
    cov = float(prod.sum() / (x.size - 1))
    se = float(prod.std(ddof=1) / np.sqrt(x.size))
    K = int(x.max()) + 1
    base = np.bincount(x, minlength=K) / x.size
    cond = {}
    for k in range(max_k + 1):
        sel = x[y == k]
        if sel.size >= 30:
            cond[k] = 0.5 * float(np.abs(np.bincount(sel, minlength=K) / sel.size - base).sum())
    # contingency test on the bulk of both laws
    top = int(stats.poisson.isf(0.05, mean))
    table = np.zeros((top + 1, top + 1))
    np.add.at(table, (np.minimum(x, top), np.minimum(y, top)), 1)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    cond_p = float(stats.chi2_contingency(table)[1]) if min(table.shape) > 1 else float("nan")
    return InflowReport(mean, float(chi2), int(obs.size - 2), float(p), cov, se, cond, cond_p)


def binomial_poisson_tv(trials: int, p: float) -> float:
    """Exact total-variation gap between ``Bin(trials, p)`` and ``Pois(trials * p)``."""
    K = max(trials, int(stats.poisson.isf(1e-16, trials * p))) + 1
    ks = np.arange(K + 1)
    b = stats.binom.pmf(ks, trials, p)
    q = stats.poisson.pmf(ks, trials * p)
    return 0.5 * float(np.abs(b - q).sum() + stats.poisson.sf(K, trials * p))
