"""Servers whose input rate keeps oscillating.

The construction is inductive.  Level ``k`` fixes blocks ``1..k`` and weights
``d_1..d_{k-1}``; the last layer then carries all remaining weight (the cutoff
server ``N_k``).  Its stationary state ``nu_k`` and the first time ``T_k^bn``
its trajectory is ``eps``-close to ``nu_k`` are computed.  The search then
appends block ``k+1`` at ``B_{k+1}`` and splits the remaining weight into
``d_k`` (layer ``k``) and the rest (layer ``k+1``, blocked until age
``B_{k+1}``).  A candidate is accepted when

(a) at ``T_k^bn`` it is ``2 eps``-close to ``nu_k`` and it still honours every
    earlier low window and high point,
(b) the layer geometry is admissible,
(c) its rate drops below ``eps`` after ``T_k^bn`` and before the blocked
    customers are released at ``B_{k+1} - (C_k + F_{k+1})``.

The blocked layer keeps collecting customers while it waits, which starves the
rest of the network; this is what drives the rate down in (c).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .engine import DEFAULT, EngineConfig, Flow
from .equilibrium import CORE_BUDGET, StationaryResult, detect_T_bn, pk_rate, stationary_state
from .initial import DeltaWeights, InitSpec, build_nu_delta, validate_geometry
from .measure import Rectangle, StateMeasure, core_rectangle, eps_close, poisson_window
from .service import TypeBSpec, build_distribution, cutoff

log = logging.getLogger(__name__)


class SearchExhausted(RuntimeError):
    def __init__(self, msg: str, closest: dict | None = None):
        super().__init__(msg)
        self.closest = closest


class WindowNotFound(LookupError):
    pass


# -- one-step mean identity -------------------------------------------------

def lemma_decay_check(mu: Sequence[float], alpha: Sequence[float], tol: float = 1e-20) -> float:
    """Drop of the mean under ``mu -> mu_bar * Pois(m)`` for a sub-probability ``mu``.

    ``mu[n]`` is the mass at ``n >= 0``; ``alpha[n]`` (with ``alpha[0] = 0``) is
    the part of ``mu`` that moves down by one, and ``m = alpha(N)`` is both the
    moved mass and the mean of the Poisson inflow.  The returned drop equals
    ``m * (1 - mu.total)``.
    """
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size > mu.size:
        mu = np.concatenate([mu, np.zeros(alpha.size - mu.size)])
    alpha = np.concatenate([alpha, np.zeros(mu.size - alpha.size)])
    if (mu < 0).any() or (alpha < 0).any():
        raise ValueError("measures must be nonnegative")
    if alpha[0] != 0:
        raise ValueError("alpha lives on n >= 1")
    if (alpha > mu).any():
        n = int(np.flatnonzero(alpha > mu)[0])
        raise ValueError(f"alpha exceeds mu at n = {n}")
    if mu.sum() > 1 + 1e-12:
        raise ValueError("mu must have total mass at most 1")
    m = float(alpha.sum())
    bar = mu - alpha
    bar[:-1] += alpha[1:]
    ns = np.arange(mu.size)
    before = float(ns @ mu)
    if m == 0.0:
        after = float(ns @ bar)
    else:
        k_lo, pmf = poisson_window(m, tol)
        out = np.convolve(bar, pmf)
        after = float(np.arange(k_lo, k_lo + out.size) @ out)
    return before - after


# -- windows ------------------------------------------------------------------

def find_T_in(trace: Sequence[float], start: int, horizon: int, eps: float) -> tuple[int, int]:
    """First ``t`` in ``[start, horizon]`` with ``lambda(t) < eps`` and the end of its ``lambda <= eps`` run.

    ``trace[t - 1]`` is ``lambda(t)``.  The run end is capped at ``horizon``.
    """
    if start >= horizon:
        raise ValueError(f"empty window [{start}, {horizon}]")
    lam = np.asarray(trace, dtype=float)
    hi = min(horizon, lam.size)
    seg = lam[start - 1:hi]
    hits = np.flatnonzero(seg < eps)
    if hits.size == 0:
        raise WindowNotFound(f"no rate below {eps} in [{start}, {hi}]")
    t_in = start + int(hits[0])
    above = np.flatnonzero(lam[t_in - 1:hi] > eps)
    t_out = hi if above.size == 0 else t_in + int(above[0]) - 1
    return t_in, t_out


# -- records --------------------------------------------------------------------

@dataclass
class LevelRecord:
    k: int
    B: int
    C: int
    d: float | None = None
    T_bn: int | None = None
    T_in: int | None = None
    T_out: int | None = None
    Lambda: float | None = None
    Lambda_pk: float | None = None
    rho: float | None = None
    rect: Rectangle | None = None
    search_log: list[dict] = field(default_factory=list)
    # mean queue over ages [0, C_{k-1} - 1] at the window ends; reported, not gated on
    band_mean: dict[str, float] | None = None
    stationary: StationaryResult | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "k": self.k, "B": self.B, "C": self.C, "d": self.d,
            "T_bn": self.T_bn, "T_in": self.T_in, "T_out": self.T_out,
            "Lambda": self.Lambda, "Lambda_pk": self.Lambda_pk, "rho": self.rho,
            "rect": None if self.rect is None else self.rect.to_json(),
            "search_log": self.search_log,
            "band_mean": self.band_mean,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LevelRecord":
        rect = obj.get("rect")
        return cls(obj["k"], obj["B"], obj["C"], obj.get("d"), obj.get("T_bn"), obj.get("T_in"), obj.get("T_out"),
                   obj.get("Lambda"), obj.get("Lambda_pk"), obj.get("rho"),
                   None if rect is None else Rectangle.from_json(rect), list(obj.get("search_log", [])),
                   obj.get("band_mean"))


@dataclass
class TransienceCertificate:
    spec: TypeBSpec
    weights: DeltaWeights
    F: tuple[int, ...]
    eps: float
    levels: list[LevelRecord]
    low_windows: list[tuple[int, int]]
    high_points: list[tuple[int, float]]
    horizon: int
    trace_sha256: str
    engine: EngineConfig = DEFAULT
    version: str = __version__

    def to_json(self) -> dict:
        return {
            "kind": "transience-certificate",
            "version": self.version,
            "eps": self.eps,
            "spec": self.spec.to_json(),
            "weights": list(self.weights.d),
            "F": list(self.F),
            "levels": [r.to_json() for r in self.levels],
            "low_windows": [list(w) for w in self.low_windows],
            "high_points": [{"t": t, "threshold": thr} for t, thr in self.high_points],
            "horizon": self.horizon,
            "trace_sha256": self.trace_sha256,
            "engine": {"prune": self.engine.prune, "poisson_tol": self.engine.poisson_tol,
                       "conservation_budget": self.engine.conservation_budget},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TransienceCertificate":
        eng = obj.get("engine", {})
        return cls(
            TypeBSpec.from_json(obj["spec"]),
            DeltaWeights(tuple(obj["weights"])),
            tuple(obj["F"]),
            float(obj["eps"]),
            [LevelRecord.from_json(r) for r in obj["levels"]],
            [tuple(w) for w in obj["low_windows"]],
            [(int(p["t"]), float(p["threshold"])) for p in obj["high_points"]],
            int(obj["horizon"]),
            obj["trace_sha256"],
            EngineConfig(**eng) if eng else DEFAULT,
            obj.get("version", __version__),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TransienceCertificate":
        return cls.from_json(json.loads(Path(path).read_text()))


def trace_hash(trace: Iterable[float]) -> str:
    return hashlib.sha256(np.asarray(list(trace), dtype="<f8").tobytes()).hexdigest()


# -- candidate runs ---------------------------------------------------------------

@dataclass
class _Candidate:
    spec: TypeBSpec
    weights: DeltaWeights
    F: tuple[int, ...]

    def start(self, config: EngineConfig) -> Flow:
        init = InitSpec(self.spec, F=self.F)
        return Flow(build_nu_delta(init, self.weights), build_distribution(self.spec), config)


def _prior_checks(prev: Sequence[LevelRecord], eps: float) -> tuple[list[tuple[int, int]], list[tuple[int, float]]]:
    windows = [(r.T_in, r.T_out) for r in prev if r.T_in is not None]
    points = [(r.T_bn, r.Lambda - eps) for r in prev if r.T_bn is not None]
    return windows, points


def _run_candidate(cand: _Candidate, prev: Sequence[LevelRecord], eps: float, until: int,
                   config: EngineConfig) -> tuple[bool, str, list[float], Flow]:
    """Run to ``until`` checking condition (a) and the earlier windows and points."""
    cur = prev[-1]
    flow = cand.start(config)
    trace: list[float] = []
    windows, points = _prior_checks(prev, eps)
    point_at = dict(points)
    while flow.t < until:
        lam, _ = flow.step()
        trace.append(lam)
        t = flow.t
        if t in point_at and lam < point_at[t]:
            return False, f"rate {lam:.4g} below {point_at[t]:.4g} at t = {t}", trace, flow
        if t == cur.T_bn:
            snap = flow.snapshot((cur.rect.tau_lo, cur.rect.tau_hi))
            if not eps_close(snap, cur.stationary.state, cur.rect, 2 * eps):
                return False, f"not {2 * eps}-close to level-{cur.k} stationary state at t = {t}", trace, flow
    arr = np.asarray(trace)
    for a, b in windows:
        if b <= arr.size and arr[a - 1:b].max() > eps:
            return False, f"earlier window [{a}, {b}] broken", trace, flow
    return True, "ok", trace, flow


def _d_schedule(rem: float, max_j: int) -> list[float]:
    return [rem * (1.0 - math.ldexp(1.0, -j)) for j in range(1, max_j + 1)]


def _b_schedule(b_min: int, b_cap: int) -> list[int]:
    out, b = [], b_min
    while b <= b_cap:
        out.append(b)
        b *= 2
    return out


def search_level(k: int, prev: Sequence[LevelRecord], spec: TypeBSpec, weights: Sequence[float], eps: float,
                 F: Sequence[int], gap: int = 0, d_schedule: Sequence[float] | None = None,
                 B_schedule: Sequence[int] | None = None, d_max_j: int = 40, B_cap: int = 1 << 26,
                 config: EngineConfig = DEFAULT) -> tuple[LevelRecord, TypeBSpec, float]:
    """Pick ``d_k`` and ``B_{k+1}``; returns the record of level ``k + 1``, its spec and ``d_k``.

    ``prev`` holds the records of levels ``1..k``; the last one must carry
    ``T_bn``, the core rectangle and the stationary state of level ``k``.
    ``weights`` are ``d_1..d_{k-1}``.
    """
    cur = prev[-1]
    if cur.k != k or cur.T_bn is None or cur.stationary is None or cur.rect is None:
        raise ValueError(f"level {k} record is incomplete")
    F = tuple(F)
    if len(F) < k + 1:
        raise ValueError(f"need layer offsets F_1..F_{k + 1}")
    rem = 1.0 - sum(weights)
    if not rem > 0:
        raise ValueError("no weight left for a new level")
    C_k = spec.C(k)
    top = C_k + F[k]
    # the window [T_bn + 1, release] must hold at least two steps
    b_min = max(cur.T_bn + top + 2, spec.B(k) + top + 1)
    log_entries: list[dict] = []

    def candidate(B: int, d: float) -> _Candidate:
        new = TypeBSpec(spec.blocks + ((B, B + gap),), last=True)
        return _Candidate(new, DeltaWeights(tuple(weights) + (d, rem - d)), F[:k + 1])

    B_list = list(B_schedule) if B_schedule is not None else _b_schedule(b_min, B_cap)
    d_list = list(d_schedule) if d_schedule is not None else _d_schedule(rem, d_max_j)
    if not B_list:
        raise SearchExhausted(f"level {k}: no B candidate in [{b_min}, {B_cap}]")
    closest: dict | None = None
    for d in d_list:
        if not 0 <= d < rem or rem - d <= 0:
            log_entries.append({"d": d, "pass": False, "reason": "d must lie below the remaining weight"})
            continue
        B0 = B_list[0]
        cand = candidate(B0, d)
        problems = validate_geometry(InitSpec(cand.spec, F=cand.F))
        if problems or B0 - top <= cur.T_bn:
            msg = "; ".join(problems) or f"release at {B0 - top} not after T_bn = {cur.T_bn}"
            log_entries.append({"d": d, "B": B0, "pass": False, "reason": msg})
            continue
        ok, why, _, _ = _run_candidate(cand, prev, eps, cur.T_bn, config)
        log_entries.append({"d": d, "B": B0, "stage": "closeness", "pass": ok, "reason": why})
        if not ok:
            continue
        for B in B_list:
            cand = candidate(B, d)
            problems = validate_geometry(InitSpec(cand.spec, F=cand.F))
            release = B - top
            if problems or release <= cur.T_bn:
                msg = "; ".join(problems) or f"release at {release} not after T_bn = {cur.T_bn}"
                log_entries.append({"d": d, "B": B, "pass": False, "reason": msg})
                continue
            ok, why, trace, _ = _run_candidate(cand, prev, eps, release, config)
            if ok:
                try:
                    t_in, t_out = find_T_in(trace, cur.T_bn + 1, release, eps)
                except WindowNotFound as exc:
                    ok, why = False, str(exc)
                    low = float(np.min(trace[cur.T_bn:])) if len(trace) > cur.T_bn else math.nan
                    if closest is None or low < closest["min_rate"]:
                        closest = {"d": d, "B": B, "min_rate": low}
            log_entries.append({"d": d, "B": B, "stage": "window", "pass": ok, "reason": why})
            log.info("level %d candidate d=%.17g B=%d: %s", k, d, B, why)
            if ok:
                rec = LevelRecord(k + 1, B, B + gap, T_in=t_in, T_out=t_out, search_log=log_entries)
                return rec, cand.spec, d
        break
    raise SearchExhausted(f"level {k}: schedules exhausted", closest)


# -- assembly -------------------------------------------------------------------

def _stationary_record(rec: LevelRecord, spec: TypeBSpec, nu: StateMeasure, config: EngineConfig) -> None:
    from .measure import mean_queue

    dist = build_distribution(spec)
    rho = mean_queue(nu)
    stat = stationary_state(dist, rho, config=config)
    rec.stationary = stat
    rec.Lambda = stat.rate
    rec.Lambda_pk = pk_rate(rho, dist.mean, dist.second_moment)
    rec.rho = rho
    rec.rect = core_rectangle(stat.state, CORE_BUDGET, (0, spec.C(rec.k) - 1))


def construct(K: int, base: TypeBSpec, eps: float = 0.05, F: Sequence[int] | None = None,
              gaps: Sequence[int] | None = None, d_max_j: int = 40, B_cap: int = 1 << 26,
              bn_horizon: int = 1 << 24, config: EngineConfig = DEFAULT
              ) -> tuple[TypeBSpec, DeltaWeights, TransienceCertificate]:
    """Build a ``K``-level server and certify its low windows and high points."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    F = tuple(F) if F is not None else (0,) * K
    gaps = tuple(gaps) if gaps is not None else (0,) * K
    if len(F) < K or F[0] != 0:
        raise ValueError("F needs K entries with F_1 = 0")

    spec = cutoff(base, 1)
    weights: list[float] = []
    rec = LevelRecord(1, spec.B(1), spec.C(1))
    nu = build_nu_delta(InitSpec(spec, F=F[:1]), [1.0])
    _stationary_record(rec, spec, nu, config)
    if K > 1:
        flow = Flow(nu, build_distribution(spec), config)
        rec.T_bn = detect_T_bn(flow, rec.stationary, rec.rect, eps, bn_horizon, after=0)
    levels = [rec]

    for k in range(1, K):
        nxt, spec, d = search_level(k, levels, spec, weights, eps, F, gap=gaps[k], d_max_j=d_max_j,
                                    B_cap=B_cap, config=config)
        levels[-1].d = d
        weights.append(d)
        delta = DeltaWeights(tuple(weights) + (1.0 - sum(weights),))
        nu = build_nu_delta(InitSpec(spec, F=F[:k + 1]), delta)
        _stationary_record(nxt, spec, nu, config)
        if k + 1 < K:
            flow = Flow(nu, build_distribution(spec), config)
            nxt.T_bn = detect_T_bn(flow, nxt.stationary, nxt.rect, eps, bn_horizon, after=nxt.T_in)
        levels.append(nxt)
    levels[-1].d = 1.0 - sum(weights)
    delta = DeltaWeights(tuple(weights) + (levels[-1].d,))

    low = [(r.T_in, r.T_out) for r in levels if r.T_in is not None]
    high = [(r.T_bn, r.Lambda - eps) for r in levels if r.T_bn is not None]
    horizon = max([b for _, b in low] + [t for t, _ in high] + [1])
    # inside the window of level k the blocked layer sits at ages >= C_{k-1}
    bands = {r.k: (0, levels[r.k - 2].C - 1) for r in levels if r.T_in is not None}
    probes = {}
    for r in levels:
        if r.T_in is not None:
            probes[(r.T_in, bands[r.k])] = probes[(r.T_out, bands[r.k])] = None
    trace = _trace(spec, delta, F[:K], horizon, config, probes)
    for r in levels:
        if r.T_in is not None:
            r.band_mean = {"T_in": probes[(r.T_in, bands[r.k])], "T_out": probes[(r.T_out, bands[r.k])]}
    cert = TransienceCertificate(spec, delta, F[:K], eps, levels, low, high, horizon, trace_hash(trace), config)
    failures = _check(cert, trace)
    if failures:
        raise SearchExhausted("verification run failed: " + "; ".join(failures))
    return spec, delta, cert


def _trace(spec: TypeBSpec, delta: DeltaWeights, F: Sequence[int], horizon: int, config: EngineConfig,
           probes: dict[tuple[int, tuple[int, int]], float | None] | None = None) -> np.ndarray:
    """Rate trace; ``probes`` keyed by ``(t, band)`` receive the banded mean queue at time ``t``."""
    flow = _Candidate(spec, delta, tuple(F)).start(config)
    at: dict[int, list[tuple[int, int]]] = {}
    for t, band in probes or {}:
        at.setdefault(t, []).append(band)
    out = np.empty(horizon)
    for i in range(horizon):
        out[i], _ = flow.step()
        for band in at.get(flow.t, ()):
            probes[(flow.t, band)] = flow.banded_mean(band)
    return out


def _check(cert: TransienceCertificate, trace: np.ndarray) -> list[str]:
    bad = []
    for a, b in cert.low_windows:
        if b > trace.size or a < 1 or b < a:
            bad.append(f"window [{a}, {b}] outside the run")
        elif trace[a - 1:b].max() > cert.eps:
            bad.append(f"window [{a}, {b}] has rate {trace[a - 1:b].max():.4g} > {cert.eps}")
    for t, thr in cert.high_points:
        if t > trace.size or trace[t - 1] < thr:
            bad.append(f"rate at t = {t} below {thr:.4g}")
    return bad


def verify_certificate(cert: TransienceCertificate, spec: TypeBSpec | None = None,
                       delta: DeltaWeights | None = None, horizon: int | None = None) -> bool:
    """Re-run the engine and re-check every window and point of ``cert``.

    The trace hash is compared on the certified horizon, so a longer
    ``horizon`` still verifies the recorded windows.
    """
    if spec is not None and spec != cert.spec:
        return False
    if delta is not None and delta.d != cert.weights.d:
        return False
    H = cert.horizon if horizon is None else int(horizon)
    trace = _trace(cert.spec, cert.weights, cert.F, max(H, 1), cert.engine)
    if H >= cert.horizon and trace_hash(trace[:cert.horizon]) != cert.trace_sha256:
        return False
    return not _check(cert, trace)
