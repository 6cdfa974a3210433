"""Layered initial states.

Layer ``k`` (1-based) sits at elapsed times ``[C_{k-1}, C_{k-1} + F_k]`` with
``C_0 = 0`` and carries a probability law ``kappa_k``.  An initial state is the
mixture ``sum_k d_k kappa_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .measure import StateMeasure, mean_queue
from .service import TypeBSpec

Atoms = Mapping[tuple[int, int], float]


class GeometryError(ValueError):
    """Layers overlap each other or the next block, or the weights do not fit."""


@dataclass(frozen=True)
class DeltaWeights:
    d: tuple[float, ...]

    def __post_init__(self) -> None:
        d = tuple(float(x) for x in self.d)
        object.__setattr__(self, "d", d)
        if not d:
            raise ValueError("empty weight list")
        if any(x < 0 for x in d):
            raise ValueError(f"negative weight in {d}")
        if abs(sum(d) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {sum(d)!r}, expected 1")

    def __len__(self) -> int:
        return len(self.d)


@dataclass(frozen=True)
class InitSpec:
    spec: TypeBSpec
    n_bar: int = 1
    F: tuple[int, ...] | None = None
    # None means the default point mass at (1, C_{k-1}) for every layer
    kappas: tuple[Atoms, ...] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.n_bar < 1:
            raise ValueError("n_bar must be at least 1")
        F = tuple(int(f) for f in self.F) if self.F is not None else (0,) * self.spec.n_blocks
        object.__setattr__(self, "F", F)
        if len(F) != self.spec.n_blocks:
            raise GeometryError(f"F has {len(F)} entries for {self.spec.n_blocks} blocks")
        if F[0] != 0 or any(f < 0 for f in F):
            raise GeometryError(f"F must be nonnegative with F_1 = 0, got {list(F)}")
        if self.kappas is not None:
            if len(self.kappas) != self.spec.n_blocks:
                raise GeometryError(f"{len(self.kappas)} layer laws for {self.spec.n_blocks} blocks")
            for k, kap in enumerate(self.kappas, start=1):
                self._check_kappa(k, kap)

    @property
    def n_layers(self) -> int:
        return self.spec.n_blocks

    def layer_rect(self, k: int) -> tuple[int, int]:
        lo = self.spec.C(k - 1)
        return lo, lo + self.F[k - 1]

    def kappa(self, k: int) -> dict[tuple[int, int], float]:
        if self.kappas is None:
            return {(1, self.spec.C(k - 1)): 1.0}
        return dict(self.kappas[k - 1])

    def _check_kappa(self, k: int, kap: Atoms) -> None:
        total = sum(kap.values())
        if abs(total - 1.0) > 1e-12:
            raise GeometryError(f"layer {k} law sums to {total!r}")
        lo, hi = self.layer_rect(k)
        for (n, tau), m in kap.items():
            if m < 0:
                raise GeometryError(f"layer {k}: negative mass at {(n, tau)}")
            if not (1 <= n <= self.n_bar and lo <= tau <= hi):
                raise GeometryError(f"layer {k}: atom {(n, tau)} outside n in [1, {self.n_bar}], tau in [{lo}, {hi}]")


def validate_geometry(init: InitSpec) -> list[str]:
    """Layer separation and growth of the blocked stretches, for every consecutive pair."""
    out = []
    spec = init.spec
    for k in range(1, spec.n_blocks):
        top = spec.C(k) + init.F[k]
        b_next = spec.B(k + 1)
        if top >= b_next:
            out.append(f"level {k}: layer {k + 1} reaches tau = {top} >= B_{k + 1} = {b_next} (layer overlap)")
        if b_next - top <= spec.B(k):
            out.append(f"level {k}: B_{k + 1} - (C_{k} + F_{k + 1}) = {b_next - top} does not exceed B_{k} = {spec.B(k)}")
    return out


def truncate_weights(delta: DeltaWeights, n: int) -> DeltaWeights:
    """Fold the weights of layers ``n, n+1, ...`` into layer ``n``."""
    if n < 1:
        raise ValueError("truncation level must be positive")
    if n > len(delta):
        raise ValueError(f"truncation level {n} exceeds {len(delta)} weights")
    return DeltaWeights(tuple(delta.d[:n - 1]) + (sum(delta.d[n - 1:]),))


def build_nu_delta(init: InitSpec, delta: DeltaWeights | Sequence[float]) -> StateMeasure:
    if not isinstance(delta, DeltaWeights):
        delta = DeltaWeights(tuple(delta))
    if len(delta) > init.n_layers:
        raise GeometryError(f"{len(delta)} weights for {init.n_layers} layers")
    problems = validate_geometry(init)
    if problems:
        raise GeometryError("; ".join(problems))
    atoms: dict[tuple[int, int], float] = {}
    for k, w in enumerate(delta.d, start=1):
        if w == 0.0:
            continue
        for cell, m in init.kappa(k).items():
            atoms[cell] = atoms.get(cell, 0.0) + w * m
    idle = atoms.pop((0, 0), 0.0)
    return StateMeasure.from_atoms(atoms, idle)


def layer_means(init: InitSpec) -> list[float]:
    return [mean_queue(StateMeasure.from_atoms(init.kappa(k))) for k in range(1, init.n_layers + 1)]


def init_to_json(init: InitSpec, delta: DeltaWeights | None = None) -> dict:
    obj: dict = {"n_bar": init.n_bar, "F": list(init.F)}
    if init.kappas is None:
        obj["kappas"] = "delta"
    else:
        obj["kappas"] = [[[n, tau, m] for (n, tau), m in sorted(k.items())] for k in init.kappas]
    if delta is not None:
        obj["delta_weights"] = list(delta.d)
    return obj


def init_from_json(obj: dict, spec: TypeBSpec) -> tuple[InitSpec, DeltaWeights | None]:
    kap = obj.get("kappas", "delta")
    if kap == "delta":
        kappas = None
    else:
        kappas = tuple({(int(n), int(t)): float(m) for n, t, m in layer} for layer in kap)
    init = InitSpec(spec, int(obj.get("n_bar", 1)), tuple(obj["F"]) if "F" in obj else None, kappas)
    d = obj.get("delta_weights")
    return init, None if d is None else DeltaWeights(tuple(d))
