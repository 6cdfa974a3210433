"""Integer service-time laws with sparse, block-structured support.

A support ``A = {a_1 = 1 < a_2 < ...}`` is chosen inside blocks ``[B_k, C_k]``
and each atom receives the geometric mass of the integers up to the next atom::

    p(a_n) = sum_{a_n <= l < a_{n+1}} 2**-l = 2**-(a_n - 1) - 2**-(a_{n+1} - 1)

The final atom absorbs the whole remaining tail, so a finite support always
carries total mass one.  Hazards are evaluated in closed form
(``1 - 2**-(a_{n+1} - a_n)``) which stays exact even when the masses underflow.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

MAX_ATOM = 2**60


class SpecError(ValueError):
    """Malformed block specification or atom selection."""


@dataclass(frozen=True)
class TypeBSpec:
    """Block parametrization ``{B_1, C_1, B_2, C_2, ...}`` of a sparse support.

    ``atoms`` optionally fixes the chosen atoms per block; by default every block
    contributes the single atom ``B_k``.  ``last`` marks the final block as the
    terminal one (all later ``B_k`` are infinite).
    """

    blocks: tuple[tuple[int, int], ...]
    last: bool = True
    atoms: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        blocks = tuple((int(b), int(c)) for b, c in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if self.atoms is not None:
            object.__setattr__(self, "atoms", tuple(tuple(int(a) for a in sel) for sel in self.atoms))
        problems = self.violations()
        if problems:
            raise SpecError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not self.blocks:
            return ["spec has no blocks"]
        if self.blocks[0][0] != 1:
            out.append(f"block 1 must start at B_1 = 1, got {self.blocks[0][0]}")
        prev_c = 0
        for k, (b, c) in enumerate(self.blocks, start=1):
            if c < b:
                out.append(f"block {k}: C_{k} = {c} < B_{k} = {b}")
            if b <= prev_c:
                out.append(f"block {k}: B_{k} = {b} does not exceed C_{k - 1} = {prev_c}")
            if c > MAX_ATOM:
                out.append(f"block {k}: C_{k} = {c} exceeds the supported range 2**60")
            prev_c = max(prev_c, c)
        if self.atoms is not None:
            if len(self.atoms) != len(self.blocks):
                out.append(f"atoms_per_block has {len(self.atoms)} entries for {len(self.blocks)} blocks")
            else:
                prev = 0
                for k, (sel, (b, c)) in enumerate(zip(self.atoms, self.blocks), start=1):
                    if not sel:
                        out.append(f"block {k}: empty atom selection")
                        continue
                    for a in sel:
                        if not b <= a <= c:
                            out.append(f"block {k}: atom {a} outside [{b}, {c}]")
                        if a <= prev:
                            out.append(f"block {k}: atoms not strictly increasing at {a}")
                        prev = a
                if self.atoms and self.atoms[0] and self.atoms[0][0] != 1:
                    out.append("block 1 selection must contain the atom 1")
        return out

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def B(self, k: int) -> int:
        return self.blocks[k - 1][0]

    def C(self, k: int) -> int:
        """``C_k`` with the convention ``C_0 = 0``."""
        return 0 if k == 0 else self.blocks[k - 1][1]

    def gaps(self) -> list[int]:
        return [c - b for b, c in self.blocks]

    def support(self) -> list[int]:
        if self.atoms is None:
            return [b for b, _ in self.blocks]
        return [a for sel in self.atoms for a in sel]

    def extend(self, block: tuple[int, int], atoms: Sequence[int] | None = None, last: bool = True) -> "TypeBSpec":
        """Append one block, keeping the atom selection rule consistent."""
        new_atoms = None
        if self.atoms is not None or atoms is not None:
            cur = self.atoms if self.atoms is not None else tuple((b,) for b, _ in self.blocks)
            new_atoms = cur + (tuple(atoms) if atoms is not None else (block[0],),)
        return TypeBSpec(self.blocks + (tuple(block),), last=last, atoms=new_atoms)

    def to_json(self) -> dict:
        return {
            "blocks": [list(bc) for bc in self.blocks],
            "atoms_per_block": None if self.atoms is None else [list(a) for a in self.atoms],
            "last": self.last,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TypeBSpec":
        if "blocks" not in obj:
            raise SpecError("spec JSON lacks 'blocks'")
        atoms = obj.get("atoms_per_block")
        return cls(
            blocks=tuple(tuple(bc) for bc in obj["blocks"]),
            last=bool(obj.get("last", True)),
            atoms=None if atoms is None else tuple(tuple(a) for a in atoms),
        )

    @classmethod
    def load(cls, path: str | Path) -> "TypeBSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ServiceDistribution:
    support: tuple[int, ...]
    mass: dict[int, float] = field(repr=False)
    # hazard on the support only; zero everywhere else
    atom_hazard: dict[int, float] = field(repr=False)
    mean: float
    second_moment: float

    @property
    def max_support(self) -> int:
        return self.support[-1]

    @property
    def p1(self) -> float:
        return self.mass.get(1, 0.0)

    def hazard(self, tau: int) -> float:
        return hazard(self, tau)

    def next_atom(self, tau: int) -> int | None:
        """Smallest support point strictly greater than ``tau``."""
        i = bisect.bisect_right(self.support, tau)
        return self.support[i] if i < len(self.support) else None

    def hazard_table(self) -> list[float]:
        """Dense ``[p_1, ..., p_T]`` list; only sensible for small supports."""
        return [self.atom_hazard.get(t, 0.0) for t in range(1, self.max_support + 1)]


def from_support(support: Sequence[int]) -> ServiceDistribution:
    """Distribution on an explicit sorted support using the geometric base law."""
    A = [int(a) for a in support]
    if not A or A[0] != 1:
        raise SpecError("support must start at 1")
    if any(b <= a for a, b in zip(A, A[1:])):
        raise SpecError(f"support not strictly increasing: {A}")
    if A[-1] > MAX_ATOM:
        raise SpecError("atoms beyond 2**60 are not supported")

    mass, haz = {}, {}
    m1 = m2 = 0.0
    for i, a in enumerate(A):
        tail = math.ldexp(1.0, -(a - 1))
        if i + 1 < len(A):
            step = A[i + 1] - a
            h = -math.expm1(-step * math.log(2.0))
            p = tail * h
        else:
            h, p = 1.0, tail
        mass[a] = p
        haz[a] = h
        m1 += a * p
        m2 += float(a) * a * p
    return ServiceDistribution(tuple(A), mass, haz, m1, m2)


def build_distribution(spec: TypeBSpec, atoms: Sequence[Sequence[int]] | None = None) -> ServiceDistribution:
    """Build the service law of ``spec``; ``atoms`` overrides the per-block choice."""
    if atoms is not None:
        spec = TypeBSpec(spec.blocks, last=spec.last, atoms=tuple(tuple(a) for a in atoms))
    return from_support(spec.support())


def hazard(dist: ServiceDistribution, tau: int) -> float:
    """Conditional completion probability ``p(tau) / sum_{k >= tau} p(k)``."""
    if not 1 <= tau <= dist.max_support:
        raise ValueError(f"tau = {tau} outside [1, {dist.max_support}]")
    return dist.atom_hazard.get(tau, 0.0)


def cutoff(spec: TypeBSpec, n: int) -> TypeBSpec:
    """Keep blocks ``1..n`` and mark block ``n`` as the last one."""
    if n < 1 or n > spec.n_blocks:
        raise SpecError(f"cutoff level {n} outside [1, {spec.n_blocks}]")
    atoms = None if spec.atoms is None else spec.atoms[:n]
    return TypeBSpec(spec.blocks[:n], last=True, atoms=atoms)


def remaining_service_mean(dist: ServiceDistribution, tau: int) -> float:
    """``E(eta - tau | eta > tau)``.

    Weights are rescaled by the first atom above ``tau`` so that very sparse
    supports do not underflow.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    i = bisect.bisect_right(dist.support, tau)
    A = dist.support[i:]
    if not A:
        raise ValueError(f"no service mass beyond tau = {tau}")
    base = A[0]
    num = den = 0.0
    for j, a in enumerate(A):
        hi = math.ldexp(1.0, -(a - base))
        lo = math.ldexp(1.0, -(A[j + 1] - base)) if j + 1 < len(A) else 0.0
        w = hi - lo
        num += (a - tau) * w
        den += w
    return num / den
