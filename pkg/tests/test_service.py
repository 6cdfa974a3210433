import json
import math

import pytest
from hypothesis import given, strategies as st

from conftest import supports
from nmpqueue.service import (
    SpecError,
    TypeBSpec,
    build_distribution,
    cutoff,
    from_support,
    hazard,
    remaining_service_mean,
)


def test_two_atom_support_masses_and_hazards():
    d = from_support([1, 3])
    assert d.mass == {1: 0.75, 3: 0.25}
    assert d.atom_hazard[1] == 0.75
    assert hazard(d, 2) == 0.0
    assert hazard(d, 3) == 1.0


def test_single_atom_is_deterministic_service():
    d = from_support([1])
    assert d.mass == {1: 1.0}
    assert d.p1 == 1.0
    assert d.mean == 1.0 and d.second_moment == 1.0


def test_consecutive_atoms_moments():
    d = from_support([1, 2])
    assert d.mass == {1: 0.5, 2: 0.5}
    assert d.mean == pytest.approx(1.5)
    assert d.second_moment == pytest.approx(2.5)
    assert hazard(d, 1) == 0.5


def test_hazard_outside_support_range():
    d = from_support([1, 3])
    with pytest.raises(ValueError):
        hazard(d, 0)
    with pytest.raises(ValueError):
        hazard(d, 4)


def test_next_atom_and_table():
    d = from_support([1, 4, 9])
    assert d.next_atom(1) == 4
    assert d.next_atom(8) == 9
    assert d.next_atom(9) is None
    assert d.hazard_table()[:4] == [d.atom_hazard[1], 0.0, 0.0, d.atom_hazard[4]]


def test_default_atoms_are_block_starts():
    spec = TypeBSpec(((1, 1), (5, 8), (20, 20)))
    assert spec.support() == [1, 5, 20]
    assert build_distribution(spec).support == (1, 5, 20)
    assert spec.C(0) == 0 and spec.C(2) == 8 and spec.B(3) == 20


def test_atom_override():
    spec = TypeBSpec(((1, 1), (5, 8)))
    d = build_distribution(spec, atoms=[[1], [5, 7]])
    assert d.support == (1, 5, 7)


@pytest.mark.parametrize("blocks, atoms, fragment", [
    (((1, 1), (3, 2)), None, "block 2"),
    (((1, 3), (3, 5)), None, "block 2"),
    (((2, 2),), None, "block 1"),
    (((1, 1), (4, 6)), ((1,), (7,)), "block 2: atom 7 outside"),
    (((1, 1), (4, 6)), ((1,), ()), "block 2: empty"),
    (((1, 2), (4, 6)), ((2,), (4,)), "atom 1"),
    ((), None, "no blocks"),
])
def test_malformed_specs_name_the_block(blocks, atoms, fragment):
    with pytest.raises(SpecError, match=fragment):
        TypeBSpec(blocks, atoms=atoms)


def test_support_must_start_at_one_and_increase():
    with pytest.raises(SpecError):
        from_support([2, 3])
    with pytest.raises(SpecError):
        from_support([1, 3, 3])


def test_json_round_trip(tmp_path):
    spec = TypeBSpec(((1, 1), (5, 8)), atoms=((1,), (5, 6)))
    p = tmp_path / "s.json"
    p.write_text(json.dumps(spec.to_json()))
    assert TypeBSpec.load(p) == spec


def test_cutoff_keeps_leading_blocks():
    spec = TypeBSpec(((1, 1), (5, 5), (40, 40)))
    c = cutoff(spec, 2)
    assert c.blocks == ((1, 1), (5, 5))
    assert cutoff(spec, 3) == spec
    with pytest.raises(SpecError):
        cutoff(spec, 4)


def test_cutoff_matches_masses_below_the_dropped_block():
    spec = TypeBSpec(((1, 1), (5, 5), (40, 40)))
    full, cut = build_distribution(spec), build_distribution(cutoff(spec, 2))
    assert cut.mass[1] == full.mass[1]
    assert cut.mass[5] == pytest.approx(full.mass[5] + full.mass[40], rel=1e-15)
    assert cut.atom_hazard[5] == 1.0


def test_remaining_service_mean_examples():
    d = from_support([1, 3])
    assert remaining_service_mean(d, 0) == pytest.approx(d.mean)
    assert remaining_service_mean(d, 1) == pytest.approx(2.0)
    assert remaining_service_mean(d, 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        remaining_service_mean(d, 3)


def test_huge_gaps_stay_finite():
    d = from_support([1, 2000, 5000])
    assert d.atom_hazard[2000] == 1.0 - 2.0 ** -3000 or d.atom_hazard[2000] == 1.0
    assert remaining_service_mean(d, 1999) == pytest.approx(1.0)
    assert math.isfinite(d.mean)


@given(supports())
def test_masses_sum_to_one(A):
    d = from_support(A)
    assert sum(d.mass.values()) == pytest.approx(1.0, abs=1e-12)
    assert d.atom_hazard[A[-1]] == 1.0
    assert all(0.0 <= h <= 1.0 for h in d.atom_hazard.values())


@given(supports())
def test_hazard_matches_conditional_mass(A):
    d = from_support(A)
    tail = 1.0
    for a in A:
        assert d.atom_hazard[a] == pytest.approx(d.mass[a] / tail, rel=1e-12)
        tail -= d.mass[a]


@given(st.lists(st.integers(1, 30), min_size=1, max_size=4), st.integers(1, 4))
def test_cutoff_preserves_leading_masses(steps, n):
    blocks, b = [(1, 1)], 1
    for s in steps:
        b += s + 1
        blocks.append((b, b))
    spec = TypeBSpec(tuple(blocks))
    n = min(n, spec.n_blocks)
    full, cut = build_distribution(spec), build_distribution(cutoff(spec, n))
    for a in cut.support[:-1]:
        assert cut.mass[a] == full.mass[a]
    assert sum(cut.mass.values()) == pytest.approx(1.0, abs=1e-12)


@given(supports(max_atom=40), st.integers(0, 39))
def test_remaining_mean_bounded_by_next_atom(A, tau):
    d = from_support(A)
    if tau >= A[-1]:
        return
    r = remaining_service_mean(d, tau)
    assert d.next_atom(tau) - tau <= r + 1e-12
    assert r <= A[-1] - tau + 1e-12
