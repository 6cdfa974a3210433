import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import states
from nmpqueue.measure import (
    Rectangle,
    StateMeasure,
    banded_mean_queue,
    convolve_poisson,
    core_rectangle,
    eps_close,
    mean_queue,
    mean_queue_bracket,
    poisson_pmf,
    poisson_window,
    sup_distance,
)


def pois(lam, k):
    return math.exp(-lam) * lam ** k / math.factorial(k)


def test_mean_queue_examples():
    assert mean_queue(StateMeasure.point(3, 5)) == 3
    assert mean_queue(StateMeasure.idle()) == 0
    assert mean_queue(StateMeasure.from_atoms({(1, 0): 0.5, (3, 2): 0.5})) == 2


def test_banded_mean_examples():
    mu = StateMeasure.from_atoms({(2, 0): 0.5, (2, 10): 0.5})
    assert banded_mean_queue(mu, (0, 5)) == 1
    assert banded_mean_queue(mu, (0, math.inf)) == mean_queue(mu)


def test_core_rectangle_single_atom():
    assert core_rectangle(StateMeasure.point(5, 0), 0.01).n_max == 5


def test_core_rectangle_geometric_law():
    # sum_{n > m} n 2^{-n-1} = (m + 2) 2^{-m-1}: 0.0107 at m = 9, 0.0059 at m = 10
    mu = StateMeasure.from_atoms({(n, 0): 2.0 ** (-n - 1) for n in range(1, 80)}, idle_mass=0.5)
    assert core_rectangle(mu, 0.01).n_max == 10
    assert core_rectangle(mu, 0.011).n_max == 9


def test_core_rectangle_idle_point():
    assert core_rectangle(StateMeasure.idle(), 0.01).n_max == 1


def test_core_rectangle_rejects_bad_budget():
    with pytest.raises(ValueError):
        core_rectangle(StateMeasure.idle(), 0.0)


def test_rectangle_validation_and_json():
    with pytest.raises(ValueError):
        Rectangle(0)
    with pytest.raises(ValueError):
        Rectangle(3, 5, 4)
    r = Rectangle(4, 2, 9)
    assert Rectangle.from_json(r.to_json()) == r
    assert Rectangle.from_json(Rectangle(2).to_json()) == Rectangle(2)
    assert Rectangle(2).has_idle and not r.has_idle


def test_eps_close_examples():
    nu = StateMeasure.from_atoms({(1, 0): 0.3, (2, 1): 0.2}, idle_mass=0.5)
    rect = Rectangle(3, 0, 5)
    assert eps_close(nu, nu, rect, 0.01)
    bumped = StateMeasure.from_atoms({(1, 0): 0.45, (2, 1): 0.2}, idle_mass=0.5)
    assert not eps_close(bumped, nu, rect, 0.1)
    scaled = StateMeasure.from_atoms({(1, 0): 0.3 * 1.05, (2, 1): 0.2 * 1.05}, idle_mass=0.5 * 1.05)
    assert eps_close(scaled, nu, rect, 0.1)


def test_eps_close_zero_patterns():
    a = StateMeasure.from_atoms({(1, 0): 0.5}, idle_mass=0.5)
    b = StateMeasure.from_atoms({(1, 0): 0.4, (2, 0): 0.1}, idle_mass=0.5)
    assert not eps_close(a, b, Rectangle(2), 0.5)
    # the differing cell lies outside a narrower rectangle
    assert eps_close(a, b, Rectangle(1), 0.3)
    with pytest.raises(ValueError):
        eps_close(a, a, Rectangle(1), 0.0)


def test_poisson_pmf_examples():
    assert poisson_pmf(0, 0) == 1
    assert poisson_pmf(0, 3) == 0
    assert poisson_pmf(1, 1) == pytest.approx(math.exp(-1), rel=1e-15)
    assert poisson_pmf(2.5, -1) == 0
    with pytest.raises(ValueError):
        poisson_pmf(-1, 0)


@pytest.mark.parametrize("lam", [1e-6, 0.3, 1.0, 7.9, 8.1, 50.0, 400.0])
def test_poisson_window_tails_below_tolerance(lam):
    lo, pmf = poisson_window(lam, 1e-14)
    hi = lo + pmf.size - 1
    assert (stats.poisson.cdf(lo - 1, lam) if lo else 0.0) < 1e-14
    assert stats.poisson.sf(hi, lam) < 1e-14
    if lam <= 8:
        # small rates get the tightest right cut
        assert stats.poisson.sf(hi - 1, lam) >= 1e-14 * (1 - 1e-9)
    assert pmf[0] == pytest.approx(poisson_pmf(lam, lo), rel=1e-10)


def test_convolve_zero_rate_is_identity():
    psi = StateMeasure.from_atoms({(2, 1): 0.4}, idle_mass=0.6)
    assert convolve_poisson(psi, 0.0) is psi


def test_convolve_idle_point():
    out = convolve_poisson(StateMeasure.idle(), 1.0)
    assert out.idle_mass == pytest.approx(math.exp(-1), rel=1e-14)
    for k in range(1, 6):
        assert out.mass(k, 0) == pytest.approx(pois(1.0, k), rel=1e-12)


def test_convolve_mixed_state():
    psi = StateMeasure.from_atoms({(1, 1): 0.25}, idle_mass=0.75)
    out = convolve_poisson(psi, 0.75)
    assert out.idle_mass == pytest.approx(0.75 * pois(0.75, 0), rel=1e-13)
    for n in range(1, 6):
        assert out.mass(n, 0) == pytest.approx(0.75 * pois(0.75, n), rel=1e-12)
        assert out.mass(n, 1) == pytest.approx(0.25 * pois(0.75, n - 1), rel=1e-12)
    assert mean_queue(out) == pytest.approx(1.0, abs=1e-12)


def test_convolve_rejects_rate_above_one():
    with pytest.raises(ValueError):
        convolve_poisson(StateMeasure.idle(), 1.5)
    assert convolve_poisson(StateMeasure.idle(), 1.5, check_rate=False).total() == pytest.approx(1.0)


def test_pruning_moves_mass_to_lost():
    mu = StateMeasure.from_atoms({(1, 0): 0.5, (9, 0): 1e-20}, idle_mass=0.5)
    assert mu.mass(9, 0) == 0.0
    assert mu.lost_mass == pytest.approx(1e-20)
    assert mu.lost_moment == pytest.approx(9e-20)
    lo, hi = mean_queue_bracket(mu)
    assert hi - lo == pytest.approx(9e-20)


def test_csv_round_trip(tmp_path):
    mu = StateMeasure.from_atoms({(1, 0): 0.25, (4, 7): 0.125}, idle_mass=0.625)
    p = tmp_path / "snap.csv"
    mu.write_csv(p, ["config_sha256=abc"])
    back = StateMeasure.read_csv(p)
    assert back.equals(mu)
    assert p.read_text().startswith("# config_sha256=abc")


def test_from_atoms_validation():
    with pytest.raises(ValueError):
        StateMeasure.from_atoms({(1, 0): -0.1})
    with pytest.raises(ValueError):
        StateMeasure.from_atoms({(0, 3): 0.1})


@given(states(), st.floats(0.0, 1.0))
def test_convolve_conserves_mass_and_adds_inflow(psi, lam):
    out = convolve_poisson(psi, lam)
    assert out.total() == pytest.approx(psi.total(), abs=1e-12)
    gain = mean_queue(out) + out.lost_moment - mean_queue(psi)
    assert gain == pytest.approx(lam * psi.stored_mass(), abs=1e-12)


@given(states())
def test_eps_close_reflexive(mu):
    rect = core_rectangle(mu, 0.01)
    assert eps_close(mu, mu, rect, 1e-9)
    assert sup_distance(mu, mu, rect) == 0.0


@given(states(), states(), st.floats(0.01, 1.5))
def test_eps_close_symmetric(a, b, eps):
    rect = Rectangle(3)
    assert eps_close(a, b, rect, eps) == eps_close(b, a, rect, eps)


@given(states(), st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_core_rectangle_monotone_in_budget(mu, b1, b2):
    lo, hi = sorted((b1, b2))
    assert core_rectangle(mu, lo).n_max >= core_rectangle(mu, hi).n_max


@given(states())
def test_queue_marginal_sums_to_stored_mass(mu):
    marg = mu.queue_marginal()
    assert marg.sum() == pytest.approx(mu.stored_mass(), abs=1e-14)
    assert float(np.arange(marg.size) @ marg) == pytest.approx(mean_queue(mu), abs=1e-14)
