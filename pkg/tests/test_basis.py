import itertools
import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from stackop.basis import (
    ChaosIndex,
    ChaosTerm,
    HaarIndex,
    basis_element,
    basis_elements,
    basis_key,
    chaos_values,
    empirical_gram,
    evaluate_basis,
    haar_eval,
    hermite,
    hermite_array,
    make_element,
    single_argument_chaos,
    time_profile,
    wiener_integral,
)
from stackop.errors import DomainError, GridError
from stackop.process import BrownianEnsemble, HorizonConfig, check_adapted

X = sympy.Symbol("x")


def rodrigues_h(n):
    """He_n / n! from the Rodrigues formula, symbolically."""
    w = sympy.exp(-(X**2) / 2)
    he = sympy.simplify((-1) ** n * sympy.exp(X**2 / 2) * sympy.diff(w, X, n))
    return sympy.lambdify(X, he / sympy.factorial(n), "math")


@pytest.mark.parametrize("n", range(0, 9))
def test_hermite_matches_rodrigues(n):
    f = rodrigues_h(n)
    for x in np.linspace(-3.5, 3.5, 15):
        assert hermite(n, x) == pytest.approx(f(x), rel=1e-12, abs=1e-12)
        assert hermite_array(n, np.array([x]))[0] == pytest.approx(f(x), rel=1e-12, abs=1e-12)


def test_hermite_low_degrees():
    assert hermite(0, 0.3) == 1.0
    assert hermite(1, 0.3) == 0.3
    assert hermite(2, 2.0) == pytest.approx((4.0 - 1.0) / 2)
    with pytest.raises(DomainError):
        hermite(-1, 0.0)


def test_normalized_hermite_orthonormal_under_gauss_quadrature():
    nodes, weights = np.polynomial.hermite_e.hermegauss(40)
    weights = weights / math.sqrt(2 * math.pi)
    H = np.stack([math.sqrt(math.factorial(n)) * hermite_array(n, nodes) for n in range(10)])
    np.testing.assert_allclose(H * weights @ H.T, np.eye(10), atol=1e-10)


def test_haar_values():
    idx = HaarIndex(1, 1)
    assert haar_eval(idx, 0.6, 1.0) == pytest.approx(math.sqrt(2))
    assert haar_eval(idx, 0.8, 1.0) == pytest.approx(-math.sqrt(2))
    assert haar_eval(idx, 0.2, 1.0) == 0.0
    assert haar_eval(HaarIndex(0, 0), 0.0, 1.0) == 1.0
    with pytest.raises(DomainError):
        haar_eval(idx, 1.5, 1.0)
    with pytest.raises(DomainError):
        HaarIndex(1, 2)


@pytest.mark.parametrize("s1", range(0, 6))
def test_time_profiles_unit_norm_and_orthogonal(s1):
    cfg = HorizonConfig(T=2.0, M=64)
    prof = np.stack([time_profile(HaarIndex(s1, s2), cfg) for s2 in range(2**s1)])
    np.testing.assert_allclose(prof @ prof.T * cfg.dt, np.eye(2**s1), atol=1e-13)
    assert np.allclose(prof.sum(axis=1), 0.0)


def test_grid_too_coarse():
    cfg = HorizonConfig(M=8)
    with pytest.raises(GridError):
        time_profile(HaarIndex(3, 0), cfg)


def test_wiener_integral_is_signed_increment_sum():
    cfg = HorizonConfig(M=8)
    inc = np.arange(8, dtype=float).reshape(1, 8, 1)
    ens = BrownianEnsemble(cfg, 1, increments=inc)
    # psi_{1,0}: +sqrt2 on [0, 1/4), -sqrt2 on [1/4, 1/2)
    assert wiener_integral(HaarIndex(1, 0), ens)[0] == pytest.approx(math.sqrt(2) * ((0 + 1) - (2 + 3)))


def test_chaos_requires_distinct_directions_and_order():
    t = ChaosTerm(HaarIndex(1, 0), 1)
    with pytest.raises(DomainError):
        ChaosIndex((t, ChaosTerm(HaarIndex(1, 0), 2)))
    with pytest.raises(DomainError):
        ChaosTerm(HaarIndex(1, 0), 0)
    cfg = HorizonConfig(M=16)
    with pytest.raises(DomainError):
        make_element(HaarIndex(1, 0), ChaosIndex((t,)), cfg)
    e = make_element(HaarIndex(1, 1), ChaosIndex((t,)), cfg)
    assert e.norm_constant == pytest.approx(math.sqrt(2))


def _brute_force_keys(max_level, d, max_grade):
    """Every admissible (s1, s2, terms) with grade <= max_grade, sorted by (grade, j, s1, s2, terms)."""
    out = []
    for s1 in range(max_level + 1):
        for s2 in range(2**s1):
            out.append((s1, 0, s1, s2, ()))
            dirs = [
                (i, k, c)
                for i in range(1, max_level + 1)
                for k in range(2**i)
                for c in range(d)
                if (k + 1) / 2**i <= s2 / 2**s1
            ]
            for r in range(1, 4):
                for combo in itertools.combinations(dirs, r):
                    for degs in itertools.product(range(1, max_grade + 1), repeat=r):
                        j = sum(degs)
                        g = s1 + max(x[0] for x in combo) + j
                        if g > max_grade:
                            continue
                        terms = tuple(sorted((i, k, n, c) for (i, k, c), n in zip(combo, degs)))
                        out.append((g, j, s1, s2, terms))
    out.sort()
    return [(s1, s2, terms) for g, j, s1, s2, terms in out]


@pytest.mark.parametrize("d", [1, 2])
def test_enumeration_matches_brute_force(d):
    cfg = HorizonConfig(M=32, d=d)
    ref = _brute_force_keys(cfg.max_level, d, 5)
    assert [basis_key(r, cfg) for r in range(len(ref))] == ref


def test_first_sixteen_frozen():
    cfg = HorizonConfig(M=256)
    keys = [basis_key(r, cfg) for r in range(16)]
    expected = [(0, 0, ()), (1, 0, ()), (1, 1, ())]
    expected += [(2, s, ()) for s in range(4)] + [(3, s, ()) for s in range(8)]
    expected += [(1, 1, ((1, 0, 1, 0),))]
    assert keys == expected
    assert basis_key(32, cfg) == (1, 1, ((2, 0, 1, 0),))


def test_ranks_are_a_bijection_prefix():
    cfg = HorizonConfig(M=64, d=2)
    keys = [basis_key(r, cfg) for r in range(300)]
    assert len(set(keys)) == 300
    els = basis_elements(300, cfg)
    assert [e.linear_rank for e in els] == list(range(300))
    grades = [e.grade for e in els]
    assert grades == sorted(grades)


def test_element_roundtrip():
    cfg = HorizonConfig(M=64)
    for r in (0, 15, 40, 77):
        e = basis_element(r, cfg)
        assert type(e).from_tuple(e.to_tuple(), cfg) == e


def test_single_argument_variant(ens64):
    xi = wiener_integral(HaarIndex(1, 0), ens64)
    np.testing.assert_allclose(single_argument_chaos(HaarIndex(1, 0), 2, ens64), xi * (xi**2 - 1) / 2)


def test_gram_first_32_small_ensemble(grid64):
    ens = BrownianEnsemble(grid64, 20000, seed=5)
    G, se = empirical_gram(basis_elements(32, grid64), ens)
    assert np.all(np.abs(G - np.eye(32)) <= 4 * se + 1e-12)


def test_adaptedness_of_chaos_elements(ens64, grid64):
    for r in (15, 32, 33, 40):
        assert check_adapted(evaluate_basis(basis_element(r, grid64), ens64))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 200))
def test_every_element_satisfies_ordering_constraint(rank):
    cfg = HorizonConfig(M=64, d=2)
    e = basis_element(rank, cfg)
    assert e.chaos_index.supported_before(e.time_index)
    if e.chaos_index.terms:
        assert e.time_index.s2 >= 1


def test_chaos_unit_variance(grid64):
    ens = BrownianEnsemble(grid64, 50000, seed=9)
    e = basis_element(34, grid64)
    v = chaos_values(e.chaos_index, ens)
    assert abs(np.mean(v**2) - 1) < 4 * np.std(v**2) / math.sqrt(len(v))
