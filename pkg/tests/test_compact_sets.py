import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackop import autodiff as ad
from stackop import compact_sets as cs
from stackop import game as gm
from stackop.errors import DomainError
from stackop.nn import MLP
from stackop.process import AdaptedProcess, BrownianEnsemble, HorizonConfig, ProjectionBasis, check_adapted, norm


@pytest.fixture(scope="module")
def ens():
    return BrownianEnsemble(HorizonConfig(M=64), 3000, seed=31)


def test_finite_set_sampling_and_membership(ens):
    u = AdaptedProcess.constant(0.3, ens)
    draws = cs.sample(cs.Finite([u]), 4, ens)
    assert all(d is u for d in draws)
    assert cs.membership_check(cs.Finite([u]), u).passed
    assert not cs.membership_check(cs.Finite([u]), u + 1.0).passed
    with pytest.raises(DomainError):
        cs.Finite([])


def test_invalid_descriptors():
    with pytest.raises(DomainError):
        cs.HolderDeterministic(alpha=1.5)
    with pytest.raises(DomainError):
        cs.ExpEllipsoid(C=-1.0)
    with pytest.raises(DomainError):
        cs.ExpEllipsoid(r=0.0)
    with pytest.raises(DomainError):
        cs.LipschitzConditioned(cap=0.0)


def test_zero_radius_ellipsoid_is_center(ens):
    ubar = AdaptedProcess.constant(0.5, ens)
    for u in cs.sample(cs.ExpEllipsoid(C=0.0, ubar=ubar, n_terms=6), 3, ens):
        np.testing.assert_allclose(u.values, ubar.values)


def test_ellipsoid_samples_satisfy_coefficient_bounds(ens):
    spec = cs.ExpEllipsoid(C=1.0, r=0.5, n_terms=12)
    for u in cs.sample(spec, 5, ens, seed=2):
        rep = cs.membership_check(spec, u)
        assert rep.passed
        assert np.all(np.abs(rep.details["coefficients"]) <= spec.bounds() + 1e-9)


def test_ellipsoid_membership_detects_violation(ens):
    ubar = AdaptedProcess.constant(0.2, ens)
    spec = cs.ExpEllipsoid(C=1.0, r=0.5, ubar=ubar, n_terms=8)
    assert cs.membership_check(spec, ubar).passed
    s1 = ProjectionBasis.first(1, ens.cfg).synthesize([2.0], ens)
    rep = cs.membership_check(spec, ubar + s1)
    assert not rep.passed
    assert rep.worst == "coefficient i=1"


def test_ellipsoid_bound_arithmetic():
    spec = cs.ExpEllipsoid(C=2.0, r=0.5)
    np.testing.assert_allclose(spec.bounds(3), 2.0 * np.exp(-0.5 * np.arange(1, 4)))
    tail = sum(4.0 * math.exp(-1.0 * i) for i in range(5, 400))
    assert tail <= spec.truncation_bound(4)


def test_holder_samples(ens):
    spec = cs.HolderDeterministic(0.5, 1.0)
    for u in cs.sample(spec, 6, ens, seed=3):
        rep = cs.membership_check(spec, u)
        assert rep.passed, rep
        assert rep.details["holder_quotient"] <= spec.bound


def test_holder_quotient_oracle(ens):
    t = ens.cfg.times
    f = np.sqrt(t)  # quotient exactly 1 for alpha = 1/2, attained at s = 0
    assert cs._grid_quotient(f, t, 0.5) == pytest.approx(1.0)
    spec = cs.HolderDeterministic(0.5, 1.0)
    near = AdaptedProcess.deterministic(lambda s: 0.99 * np.sqrt(s), ens)
    assert cs.membership_check(spec, near).passed
    over = AdaptedProcess.deterministic(lambda s: 1.5 * np.sqrt(s), ens)
    rep = cs.membership_check(spec, over)
    assert not rep.passed and rep.worst == "holder_quotient"


def test_affine_capped_conditional_expectation_matches_sampling():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(400_000)
    for a, b, lo, hi, w, tau in [(0.8, 0.1, -0.5, 0.6, 0.3, 0.4), (-1.0, 0.0, -0.2, 0.9, -0.7, 1.0), (0.5, 0.2, -1.0, 1.0, 0.0, 0.0)]:
        mc = np.mean(np.clip(a * (w + math.sqrt(tau) * z) + b, lo, hi))
        got = cs._affine_capped_cond_exp(a, b, lo, hi, np.array([w]), np.array([tau]))[0]
        assert abs(got - mc) < 5e-3


def test_lipschitz_controls_are_bounded_adapted_martingales(ens):
    spec = cs.LipschitzConditioned(1.0, 1.0)
    for u in cs.sample(spec, 3, ens, seed=4):
        assert cs.membership_check(spec, u).passed
        assert check_adapted(u)
        means = u.values[:, :, 0].mean(axis=0)
        se = u.values[:, -1, 0].std() / math.sqrt(ens.P)
        assert np.max(np.abs(means - means[0])) < 4 * se + 1e-12


def test_latent_manifold(ens):
    net = MLP.build([2, 6], rng=0)
    spec = cs.LatentManifold(2, net)
    for u in cs.sample(spec, 2, ens, seed=5):
        assert cs.membership_check(spec, u).passed
    assert not cs.membership_check(spec, AdaptedProcess.from_evaluator(lambda e: e.paths[:, :-1, :] ** 3, ens)).passed


def test_truncation_error_obeys_bound():
    cfg = HorizonConfig(M=64)
    ens = BrownianEnsemble(cfg, 4000, seed=8)
    spec = cs.ExpEllipsoid(C=1.0, r=0.5, n_terms=16)
    samples = cs.sample(spec, 10, ens, seed=9)
    for d in (2, 4, 8):
        basis = ProjectionBasis.first(d, cfg)
        worst = max(norm(u - basis.synthesize(cs.gram_coefficients(u, basis), ens)) ** 2 for u in samples)
        assert worst <= spec.truncation_bound(d) * 1.05


def test_coefficient_box():
    spec = cs.ExpEllipsoid(C=1.0, r=0.5)
    box = cs.CoefficientBox.from_ellipsoid(spec, 4)
    np.testing.assert_allclose(box.upper, spec.bounds(4))
    assert box.contains(box.project(np.full(4, 10.0)))
    assert all(box.contains(b) for b in box.sample(20, np.random.default_rng(0)))
    with pytest.raises(DomainError):
        cs.CoefficientBox([1.0], [0.0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_box_projection_idempotent(beta):
    box = cs.CoefficientBox.from_ellipsoid(cs.ExpEllipsoid(), 4)
    p = box.project(beta)
    np.testing.assert_array_equal(box.project(p), p)


def _anchors(n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return [tuple(rng.normal(0, scale, 1) for _ in range(3)) for _ in range(n)]


def _lq_game():
    sq = lambda t: ad.tsum(ad.square(t), axis=-1)
    return gm.GameSpec(
        "lq",
        1,
        1,
        1,
        f=lambda x, a, b: 2.0 * x + 0.5 * a - b,
        sigma=lambda x, a, b: 0.3 * x,
        L0=lambda x, a, b: sq(x) + sq(a),
        L1=lambda x, a, b: 3.0 * sq(x) + 2.0 * sq(b),
        g0=lambda x: 4.0 * sq(x),
        g1=sq,
        X0=0.0,
    )


def test_linearization_recovers_lq_game():
    lin = cs.linearize_game(_lq_game(), _anchors(30, 0))
    m = lin.matrices
    for key, val in {"A": 2.0, "B1": 0.5, "B2": -1.0, "C": 0.3, "D1": 0.0, "D2": 0.0, "Q0": 1.0, "R0": 1.0, "Q1": 3.0, "R1": 2.0, "G0": 4.0, "G1": 1.0}.items():
        assert m[key][0, 0] == pytest.approx(val, abs=1e-8), key
    assert max(lin.residuals.values()) < 1e-8
    assert lin.spec.kappa == pytest.approx(4.0)
    again = cs.linearize_game(lin.spec, _anchors(30, 1))
    assert max(again.residuals.values()) < 1e-8


def test_linearization_of_cubic_drift_matches_normal_equations():
    spec = _lq_game()
    spec.f = lambda x, a, b: x + x * x * x
    anchors = _anchors(200, 2, scale=0.1)
    lin = cs.linearize_game(spec, anchors)
    Z = np.array([np.concatenate(a) for a in anchors])
    F = Z[:, 0] + Z[:, 0] ** 3
    coef = np.linalg.solve(Z.T @ Z, Z.T @ F)
    assert lin.matrices["A"][0, 0] == pytest.approx(coef[0], rel=1e-8)
    assert lin.matrices["A"][0, 0] > 1.0
    assert lin.residuals["drift"] == pytest.approx(float(np.sum((Z @ coef - F) ** 2)), rel=1e-6)


def test_single_anchor_warns():
    with pytest.warns(UserWarning):
        cs.linearize_game(_lq_game(), _anchors(1, 3))


def test_perturbation_pairs_scales(ens):
    pairs = cs.perturbation_pairs(cs.HolderDeterministic(), 5, ens, seed=1, scale_min=0.01, scale_max=0.1)
    dists = [norm(b - a) for a, b in pairs]
    np.testing.assert_allclose(dists, np.geomspace(0.01, 0.1, 5), rtol=1e-10)
