"""Controlled SDE games: Euler-Maruyama simulation, cost functionals and a
catalog of concrete games.

Coefficient callables receive tensors ``x (P, d)``, ``u0 (P, d0)``,
``u1 (P, d1)`` and return

* ``f`` -> drift ``(P, d)``
* ``sigma`` -> diffusion, either ``(P, d)`` (diagonal) or ``(P, d, d)``
* ``L0, L1`` -> running costs ``(P,)``
* ``g0, g1`` (called with ``x`` only) -> terminal costs ``(P,)``

Plain floats and numpy arrays are broadcast to those shapes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from stackop import autodiff as ad
from stackop.errors import DimensionError, DomainError, EnsembleMismatchError, ExplosionError, RefusalError
from stackop.process import AdaptedProcess, BrownianEnsemble

EXPLOSION_BOUND = 1e8


@dataclass
class GameSpec:
    name: str
    d: int
    d0: int
    d1: int
    f: Callable
    sigma: Callable
    L0: Callable
    L1: Callable
    g0: Callable
    g1: Callable
    X0: np.ndarray
    K: float = 1.0
    kappa: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X0 = np.broadcast_to(np.asarray(self.X0, dtype=np.float64), (self.d,)).copy()
        if self.kappa is not None and not self.kappa > 0:
            raise DomainError(f"convexity modulus must be positive, got {self.kappa}")
        if not self.K > 0:
            raise DomainError(f"Lipschitz constant must be positive, got {self.K}")

    def running_cost(self, player: int):
        return (self.L0, self.L1)[_player(player)]

    def terminal_cost(self, player: int):
        return (self.g0, self.g1)[_player(player)]


@dataclass
class StatePath:
    X: ad.Tensor  # (P, M+1, d)

    @property
    def values(self) -> np.ndarray:
        return self.X.data


@dataclass(frozen=True)
class StaticGame:
    loss0: Callable[[float, float], float]
    loss1: Callable[[float, float], float]


def _player(p):
    if p not in (0, 1):
        raise ValueError(f"player must be 0 or 1, got {p}")
    return p


def _as_control(u, ensemble: BrownianEnsemble, k: int) -> ad.Tensor:
    if isinstance(u, AdaptedProcess):
        if u.ensemble is not ensemble and u.ensemble.key != ensemble.key:
            raise EnsembleMismatchError("control was built on a different ensemble")
        u = ad.Tensor(u.values)
    u = ad.as_tensor(u)
    if u.ndim == 2:
        u = ad.reshape(u, u.shape + (1,))
    if u.shape != (ensemble.n_paths, ensemble.cfg.M, k):
        raise DimensionError(f"control must have shape {(ensemble.n_paths, ensemble.cfg.M, k)}, got {u.shape}")
    return u


def _vector(v, P: int, d: int) -> ad.Tensor:
    v = ad.as_tensor(v)
    if v.shape == (P, d):
        return v
    if v.shape == (P,) and d == 1:
        return ad.reshape(v, (P, 1))
    return ad.broadcast_to(v, (P, d))


def _scalar_field(v, P: int) -> ad.Tensor:
    v = ad.as_tensor(v)
    if v.shape == (P,):
        return v
    if v.shape == (P, 1):
        return ad.reshape(v, (P,))
    return ad.broadcast_to(v, (P,))


def _diffusion_term(s, dw: np.ndarray, P: int, d: int) -> ad.Tensor:
    s = ad.as_tensor(s)
    if s.ndim == 3:
        if s.shape != (P, d, d):
            s = ad.broadcast_to(s, (P, d, d))
        return ad.einsum("pij,pj->pi", s, dw)
    return _vector(s, P, d) * dw


def _check_finite(x: np.ndarray, step: int):
    bad = ~np.isfinite(x) | (np.abs(x) > EXPLOSION_BOUND)
    if bad.any():
        p = int(np.argmax(bad.reshape(bad.shape[0], -1).any(axis=1)))
        raise ExplosionError(p, step, x.reshape(x.shape[0], -1)[p][bad.reshape(bad.shape[0], -1)[p]][0])


def _rollout(spec: GameSpec, u0, u1, ensemble: BrownianEnsemble, players=(), keep_path=False):
    """Euler-Maruyama rollout; returns (path tensors, {player: per-scenario cost tensor})."""
    P, M, dt = ensemble.n_paths, ensemble.cfg.M, ensemble.dt
    if ensemble.cfg.d != spec.d and spec.d != 1:
        raise DimensionError(f"game state dimension {spec.d} needs a {spec.d}-dimensional Brownian motion")
    c0 = _as_control(u0, ensemble, spec.d0)
    c1 = _as_control(u1, ensemble, spec.d1)
    x = ad.Tensor(np.broadcast_to(spec.X0, (P, spec.d)).copy())
    path = [x] if keep_path else None
    running = {p: [] for p in players}
    for m in range(M):
        a = c0[:, m, :]
        b = c1[:, m, :]
        for p in players:
            running[p].append(_scalar_field(spec.running_cost(p)(x, a, b), P))
        dw = ensemble.increments[:, m, : spec.d]
        x = x + _vector(spec.f(x, a, b), P, spec.d) * dt + _diffusion_term(spec.sigma(x, a, b), dw, P, spec.d)
        _check_finite(x.data, m + 1)
        if keep_path:
            path.append(x)
    costs = {}
    for p in players:
        total = running[p][0]
        for r in running[p][1:]:
            total = total + r
        costs[p] = total * dt + _scalar_field(spec.terminal_cost(p)(x), P)
    return path, costs, x


def simulate(spec: GameSpec, u0, u1, ensemble: BrownianEnsemble) -> StatePath:
    """Euler-Maruyama: X_{m+1} = X_m + f dt + sigma dW_m with controls frozen on [t_m, t_{m+1})."""
    path, _, _ = _rollout(spec, u0, u1, ensemble, keep_path=True)
    return StatePath(ad.stack(path, axis=1))


def cost_samples(spec: GameSpec, player: int, u0, u1, ensemble: BrownianEnsemble) -> ad.Tensor:
    """Per-scenario cost sum_m L(X_m, u0_m, u1_m) dt + g(X_M), shape (P,)."""
    _, costs, _ = _rollout(spec, u0, u1, ensemble, players=(_player(player),))
    return costs[player]


def cost_tensor(spec: GameSpec, player: int, u0, u1, ensemble: BrownianEnsemble) -> ad.Tensor:
    return ad.mean(cost_samples(spec, player, u0, u1, ensemble))


def cost(spec: GameSpec, player: int, u0, u1, ensemble: BrownianEnsemble) -> float:
    """Monte-Carlo estimate of J_player(u0, u1)."""
    with ad.no_grad():
        return cost_tensor(spec, player, u0, u1, ensemble).item()


def cost_with_se(spec: GameSpec, player: int, u0, u1, ensemble: BrownianEnsemble) -> tuple[float, float]:
    with ad.no_grad():
        y = cost_samples(spec, player, u0, u1, ensemble).data
    se = float(np.std(y, ddof=1) / math.sqrt(len(y))) if len(y) > 1 else 0.0
    return float(np.mean(y)), se


def costs(spec: GameSpec, u0, u1, ensemble: BrownianEnsemble) -> tuple[float, float]:
    """(J_0, J_1) from a single rollout."""
    with ad.no_grad():
        _, c, _ = _rollout(spec, u0, u1, ensemble, players=(0, 1))
    return float(np.mean(c[0].data)), float(np.mean(c[1].data))


def validate_lipschitz(spec: GameSpec, n: int = 64, seed: int = 0, scale: float = 1.0) -> float:
    """Largest sampled difference quotient of f, sigma, L_i, g_i; warns when it exceeds K."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with ad.no_grad():
        for _ in range(n):
            x, y = rng.normal(0, scale, (2, 1, spec.d))
            a0, b0 = rng.normal(0, scale, (2, 1, spec.d0))
            a1, b1 = rng.normal(0, scale, (2, 1, spec.d1))
            dist = math.sqrt(np.sum((x - y) ** 2) + np.sum((a0 - b0) ** 2) + np.sum((a1 - b1) ** 2))
            if dist == 0:
                continue
            for fn in (spec.f, spec.sigma, spec.L0, spec.L1):
                lhs = ad.as_tensor(fn(ad.Tensor(x), ad.Tensor(a0), ad.Tensor(a1))).data
                rhs = ad.as_tensor(fn(ad.Tensor(y), ad.Tensor(b0), ad.Tensor(b1))).data
                worst = max(worst, float(np.sqrt(np.sum((np.broadcast_to(lhs, np.broadcast_shapes(lhs.shape, rhs.shape)) - rhs) ** 2))) / dist)
            for fn in (spec.g0, spec.g1):
                dx = math.sqrt(np.sum((x - y) ** 2))
                if dx > 0:
                    lhs = ad.as_tensor(fn(ad.Tensor(x))).data
                    rhs = ad.as_tensor(fn(ad.Tensor(y))).data
                    worst = max(worst, float(np.sqrt(np.sum((lhs - rhs) ** 2))) / dx)
    if worst > spec.K:
        warnings.warn(
            f"game {spec.name!r}: sampled Lipschitz quotient {worst:.3g} exceeds declared K={spec.K:.3g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return worst


# catalog -------------------------------------------------------------------------------------


def _zero_field(x, u0, u1):
    return 0.0


def _zero_terminal(x):
    return 0.0


def _sq(t):
    return ad.tsum(ad.square(t), axis=-1)


def scalar_quadratic_game(noise: float = 0.2, state_weight: float = 0.1, X0: float = 0.0, leader_weight: float = 1.0) -> GameSpec:
    """f = u0 + u1, sigma = noise, L1 = (u1 - u0)^2 + state_weight x^2, g1 = x^2 (kappa = 2).

    The leader pays L0 = leader_weight u0^2 + x^2 and g0 = x^2.
    """
    return GameSpec(
        name="scalar_quadratic",
        d=1,
        d0=1,
        d1=1,
        f=lambda x, u0, u1: u0 + u1,
        sigma=lambda x, u0, u1: noise,
        L0=lambda x, u0, u1: leader_weight * _sq(u0) + _sq(x),
        L1=lambda x, u0, u1: _sq(u1 - u0) + state_weight * _sq(x),
        g0=_sq,
        g1=_sq,
        X0=X0,
        K=max(2.0, 2.0 * leader_weight) * 10.0,
        kappa=2.0,
        params=dict(noise=noise, state_weight=state_weight, X0=X0, leader_weight=leader_weight),
    )


def pointwise_quadratic_game(slope: float = 1.0, shift: float = 0.0, leader_u0: float = 1.0, leader_u1: float = 1.0) -> GameSpec:
    """f = sigma = 0 and L1 = |u1 - a(u0)|^2 with a(v) = slope v + shift.

    The follower's best response is a(u0) pointwise (kappa = 2); the leader
    pays L0 = leader_u0 |u0|^2 + leader_u1 |u1|^2.
    """
    return GameSpec(
        name="pointwise_quadratic",
        d=1,
        d0=1,
        d1=1,
        f=_zero_field,
        sigma=_zero_field,
        L0=lambda x, u0, u1: leader_u0 * _sq(u0) + leader_u1 * _sq(u1),
        L1=lambda x, u0, u1: _sq(u1 - (slope * u0 + shift)),
        g0=_zero_terminal,
        g1=_zero_terminal,
        X0=0.0,
        K=20.0,
        kappa=2.0,
        params=dict(slope=slope, shift=shift, leader_u0=leader_u0, leader_u1=leader_u1),
    )


def decoupled_quadratic_game() -> GameSpec:
    """f = sigma = 0, L1 = |u1 - u0|^2, L0 = |u0|^2 + |u1|^2: equilibrium u0 = 0, U(0) = 0, value 0."""
    spec = pointwise_quadratic_game(1.0, 0.0, 1.0, 1.0)
    spec.name = "decoupled_quadratic"
    spec.params = {}
    return spec


def strongly_convex_game(
    A,
    B,
    A_sigma,
    B_sigma,
    C: Callable,
    C_sigma: Callable,
    C_L: Callable,
    D: Callable,
    D_sigma: Callable,
    L11: Callable,
    L11_modulus: float,
    L12: Callable,
    g1: Callable,
    inf_C_L: float,
    L0: Callable = _zero_field,
    g0: Callable = _zero_terminal,
    X0=0.0,
    K: float = 10.0,
    name: str = "strongly_convex",
) -> GameSpec:
    """The linear-in-(x, u1) family with multiplicative leader modulation.

    f = C(u0) (A x + B u1) + D(u0), sigma = C_sigma(u0) (A_sigma x + B_sigma u1) + D_sigma(u0)
    (diagonal noise), L1 = C_L(u0) L11(x, u1) + L12(u0). The follower modulus is
    kappa = L11_modulus * inf C_L.
    """
    kappa = float(L11_modulus) * float(inf_C_L)
    if not kappa > 0:
        raise RefusalError(f"nonpositive convexity modulus {kappa}: need L11 strongly convex and inf C_L > 0")
    A, B, As, Bs = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, A_sigma, B_sigma))
    d, d1 = A.shape[0], B.shape[1]
    if A.shape != (d, d) or As.shape != (d, d) or B.shape != (d, d1) or Bs.shape != (d, d1):
        raise DimensionError("inconsistent matrix shapes")
    return GameSpec(
        name=name,
        d=d,
        d0=1,
        d1=d1,
        f=lambda x, u0, u1: C(u0) * (x @ A.T + u1 @ B.T) + D(u0),
        sigma=lambda x, u0, u1: C_sigma(u0) * (x @ As.T + u1 @ Bs.T) + D_sigma(u0),
        L0=L0,
        L1=lambda x, u0, u1: _scalar_like(C_L(u0)) * L11(x, u1) + _scalar_like(L12(u0)),
        g0=g0,
        g1=g1,
        X0=X0,
        K=K,
        kappa=kappa,
    )


def _scalar_like(v):
    v = ad.as_tensor(v)
    if v.ndim == 2 and v.shape[1] == 1:
        return ad.reshape(v, (v.shape[0],))
    return v


def gbm_game(mu: float = 0.05, eta: float = 0.2, X0: float = 1.0) -> GameSpec:
    """Uncontrolled geometric Brownian motion dX = mu X dt + eta X dW."""
    return GameSpec(
        name="gbm",
        d=1,
        d0=1,
        d1=1,
        f=lambda x, u0, u1: mu * x,
        sigma=lambda x, u0, u1: eta * x,
        L0=_zero_field,
        L1=_zero_field,
        g0=lambda x: ad.tsum(x, axis=-1),
        g1=lambda x: ad.tsum(x, axis=-1),
        X0=X0,
        K=max(abs(mu), abs(eta), 1.0),
        kappa=None,
        params=dict(mu=mu, eta=eta, X0=X0),
    )


def counterexample_static() -> StaticGame:
    """Single-period game on [0,1]^2: l1 = u0 u1 (convex, not strongly), l0 = -u1."""
    return StaticGame(loss0=lambda u0, u1: -u1, loss1=lambda u0, u1: u0 * u1)


def counterexample_spec() -> GameSpec:
    """The static counterexample as a deterministic game with running costs l_i and f = sigma = 0."""
    return GameSpec(
        name="counterexample",
        d=1,
        d0=1,
        d1=1,
        f=_zero_field,
        sigma=_zero_field,
        L0=lambda x, u0, u1: -ad.tsum(u1, axis=-1),
        L1=lambda x, u0, u1: ad.tsum(u0 * u1, axis=-1),
        g0=_zero_terminal,
        g1=_zero_terminal,
        X0=0.0,
        K=1.0,
        kappa=None,
    )


def counterexample_value(u0: float) -> float:
    """Leader's effective value inf over best responses of l0: -1 at u0 = 0, else 0."""
    if not 0.0 <= u0 <= 1.0:
        raise DomainError(f"u0={u0} outside [0, 1]")
    return -1.0 if u0 == 0.0 else 0.0


def counterexample_value_grid(u0: float, G: int) -> float:
    """Same value by exhaustive enumeration of u1 in {0, 1/G, ..., 1}."""
    if not 0.0 <= u0 <= 1.0:
        raise DomainError(f"u0={u0} outside [0, 1]")
    game = counterexample_static()
    grid = np.arange(G + 1) / G
    l1 = np.array([game.loss1(u0, v) for v in grid])
    best = grid[l1 <= l1.min()]
    return float(min(game.loss0(u0, v) for v in best)) + 0.0


CATALOG = {
    "scalar_quadratic": scalar_quadratic_game,
    "pointwise_quadratic": pointwise_quadratic_game,
    "decoupled_quadratic": decoupled_quadratic_game,
    "gbm": gbm_game,
    "counterexample": counterexample_spec,
}


def make_game(name: str, **params) -> GameSpec:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise DomainError(f"unknown game {name!r}; choose from {sorted(CATALOG)}") from None
    return factory(**params)
