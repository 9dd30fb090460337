"""Compact sets of leader controls: generators, membership checks, and the
least-squares linear-quadratic surrogate of a game."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from stackop import autodiff as ad
from stackop import game as gm
from stackop.errors import DomainError
from stackop.nn import MLP
from stackop.process import AdaptedProcess, BrownianEnsemble, ProjectionBasis, check_adapted


# --- set descriptors --------------------------------------------------------------


@dataclass
class Finite:
    items: list

    def __post_init__(self):
        if not self.items:
            raise DomainError("a finite control set needs at least one element")


@dataclass
class HolderDeterministic:
    """Deterministic controls with |f(0)| <= bound and grid Hölder quotient <= bound."""

    alpha: float = 0.5
    bound: float = 1.0
    knots: int = 9
    k: int = 1

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise DomainError(f"Hölder exponent must lie in (0, 1], got {self.alpha}")
        if self.bound < 0:
            raise DomainError("Hölder bound must be nonnegative")
        if self.knots < 2:
            raise DomainError("need at least two knots")


@dataclass
class LipschitzConditioned:
    """Martingale controls u_t = E[clip(a W_T + b, lo, hi) | F_t] with |a| <= lipschitz."""

    lipschitz: float = 1.0
    cap: float = 1.0

    def __post_init__(self):
        if self.lipschitz < 0 or self.cap <= 0:
            raise DomainError("need lipschitz >= 0 and cap > 0")


@dataclass
class ExpEllipsoid:
    """ubar + sum_i beta_i s_i with |beta_i| <= C exp(-r i), i = 1, 2, ..."""

    C: float = 1.0
    r: float = 0.5
    ubar: AdaptedProcess | None = None
    n_terms: int = 32
    k: int = 1

    def __post_init__(self):
        if self.C < 0:
            raise DomainError(f"ellipsoid radius C must be >= 0, got {self.C}")
        if not self.r > 0:
            raise DomainError(f"decay rate r must be > 0, got {self.r}")
        if self.n_terms < 1:
            raise DomainError("n_terms must be >= 1")

    def bounds(self, n: int | None = None) -> np.ndarray:
        n = self.n_terms if n is None else n
        return self.C * np.exp(-self.r * np.arange(1, n + 1))

    def truncation_bound(self, d: int) -> float:
        """Squared-norm bound on u - p_d u: C^2 exp(-r d) / (1 - exp(-2 r))."""
        return self.C**2 * math.exp(-self.r * d) / (1.0 - math.exp(-2.0 * self.r))


@dataclass
class LatentManifold:
    """ubar + sum_i net(z)_i s_i for z uniform in [-1, 1]^d_lat."""

    d_lat: int
    net: MLP
    ubar: AdaptedProcess | None = None

    def __post_init__(self):
        if self.net.d_in != self.d_lat:
            raise DomainError(f"parameterization net takes {self.net.d_in} inputs, d_lat = {self.d_lat}")


CompactSetSpec = Finite | HolderDeterministic | LipschitzConditioned | ExpEllipsoid | LatentManifold


@dataclass
class CoefficientBox:
    """Axis-aligned box of leader coefficients, used by projected descent."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
            raise DomainError("box needs lower <= upper with matching shapes")

    @property
    def dim(self) -> int:
        return self.lower.size

    @classmethod
    def from_ellipsoid(cls, spec: ExpEllipsoid, d: int, center=None):
        b = spec.bounds(d)
        c = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)[:d]
        return cls(c - b, c + b)

    def project(self, beta) -> np.ndarray:
        return np.clip(beta, self.lower, self.upper)

    def sample(self, n: int, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def contains(self, beta, tol: float = 0.0) -> bool:
        beta = np.asarray(beta)
        return bool(np.all(beta >= self.lower - tol) and np.all(beta <= self.upper + tol))


# --- sampling ---------------------------------------------------------------------


def _grid_quotient(values: np.ndarray, times: np.ndarray, alpha: float) -> float:
    """max_{s < t on the grid} |f(t) - f(s)| / |t - s|^alpha (values (M,) or (M, k))."""
    v = values.reshape(len(times), -1)
    dv = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)
    dt = np.abs(times[:, None] - times[None, :])
    iu = np.triu_indices(len(times), 1)
    return float(np.max(dv[iu] / dt[iu] ** alpha)) if len(iu[0]) else 0.0


def _holder_path(spec: HolderDeterministic, times: np.ndarray, T: float, rng) -> np.ndarray:
    knots = np.linspace(0.0, T, spec.knots)
    raw = np.cumsum(rng.normal(size=(spec.knots, spec.k)), axis=0)
    raw -= raw[0]
    shape = np.stack([np.interp(times, knots, raw[:, c]) for c in range(spec.k)], axis=1)
    q = _grid_quotient(shape, times, spec.alpha)
    level = rng.uniform(0.2, 1.0) * spec.bound
    shape = shape * (level / q) if q > 0 else shape * 0.0
    start = rng.uniform(-spec.bound, spec.bound, size=spec.k)
    return shape + start


def _affine_capped_cond_exp(a, b, lo, hi, w, tau):
    """E[clip(a(w + sqrt(tau) Z) + b, lo, hi)] for standard normal Z, vectorized over w."""
    mu = a * w + b
    s = abs(a) * np.sqrt(tau)

    def call(k):
        # E[(Y - k)^+] for Y ~ N(mu, s^2)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(s > 0, (mu - k) / np.where(s > 0, s, 1.0), 0.0)
            pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
            smooth = (mu - k) * ndtr(z) + s * pdf
        return np.where(s > 0, smooth, np.maximum(mu - k, 0.0))

    return lo + call(lo) - call(hi)


def _lipschitz_evaluator(params, k):
    def evaluate(ens: BrownianEnsemble) -> np.ndarray:
        W = ens.paths[:, :-1, 0]  # W at t_m uses increments before m
        tau = ens.cfg.T - ens.cfg.times[None, :]
        out = np.empty((ens.n_paths, ens.cfg.M, k))
        for c, (a, b, lo, hi) in enumerate(params):
            out[:, :, c] = _affine_capped_cond_exp(a, b, lo, hi, W, tau)
        return out

    return evaluate


def _expansion(ubar, coeffs, basis: ProjectionBasis, ens: BrownianEnsemble) -> AdaptedProcess:
    u = basis.synthesize(coeffs, ens)
    return u if ubar is None else ubar + u


def sample(spec, n: int, ensemble: BrownianEnsemble, seed: int = 0) -> list[AdaptedProcess]:
    if n < 1:
        raise DomainError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = ensemble.cfg
    if isinstance(spec, Finite):
        return [spec.items[i] for i in rng.integers(0, len(spec.items), size=n)]
    if isinstance(spec, HolderDeterministic):
        out = []
        for _ in range(n):
            path = _holder_path(spec, cfg.times, cfg.T, rng)
            out.append(AdaptedProcess.deterministic(lambda t, p=path: p, ensemble, k=spec.k))
        return out
    if isinstance(spec, LipschitzConditioned):
        out = []
        for _ in range(n):
            a = rng.uniform(-spec.lipschitz, spec.lipschitz)
            lo = rng.uniform(-spec.cap, 0.0)
            hi = rng.uniform(0.0, spec.cap)
            b = rng.uniform(lo, hi)
            out.append(AdaptedProcess.from_evaluator(_lipschitz_evaluator([(a, b, lo, hi)], 1), ensemble))
        return out
    if isinstance(spec, ExpEllipsoid):
        basis = ProjectionBasis.first(spec.n_terms, cfg, k=spec.k)
        bounds = np.repeat(spec.bounds(), spec.k)
        return [_expansion(spec.ubar, rng.uniform(-bounds, bounds), basis, ensemble) for _ in range(n)]
    if isinstance(spec, LatentManifold):
        basis = ProjectionBasis.first(spec.net.d_out, cfg)
        out = []
        with ad.no_grad():
            for _ in range(n):
                z = rng.uniform(-1.0, 1.0, size=spec.d_lat)
                out.append(_expansion(spec.ubar, spec.net(z).data, basis, ensemble))
        return out
    raise DomainError(f"unknown compact set descriptor {type(spec).__name__}")


# --- membership ---------------------------------------------------------------------


@dataclass
class MembershipReport:
    passed: bool
    worst: str
    worst_value: float = 0.0
    limit: float = 0.0
    details: dict = field(default_factory=dict)


def gram_coefficients(u: AdaptedProcess, basis: ProjectionBasis) -> np.ndarray:
    """Coefficients of the empirical-L2 least-squares fit of u by the basis span."""
    tp, ch = basis.factors(u.ensemble)
    G, _ = basis.gram(u.ensemble)
    G = np.kron(G, np.eye(basis.k))
    b = basis.coefficients(u.values, u.ensemble)
    return np.linalg.lstsq(G, b, rcond=None)[0]


def membership_check(spec, u: AdaptedProcess, tol: float = 1e-9) -> MembershipReport:
    """Check the defining inequalities of the set on computable quantities."""
    ens = u.ensemble
    if isinstance(spec, Finite):
        dists = [float(np.max(np.abs(u.values - v.values))) for v in spec.items]
        best = int(np.argmin(dists))
        return MembershipReport(dists[best] <= tol, f"nearest element {best}", dists[best], tol)
    if isinstance(spec, HolderDeterministic):
        spread = float(np.max(np.ptp(u.values, axis=0)))
        q = _grid_quotient(u.values[0], ens.cfg.times, spec.alpha)
        start = float(np.max(np.abs(u.values[0, 0])))
        limit = spec.bound * (1.0 + tol)
        checks = {"deterministic": (spread, tol), "holder_quotient": (q, limit), "initial_value": (start, limit)}
        return _report(checks)
    if isinstance(spec, LipschitzConditioned):
        sup = float(np.max(np.abs(u.values)))
        adapted = check_adapted(u) if u.is_causal else True
        checks = {"sup": (sup, spec.cap * (1.0 + tol)), "adapted": (0.0 if adapted else 1.0, 0.5)}
        return _report(checks)
    if isinstance(spec, ExpEllipsoid):
        basis = ProjectionBasis.first(spec.n_terms, ens.cfg, k=spec.k)
        resid = u if spec.ubar is None else u - spec.ubar
        coeffs = gram_coefficients(resid, basis)
        bounds = np.repeat(spec.bounds(), spec.k)
        excess = np.abs(coeffs) - bounds
        i = int(np.argmax(excess))
        rep = MembershipReport(
            bool(excess[i] <= tol * max(1.0, spec.C)),
            f"coefficient i={i // spec.k + 1}",
            float(abs(coeffs[i])),
            float(bounds[i]),
            {"coefficients": coeffs},
        )
        return rep
    if isinstance(spec, LatentManifold):
        basis = ProjectionBasis.first(spec.net.d_out, ens.cfg)
        resid = u if spec.ubar is None else u - spec.ubar
        coeffs = gram_coefficients(resid, basis)
        off = resid - basis.synthesize(coeffs, ens)
        outside = float(np.sqrt(np.mean(np.sum(off.values**2, axis=(1, 2)) * ens.dt)))
        return MembershipReport(outside <= 1e-8, "component outside the decoder span", outside, 1e-8)
    raise DomainError(f"unknown compact set descriptor {type(spec).__name__}")


def _report(checks: dict) -> MembershipReport:
    worst, ratio = None, -np.inf
    for name, (val, lim) in checks.items():
        r = val - lim
        if r > ratio:
            worst, ratio = name, r
    val, lim = checks[worst]
    return MembershipReport(ratio <= 0, worst, val, lim, {k: v[0] for k, v in checks.items()})


# --- least-squares linearization ---------------------------------------------------------


@dataclass
class Linearization:
    spec: gm.GameSpec
    matrices: dict
    residuals: dict


def _lstsq(X: np.ndarray, Y: np.ndarray, what: str) -> np.ndarray:
    if X.shape[0] < X.shape[1]:
        warnings.warn(f"{what}: {X.shape[0]} anchor points for {X.shape[1]} unknowns; fit is not identifiable", stacklevel=3)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        warnings.warn(f"{what}: rank-deficient design, using ridge 1e-8", stacklevel=3)
        return np.linalg.solve(X.T @ X + 1e-8 * np.eye(X.shape[1]), X.T @ Y)
    return np.linalg.lstsq(X, Y, rcond=None)[0]


def _quad_features(z: np.ndarray) -> np.ndarray:
    """Features z_a z_b (a <= b) of a batch (n, m); pairs with a != b count twice."""
    n, m = z.shape
    iu = np.triu_indices(m)
    f = z[:, iu[0]] * z[:, iu[1]]
    return f * np.where(iu[0] == iu[1], 1.0, 2.0)


def _sym_from_features(theta: np.ndarray, m: int) -> np.ndarray:
    S = np.zeros((m, m))
    S[np.triu_indices(m)] = theta
    return S + S.T - np.diag(np.diag(S))


def _eval(fn, *args):
    with ad.no_grad():
        return np.asarray(ad.as_tensor(fn(*[ad.Tensor(a[None, :]) for a in args])).data, dtype=np.float64).reshape(-1)


def linearize_game(spec: gm.GameSpec, anchors) -> Linearization:
    """Least-squares linear-quadratic surrogate fitted at anchor points (x, v0, v1).

    Drift and diffusion get affine-free linear fits in (x, v0, v1); running
    costs get x'Q_i x + v_i' R_i v_i (leader uses v0, follower v1) and terminal
    costs x'G_i x.
    """
    xs = np.array([np.atleast_1d(a[0]) for a in anchors], dtype=np.float64)
    v0 = np.array([np.atleast_1d(a[1]) for a in anchors], dtype=np.float64)
    v1 = np.array([np.atleast_1d(a[2]) for a in anchors], dtype=np.float64)
    d, d0, d1 = spec.d, spec.d0, spec.d1
    if len(anchors) == 0:
        raise DomainError("need at least one anchor point")
    Z = np.hstack([xs, v0, v1])
    F = np.array([_eval(spec.f, x, a, b) * np.ones(d) for x, a, b in zip(xs, v0, v1)])
    S = np.array([_eval(spec.sigma, x, a, b) for x, a, b in zip(xs, v0, v1)])
    sig_shape = S.shape[1]
    if sig_shape == 1 and d > 1:
        S = np.repeat(S, d, axis=1)
        sig_shape = d

    drift = _lstsq(Z, F, "drift")
    diff = _lstsq(Z, S, "diffusion")
    A, B1, B2 = drift[:d].T, drift[d : d + d0].T, drift[d + d0 :].T
    Cm, D1, D2 = diff[:d].T, diff[d : d + d0].T, diff[d + d0 :].T
    residuals = {"drift": float(np.sum((Z @ drift - F) ** 2)), "diffusion": float(np.sum((Z @ diff - S) ** 2))}

    mats = {"A": A, "B1": B1, "B2": B2, "C": Cm, "D1": D1, "D2": D2}
    for i, (L, g, v) in enumerate(((spec.L0, spec.g0, v0), (spec.L1, spec.g1, v1))):
        y = np.array([_eval(L, x, a, b)[0] for x, a, b in zip(xs, v0, v1)])
        feats = np.hstack([_quad_features(xs), _quad_features(v)])
        theta = _lstsq(feats, y, f"running cost {i}")
        nq = d * (d + 1) // 2
        mats[f"Q{i}"] = _sym_from_features(theta[:nq], d)
        mats[f"R{i}"] = _sym_from_features(theta[nq:], v.shape[1])
        residuals[f"running{i}"] = float(np.sum((feats @ theta - y) ** 2))
        yg = np.array([_eval(g, x)[0] for x in xs])
        fg = _quad_features(xs)
        tg = _lstsq(fg, yg, f"terminal cost {i}")
        mats[f"G{i}"] = _sym_from_features(tg, d)
        residuals[f"terminal{i}"] = float(np.sum((fg @ tg - yg) ** 2))

    return Linearization(_lq_spec(spec, mats, sig_shape), mats, residuals)


def _lin(M):
    Mt = np.ascontiguousarray(M.T)
    return lambda z: ad.matmul(z, Mt)


def _quad(Q):
    return lambda z: ad.tsum(ad.matmul(z, Q) * z, axis=-1)


def _lq_spec(spec: gm.GameSpec, m: dict, sig_shape: int) -> gm.GameSpec:
    A, B1, B2, Cm, D1, D2 = (_lin(m[k]) for k in ("A", "B1", "B2", "C", "D1", "D2"))
    q0, q1, r0, r1 = _quad(m["Q0"]), _quad(m["Q1"]), _quad(m["R0"]), _quad(m["R1"])
    G0, G1 = _quad(m["G0"]), _quad(m["G1"])
    d = spec.d
    if sig_shape == d * d and d > 1:
        sigma = lambda x, a, b: ad.reshape(Cm(x) + D1(a) + D2(b), (-1, d, d))  # noqa: E731
    else:
        sigma = lambda x, a, b: Cm(x) + D1(a) + D2(b)  # noqa: E731
    kappa = None
    lam = np.linalg.eigvalsh(m["R1"]).min()
    if lam > 0 and np.linalg.eigvalsh(m["Q1"]).min() >= -1e-12 and np.linalg.eigvalsh(m["G1"]).min() >= -1e-12:
        kappa = 2.0 * float(lam)
    norms = [np.linalg.norm(v, 2) for v in m.values()]
    return gm.GameSpec(
        name=f"{spec.name}_lq",
        d=d,
        d0=spec.d0,
        d1=spec.d1,
        f=lambda x, a, b: A(x) + B1(a) + B2(b),
        sigma=sigma,
        L0=lambda x, a, b: q0(x) + r0(a),
        L1=lambda x, a, b: q1(x) + r1(b),
        g0=G0,
        g1=G1,
        X0=spec.X0,
        K=max(1.0, 2.0 * max(norms)),
        kappa=kappa,
        params={"linearized_from": spec.name},
    )


def perturbation_pairs(spec, n: int, ensemble: BrownianEnsemble, seed: int = 0, scale_min: float = 0.01, scale_max: float = 0.1):
    """Pairs (u0, u0 + delta v) with u0 and v drawn from the set, v scaled to unit
    norm, and delta log-spaced over [scale_min, scale_max]."""
    base = sample(spec, n, ensemble, seed=seed)
    dirs = sample(spec, n, ensemble, seed=seed + 1)
    scales = np.geomspace(scale_min, scale_max, n) if n > 1 else np.array([scale_max])
    pairs = []
    for u, v, s in zip(base, dirs, scales):
        nv = math.sqrt(float(np.mean(np.sum(v.values**2, axis=(1, 2)) * ensemble.dt)))
        pairs.append((u, u + v * (s / nv if nv > 0 else 0.0)))
    return pairs
