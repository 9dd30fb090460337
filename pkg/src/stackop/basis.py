"""Orthonormal family of simple adapted processes: Haar wavelets in time times
normalized Wiener-chaos functionals in space.

An element is ``psi_{s1,s2}(t) * prod_c sqrt(n_c!) h_{n_c}(xi_c)`` where each
``xi_c = int psi_{i_c,k_c} dW^{(coord_c)}`` is the Wiener integral of a Haar
wavelet (a standard normal) and the space directions are pairwise distinct and
supported before the time wavelet switches on.

Enumeration order: grade ``g = s1 + i_max + j`` (time level, finest space
level, total chaos degree; ``i_max = 0`` for the empty chaos), then ``j``, then
lexicographically by ``(s1, s2, terms)``. Every grade holds finitely many
elements, so ranks are a bijection onto the naturals.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from stackop import kernels
from stackop.errors import DomainError, GridError
from stackop.process import AdaptedProcess, BrownianEnsemble, HorizonConfig


def hermite(i: int, x: float) -> float:
    """h_i(x) = He_i(x) / i!, via (i+1) h_{i+1} = x h_i - h_{i-1}."""
    if i < 0:
        raise DomainError("Hermite degree must be nonnegative")
    if i == 0:
        return 1.0
    h_prev, h = 1.0, float(x)
    for n in range(1, i):
        h_prev, h = h, (x * h - h_prev) / (n + 1)
    return h


def hermite_array(i: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if i < 0:
        raise DomainError("Hermite degree must be nonnegative")
    if i == 0:
        return np.ones_like(x)
    h_prev, h = np.ones_like(x), x.copy()
    for n in range(1, i):
        h_prev, h = h, (x * h - h_prev) / (n + 1)
    return h


@dataclass(frozen=True, order=True)
class HaarIndex:
    s1: int
    s2: int

    def __post_init__(self):
        if self.s1 < 0 or self.s2 < 0 or self.s2 + 1 > 2**self.s1:
            raise DomainError(f"invalid Haar index (s1={self.s1}, s2={self.s2})")

    def amplitude(self, T: float) -> float:
        return 2.0 ** (self.s1 / 2) / math.sqrt(T)

    def breakpoints(self, T: float) -> tuple[float, float, float]:
        w = T / 2**self.s1
        return self.s2 * w, (self.s2 + 0.5) * w, (self.s2 + 1) * w

    def grid_slices(self, cfg: HorizonConfig) -> tuple[int, int, int]:
        """Step indices (lo, mid, hi) of the support; raises if off-grid."""
        if self.s1 > cfg.max_level:
            raise GridError(f"Haar level {self.s1} needs M >= {2 ** (self.s1 + 1)}, grid has M={cfg.M}")
        width = cfg.M >> self.s1
        lo = self.s2 * width
        return lo, lo + width // 2, lo + width

    def as_tuple(self):
        return (self.s1, self.s2)


@dataclass(frozen=True, order=True)
class ChaosTerm:
    direction: HaarIndex
    degree: int
    coord: int = 0

    def __post_init__(self):
        if self.degree < 1:
            raise DomainError("chaos degrees are positive integers")
        if self.coord < 0:
            raise DomainError("Brownian coordinate must be nonnegative")

    def as_tuple(self):
        return (self.direction.s1, self.direction.s2, self.degree, self.coord)


@dataclass(frozen=True)
class ChaosIndex:
    terms: tuple[ChaosTerm, ...] = ()

    def __post_init__(self):
        terms = tuple(sorted(self.terms))
        keys = [(t.coord, t.direction) for t in terms]
        if len(set(keys)) != len(keys):
            raise DomainError("chaos directions must be pairwise distinct")
        object.__setattr__(self, "terms", terms)

    @property
    def total_degree(self) -> int:
        return sum(t.degree for t in self.terms)

    @property
    def max_level(self) -> int:
        return max((t.direction.s1 for t in self.terms), default=0)

    def supported_before(self, time_index: HaarIndex) -> bool:
        """Every direction ends no later than the time wavelet starts: (k+1)/2^i <= s2/2^s1."""
        return all(
            (t.direction.s2 + 1) * 2**time_index.s1 <= time_index.s2 * 2**t.direction.s1 for t in self.terms
        )

    def as_tuple(self):
        return tuple(t.as_tuple() for t in self.terms)

    @classmethod
    def from_tuple(cls, data):
        return cls(tuple(ChaosTerm(HaarIndex(s1, s2), deg, coord) for s1, s2, deg, coord in data))


@dataclass(frozen=True)
class BasisElement:
    time_index: HaarIndex
    chaos_index: ChaosIndex
    norm_constant: float
    linear_rank: int

    @property
    def grade(self) -> int:
        return self.time_index.s1 + self.chaos_index.max_level + self.chaos_index.total_degree

    def to_tuple(self):
        """Integer-tuple serialization: (rank, s1, s2, ((i, k, degree, coord), ...))."""
        return (self.linear_rank, self.time_index.s1, self.time_index.s2, self.chaos_index.as_tuple())

    @classmethod
    def from_tuple(cls, data, cfg: HorizonConfig) -> "BasisElement":
        rank, s1, s2, chaos = data
        return make_element(HaarIndex(int(s1), int(s2)), ChaosIndex.from_tuple(chaos), cfg, int(rank))


def norm_constant(time_index: HaarIndex, chaos_index: ChaosIndex, T: float) -> float:
    """Scale turning indicator-difference x prod h_n(xi) into a unit-norm element.

    The Wiener-integral arguments are already normalized to unit variance.
    """
    c = time_index.amplitude(T)
    for t in chaos_index.terms:
        c *= math.sqrt(math.factorial(t.degree))
    return c


def make_element(time_index: HaarIndex, chaos_index: ChaosIndex, cfg: HorizonConfig, rank: int = -1) -> BasisElement:
    if not chaos_index.supported_before(time_index):
        raise DomainError("chaos directions must be supported before the time wavelet activates")
    return BasisElement(time_index, chaos_index, norm_constant(time_index, chaos_index, cfg.T), rank)


def haar_eval(idx: HaarIndex, t: float, T: float) -> float:
    """L^2([0,T])-normalized Haar wavelet psi_{s1,s2}(t)."""
    if not 0.0 <= t <= T:
        raise DomainError(f"t={t} outside [0, {T}]")
    lo, mid, hi = idx.breakpoints(T)
    if lo <= t < mid:
        return idx.amplitude(T)
    if mid <= t < hi:
        return -idx.amplitude(T)
    return 0.0


def time_profile(idx: HaarIndex, cfg: HorizonConfig) -> np.ndarray:
    """psi_{s1,s2} on the grid intervals [t_m, t_{m+1}), shape (M,)."""
    lo, mid, hi = idx.grid_slices(cfg)
    out = np.zeros(cfg.M)
    amp = idx.amplitude(cfg.T)
    out[lo:mid] = amp
    out[mid:hi] = -amp
    return out


def wiener_integral(direction: HaarIndex, ensemble: BrownianEnsemble, coord: int = 0) -> np.ndarray:
    """int_0^T psi(s) dW_s per scenario, an exact signed sum of increments."""
    if coord >= ensemble.cfg.d:
        raise GridError(f"coordinate {coord} exceeds Brownian dimension {ensemble.cfg.d}")
    lo, mid, hi = direction.grid_slices(ensemble.cfg)
    return kernels.haar_wiener(ensemble.increments[:, :, coord], lo, mid, hi, direction.amplitude(ensemble.cfg.T))


def chaos_values(idx: ChaosIndex, ensemble: BrownianEnsemble) -> np.ndarray:
    """Unit-variance chaos functional for every scenario, shape (P,)."""
    if not idx.terms:
        return np.ones(ensemble.n_paths)
    xi = np.stack([wiener_integral(t.direction, ensemble, t.coord) for t in idx.terms], axis=1)
    return kernels.hermite_chaos(xi, [t.degree for t in idx.terms])


def chaos_value(idx: ChaosIndex, ensemble: BrownianEnsemble, scenario: int) -> float:
    return float(chaos_values(idx, ensemble)[scenario])


def single_argument_chaos(direction: HaarIndex, j: int, ensemble: BrownianEnsemble, coord: int = 0) -> np.ndarray:
    """prod_{n=1..j} h_n(xi) of one Wiener integral xi.

    Compatibility variant of the product form; these functionals are not
    orthonormal and never enter the enumerated basis.
    """
    xi = wiener_integral(direction, ensemble, coord)
    out = np.ones_like(xi)
    for n in range(1, j + 1):
        out *= hermite_array(n, xi)
    return out


def evaluate_basis(elem: BasisElement, ensemble: BrownianEnsemble) -> AdaptedProcess:
    """The P x M x 1 process psi(t_m) * chaos(omega_p)."""

    def ev(ens):
        return (chaos_values(elem.chaos_index, ens)[:, None] * time_profile(elem.time_index, ens.cfg)[None, :])[:, :, None]

    return AdaptedProcess.from_evaluator(ev, ensemble)


def _compositions(total: int, parts: int):
    """Ordered tuples of ``parts`` positive integers summing to ``total``."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0,) + cuts + (total,)
        yield tuple(b - a for a, b in zip(bounds, bounds[1:]))


@lru_cache(maxsize=None)
def _grade(g: int, max_level: int, d: int) -> tuple:
    out = []
    for j in range(g + 1):
        for s1 in range(min(g - j, max_level) + 1):
            i_max = g - j - s1
            if j == 0:
                if i_max == 0:
                    out.extend((j, s1, s2, ()) for s2 in range(2**s1))
                continue
            if not 1 <= i_max <= max_level:
                continue
            for s2 in range(1, 2**s1):
                dirs = [
                    (i, k, c)
                    for i in range(1, i_max + 1)
                    for k in range(2**i)
                    if (k + 1) * 2**s1 <= s2 * 2**i
                    for c in range(d)
                ]
                for r in range(1, min(j, len(dirs)) + 1):
                    for combo in itertools.combinations(dirs, r):
                        if max(x[0] for x in combo) != i_max:
                            continue
                        for degs in _compositions(j, r):
                            terms = tuple(sorted((i, k, n, c) for (i, k, c), n in zip(combo, degs)))
                            out.append((j, s1, s2, terms))
    out.sort()
    return tuple(out)


@lru_cache(maxsize=None)
def _enumeration(max_level: int, d: int, upto: int) -> tuple:
    keys = []
    g = 0
    while len(keys) <= upto:
        keys.extend(_grade(g, max_level, d))
        g += 1
    return tuple(keys)


def basis_key(rank: int, cfg: HorizonConfig):
    """(s1, s2, ((i, k, degree, coord), ...)) of the rank-th element."""
    if rank < 0:
        raise DomainError("rank must be nonnegative")
    # round the enumeration length up so nearby ranks share a cache entry
    upto = max(64, 1 << int(rank).bit_length())
    _, s1, s2, terms = _enumeration(cfg.max_level, cfg.d, upto)[rank]
    return s1, s2, terms


def basis_element(rank: int, cfg: HorizonConfig) -> BasisElement:
    s1, s2, terms = basis_key(rank, cfg)
    return make_element(HaarIndex(s1, s2), ChaosIndex.from_tuple(terms), cfg, rank)


def basis_elements(n: int, cfg: HorizonConfig, offset: int = 0) -> list[BasisElement]:
    return [basis_element(r, cfg) for r in range(offset, offset + n)]


def empirical_gram(elements, ensemble: BrownianEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo Gram matrix of basis elements and entrywise standard errors."""
    tp = np.stack([time_profile(e.time_index, ensemble.cfg) for e in elements])
    ch = np.stack([chaos_values(e.chaos_index, ensemble) for e in elements])
    return kernels.gram_separable(tp, ch, ensemble.dt)
