"""Discretized H^2_T: Brownian ensembles, adapted processes, inner products,
orthogonal projections onto basis spans, and the operator encoder.

Conventions
-----------
* The grid has ``M`` steps of width ``dt = T / M``; a process value at step
  ``m`` is the value on ``[t_m, t_{m+1})``.
* Predictability on the grid: the value at step ``m`` may depend on the
  increments ``dW_0, ..., dW_{m-1}`` only.
* Expectations are Monte-Carlo averages over the ``P`` scenarios of one
  ensemble. Processes from different ensembles never mix.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from stackop import kernels
from stackop.errors import DimensionError, EnsembleMismatchError, GridError, NotCheckableError


@dataclass(frozen=True)
class HorizonConfig:
    T: float = 1.0
    M: int = 256
    d: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise GridError(f"horizon T must be positive, got {self.T}")
        if self.M < 2 or self.M & (self.M - 1):
            raise GridError(f"M must be a power of two >= 2, got {self.M}")
        if self.d < 1:
            raise GridError(f"Brownian dimension must be >= 1, got {self.d}")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def max_level(self) -> int:
        """Finest dyadic level whose breakpoints (including midpoints) are grid nodes."""
        return int(math.log2(self.M)) - 1

    @property
    def times(self) -> np.ndarray:
        """Left endpoints t_0, ..., t_{M-1}."""
        return np.arange(self.M) * self.dt


class BrownianEnsemble:
    """``P`` shared d-dimensional Brownian paths on a uniform grid.

    Increments come from a Philox counter-based generator keyed by ``seed``
    so the ensemble is a pure function of ``(seed, P, cfg)``.
    """

    def __init__(self, cfg: HorizonConfig, n_paths: int, seed: int = 0, increments=None, tag: str = ""):
        if n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        self.cfg = cfg
        self.n_paths = int(n_paths)
        self.seed = int(seed)
        self.tag = tag
        if increments is None:
            rng = np.random.Generator(np.random.Philox(key=self.seed & (2**64 - 1)))
            increments = rng.standard_normal((self.n_paths, cfg.M, cfg.d)) * math.sqrt(cfg.dt)
        increments = np.asarray(increments, dtype=np.float64)
        if increments.shape != (self.n_paths, cfg.M, cfg.d):
            raise DimensionError(f"increments must have shape {(self.n_paths, cfg.M, cfg.d)}, got {increments.shape}")
        increments.setflags(write=False)
        self.increments = increments
        self._paths = None

    @property
    def key(self):
        return (self.seed, self.n_paths, self.cfg, self.tag)

    @property
    def P(self) -> int:
        return self.n_paths

    @property
    def dt(self) -> float:
        return self.cfg.dt

    @property
    def paths(self) -> np.ndarray:
        """Brownian values at the grid nodes, shape (P, M+1, d), with W_0 = 0."""
        if self._paths is None:
            w = np.zeros((self.n_paths, self.cfg.M + 1, self.cfg.d))
            np.cumsum(self.increments, axis=1, out=w[:, 1:, :])
            w.setflags(write=False)
            self._paths = w
        return self._paths

    def resample_from(self, step: int, salt: int = 1) -> "BrownianEnsemble":
        """Copy of the ensemble whose increments with index >= ``step`` are redrawn."""
        rng = np.random.Generator(np.random.Philox(key=(self.seed * 1_000_003 + 7919 * salt + step) & (2**64 - 1)))
        inc = np.array(self.increments)
        tail = inc[:, step:, :]
        inc[:, step:, :] = rng.standard_normal(tail.shape) * math.sqrt(self.cfg.dt)
        return BrownianEnsemble(self.cfg, self.n_paths, self.seed, increments=inc, tag=f"{self.tag}|resample{step}:{salt}")

    def __repr__(self):
        return f"BrownianEnsemble(P={self.n_paths}, M={self.cfg.M}, d={self.cfg.d}, T={self.cfg.T}, seed={self.seed})"


Evaluator = Callable[[BrownianEnsemble], np.ndarray]


@dataclass
class AdaptedProcess:
    """A P x M x k array of process values tied to one ensemble.

    ``provenance`` is ``"causal"`` when ``evaluator`` rebuilds the values from
    an ensemble using path prefixes only; ``"unchecked"`` for raw arrays.
    """

    values: np.ndarray
    ensemble: BrownianEnsemble
    provenance: str = "unchecked"
    evaluator: Evaluator | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[:2] != (self.ensemble.n_paths, self.ensemble.cfg.M):
            raise DimensionError(
                f"values must have shape (P={self.ensemble.n_paths}, M={self.ensemble.cfg.M}, k), got {np.shape(self.values)}"
            )
        self.values = v
        if self.provenance == "causal" and self.evaluator is None:
            raise ValueError("causal processes need an evaluator")

    @classmethod
    def from_evaluator(cls, evaluator: Evaluator, ensemble: BrownianEnsemble) -> "AdaptedProcess":
        return cls(evaluator(ensemble), ensemble, "causal", evaluator)

    @classmethod
    def deterministic(cls, fn: Callable[[np.ndarray], np.ndarray], ensemble: BrownianEnsemble, k: int = 1):
        """Process equal to ``fn(t_m)`` in every scenario (fn maps times (M,) to (M,) or (M, k))."""

        def ev(ens):
            prof = np.asarray(fn(ens.cfg.times), dtype=np.float64).reshape(ens.cfg.M, -1)
            if prof.shape[1] != k:
                raise DimensionError(f"deterministic profile has {prof.shape[1]} components, expected {k}")
            return np.broadcast_to(prof, (ens.n_paths, ens.cfg.M, k)).copy()

        return cls.from_evaluator(ev, ensemble)

    @classmethod
    def constant(cls, c, ensemble: BrownianEnsemble, k: int = 1):
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), (k,))
        return cls.deterministic(lambda t: np.tile(c, (len(t), 1)), ensemble, k)

    @classmethod
    def zeros(cls, ensemble: BrownianEnsemble, k: int = 1):
        return cls.constant(0.0, ensemble, k)

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @property
    def is_causal(self) -> bool:
        return self.provenance == "causal"

    def _combine(self, other, op):
        if isinstance(other, AdaptedProcess):
            _check_same_ensemble(self, other)
            if self.k != other.k:
                raise DimensionError(f"component mismatch {self.k} vs {other.k}")
            values = op(self.values, other.values)
            if self.is_causal and other.is_causal:
                e1, e2 = self.evaluator, other.evaluator
                return AdaptedProcess(values, self.ensemble, "causal", lambda ens: op(e1(ens), e2(ens)))
            return AdaptedProcess(values, self.ensemble)
        scalar = float(other)
        values = op(self.values, scalar)
        if self.is_causal:
            e1 = self.evaluator
            return AdaptedProcess(values, self.ensemble, "causal", lambda ens: op(e1(ens), scalar))
        return AdaptedProcess(values, self.ensemble)

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        if isinstance(other, AdaptedProcess):
            raise TypeError("products of processes are not supported; scale by a real number")
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def _check_same_ensemble(u: AdaptedProcess, v: AdaptedProcess):
    if u.ensemble is not v.ensemble and u.ensemble.key != v.ensemble.key:
        raise EnsembleMismatchError("processes come from different Brownian ensembles")


def inner_product_samples(u: AdaptedProcess, v: AdaptedProcess) -> np.ndarray:
    """Per-scenario summands sum_m u^T v dt, shape (P,)."""
    _check_same_ensemble(u, v)
    if u.values.shape != v.values.shape:
        raise DimensionError(f"shape mismatch {u.values.shape} vs {v.values.shape}")
    return kernels.pathwise_inner(u.values, v.values, u.ensemble.dt)


def inner_product(u: AdaptedProcess, v: AdaptedProcess) -> float:
    """Monte-Carlo estimate of E[int_0^T u_s^T v_s ds]."""
    return float(np.mean(inner_product_samples(u, v)))


def inner_product_se(u: AdaptedProcess, v: AdaptedProcess) -> tuple[float, float]:
    """Inner product together with its Monte-Carlo standard error."""
    y = inner_product_samples(u, v)
    se = float(np.std(y, ddof=1) / math.sqrt(len(y))) if len(y) > 1 else 0.0
    return float(np.mean(y)), se


def norm(u: AdaptedProcess) -> float:
    return math.sqrt(max(inner_product(u, u), 0.0))


def check_adapted(u: AdaptedProcess, probes: Sequence[int] | None = None, salt: int = 1) -> bool:
    """Predictability test by resampling the future.

    For each probe index ``m0`` the evaluator is re-run on an ensemble whose
    increments with index >= m0 are redrawn; values at steps <= m0 must be
    bit-identical.
    """
    if not u.is_causal:
        raise NotCheckableError("process has unchecked provenance; no evaluator to re-run")
    ens = u.ensemble
    M = ens.cfg.M
    if probes is None:
        probes = sorted(set(np.linspace(0, M - 1, 17).astype(int).tolist()) | {1})
    base = u.evaluator(ens)
    for m0 in probes:
        if not 0 <= m0 < M:
            raise ValueError(f"probe {m0} outside [0, {M})")
        alt = u.evaluator(ens.resample_from(m0, salt))
        if not np.array_equal(base[:, : m0 + 1, :], alt[:, : m0 + 1, :]):
            return False
    return True


class ProjectionBasis:
    """The first ``d`` elements of the chaos basis, with per-ensemble caches.

    Elements are scalar; a control with ``k`` components is expanded in the
    tensor basis ``s_i e_c`` whose coefficient index is ``i * k + c``.
    """

    def __init__(self, elements, k: int = 1):
        ranks = [e.linear_rank for e in elements]
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise ValueError("basis ranks must be strictly increasing")
        self.elements = list(elements)
        self.k = int(k)
        self._cache = {}

    @classmethod
    def first(cls, n: int, cfg: HorizonConfig, k: int = 1, offset: int = 0) -> "ProjectionBasis":
        from stackop.basis import basis_element

        return cls([basis_element(r, cfg) for r in range(offset, offset + n)], k=k)

    @property
    def ranks(self) -> list[int]:
        return [e.linear_rank for e in self.elements]

    def __len__(self):
        return len(self.elements)

    @property
    def dim(self) -> int:
        return len(self.elements) * self.k

    def factors(self, ensemble: BrownianEnsemble) -> tuple[np.ndarray, np.ndarray]:
        """Separable evaluation: time profiles (n, M) and chaos values (n, P)."""
        hit = self._cache.get(ensemble.key)
        if hit is not None and hit[0] is ensemble:
            return hit[1], hit[2]
        from stackop.basis import chaos_values, time_profile

        tp = np.stack([time_profile(e.time_index, ensemble.cfg) for e in self.elements]) if self.elements else np.zeros((0, ensemble.cfg.M))
        ch = np.stack([chaos_values(e.chaos_index, ensemble) for e in self.elements]) if self.elements else np.zeros((0, ensemble.n_paths))
        self._cache = {ensemble.key: (ensemble, tp, ch)}
        return tp, ch

    def gram(self, ensemble: BrownianEnsemble) -> tuple[np.ndarray, np.ndarray]:
        """Empirical Gram matrix of the scalar elements and its standard errors."""
        tp, ch = self.factors(ensemble)
        return kernels.gram_separable(tp, ch, ensemble.dt)

    def coefficients(self, values: np.ndarray, ensemble: BrownianEnsemble) -> np.ndarray:
        """Inner products of raw values (P, M, k) with every basis direction."""
        tp, ch = self.factors(ensemble)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.shape[2] != self.k:
            raise DimensionError(f"process has {values.shape[2]} components, basis expects {self.k}")
        # (P, M, k) x (n, M) -> (P, n, k); weight by chaos (n, P)
        proj_t = np.einsum("pmk,nm->pnk", values, tp)
        coeffs = np.einsum("pnk,np->nk", proj_t, ch) * ensemble.dt / ensemble.n_paths
        return coeffs.reshape(-1)

    def synthesize_values(self, coeffs, ensemble: BrownianEnsemble) -> np.ndarray:
        """Values of sum_i coeffs_i s_i on the ensemble, shape (P, M, k)."""
        tp, ch = self.factors(ensemble)
        c = np.asarray(coeffs, dtype=np.float64).reshape(len(self.elements), self.k)
        # (n, P) (n, k) (n, M) -> (P, M, k)
        return np.einsum("np,nk,nm->pmk", ch, c, tp, optimize=True)

    def synthesize(self, coeffs, ensemble: BrownianEnsemble) -> AdaptedProcess:
        c = np.array(coeffs, dtype=np.float64)
        return AdaptedProcess.from_evaluator(lambda ens: self.synthesize_values(c, ens), ensemble)


def project(u: AdaptedProcess, basis: ProjectionBasis) -> tuple[np.ndarray, AdaptedProcess]:
    """Orthogonal projection p_d: coefficients <u, s_i> and sum_i coeff_i s_i."""
    coeffs = encode(u, basis)
    return coeffs, basis.synthesize(coeffs, u.ensemble)


def encode(u: AdaptedProcess, basis: ProjectionBasis) -> np.ndarray:
    """The operator encoder: the vector of inner products (E int <u_t, s^(i)_t> dt)_i."""
    return basis.coefficients(u.values, u.ensemble)


def to_columnar(process: AdaptedProcess, path, label: str | None = None) -> None:
    """Write a process as CSV rows (scenario, step, component, value)."""
    write_columnar(process.values, path, label)


def write_columnar(values: np.ndarray, path, label=None) -> None:
    """Columnar CSV for any (P, steps, k) array, e.g. state paths with M + 1 steps."""
    values = np.asarray(values)
    P, M, k = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["scenario", "step", "component", "value"]
        if label is not None:
            header = ["label"] + header
        w.writerow(header)
        for p in range(P):
            for m in range(M):
                for c in range(k):
                    row = [p, m, c, repr(float(values[p, m, c]))]
                    w.writerow([label] + row if label is not None else row)


def read_columnar(path) -> np.ndarray:
    """Inverse of :func:`to_columnar` (ignores an optional label column)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 0, 0))
    P = max(int(r["scenario"]) for r in rows) + 1
    M = max(int(r["step"]) for r in rows) + 1
    k = max(int(r["component"]) for r in rows) + 1
    out = np.zeros((P, M, k))
    for r in rows:
        out[int(r["scenario"]), int(r["step"]), int(r["component"])] = float(r["value"])
    return out
