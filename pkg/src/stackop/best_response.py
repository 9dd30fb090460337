"""Follower best responses over a truncated basis span, with strong-convexity
certificates and Hölder diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from stackop import autodiff as ad
from stackop import game as gm
from stackop.errors import ConvergenceError, RefusalError
from stackop.process import AdaptedProcess, BrownianEnsemble, ProjectionBasis, inner_product_samples


@dataclass
class ResponseSolveConfig:
    d1_basis: int = 8
    max_iters: int = 500
    step_rule: str = "backtracking"
    step_size: float = 0.5
    grad_tol: float = 1e-6
    restarts: int = 1
    armijo: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.d1_basis < 1:
            raise ValueError("d1_basis must be >= 1")
        if self.step_rule not in ("backtracking", "fixed"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class ResponseResult:
    coeffs: np.ndarray
    process: AdaptedProcess
    J1_value: float
    grad_norm: float
    iterations: int
    restart_spread: float = 0.0
    certificate: dict | None = None


@dataclass
class CertificateReport:
    lhs: float
    rhs: float
    slack: float
    mc_se: float
    solver_tol: float

    @property
    def tolerance(self) -> float:
        return 3.0 * self.mc_se + self.solver_tol

    @property
    def passed(self) -> bool:
        return self.slack >= -self.tolerance


def follower_basis(spec: gm.GameSpec, cfg: ResponseSolveConfig, ensemble: BrownianEnsemble) -> ProjectionBasis:
    return ProjectionBasis.first(cfg.d1_basis, ensemble.cfg, k=spec.d1)


def _synth_tensor(beta: ad.Tensor, basis: ProjectionBasis, ensemble: BrownianEnsemble) -> ad.Tensor:
    tp, ch = basis.factors(ensemble)
    b = ad.reshape(beta, (len(basis), basis.k))
    return ad.einsum("np,nk,nm->pmk", ch, b, tp)


def _objective(spec, u0, basis, ensemble):
    def value_and_grad(beta_np):
        beta = ad.parameter(beta_np)
        J = gm.cost_tensor(spec, 1, u0, _synth_tensor(beta, basis, ensemble), ensemble)
        J.backward()
        return J.item(), beta.grad.copy()

    def value(beta_np):
        with ad.no_grad():
            return gm.cost_tensor(spec, 1, u0, _synth_tensor(ad.Tensor(beta_np), basis, ensemble), ensemble).item()

    return value_and_grad, value


def _descend(value_and_grad, value, beta, cfg: ResponseSolveConfig):
    J, g = value_and_grad(beta)
    step = cfg.step_size
    for it in range(cfg.max_iters):
        gn = float(np.linalg.norm(g))
        if gn <= cfg.grad_tol:
            return beta, J, gn, it
        if cfg.step_rule == "fixed":
            beta = beta - cfg.step_size * g
        else:
            step = min(step * 2.0, 1e3)
            while True:
                trial = beta - step * g
                Jt = value(trial)
                if Jt <= J - cfg.armijo * step * gn * gn:
                    break
                step *= 0.5
                if step < 1e-14:
                    raise ConvergenceError("line search failed to find descent", beta, gn)
            beta = trial
        J, g = value_and_grad(beta)
    gn = float(np.linalg.norm(g))
    if gn <= cfg.grad_tol:
        return beta, J, gn, cfg.max_iters
    raise ConvergenceError(
        f"no convergence after {cfg.max_iters} iterations (|grad| = {gn:.3e} > {cfg.grad_tol:.1e})", beta, gn
    )


def solve(spec: gm.GameSpec, u0, cfg: ResponseSolveConfig, ensemble: BrownianEnsemble, basis: ProjectionBasis | None = None) -> ResponseResult:
    """Minimize beta -> J_1(u0, sum_i beta_i s_i) by gradient descent through the simulator."""
    if spec.kappa is None:
        raise RefusalError(
            f"game {spec.name!r} declares no strong-convexity modulus; the best response need not be unique "
            "or continuous, so no selection is certified"
        )
    basis = basis or follower_basis(spec, cfg, ensemble)
    value_and_grad, value = _objective(spec, u0, basis, ensemble)
    rng = np.random.default_rng(cfg.seed)
    sols = []
    for r in range(cfg.restarts):
        beta0 = np.zeros(basis.dim) if r == 0 else rng.normal(0.0, 1.0, basis.dim)
        sols.append(_descend(value_and_grad, value, beta0, cfg))
    best = min(sols, key=lambda s: s[1])
    spread = max(float(np.linalg.norm(s[0] - best[0])) for s in sols)
    beta, J, gn, its = best
    return ResponseResult(beta, basis.synthesize(beta, ensemble), J, gn, its, spread)


def enumerate_best_response(spec: gm.GameSpec, u0, candidates, ensemble: BrownianEnsemble) -> tuple[int, float]:
    """Argmin of J_1(u0, .) over a finite candidate list; ties go to the lowest index."""
    if not candidates:
        raise ValueError("candidate list is empty")
    values = [gm.cost(spec, 1, u0, c, ensemble) for c in candidates]
    idx = int(np.argmin(values))
    return idx, float(values[idx])


def convexity_certificate(
    spec: gm.GameSpec,
    u0,
    u0_tilde,
    U_u0: ResponseResult,
    U_u0_tilde: ResponseResult,
    ensemble: BrownianEnsemble,
    extra_tol: float = 1e-4,
) -> CertificateReport:
    """Check (kappa/2) ||U(u0) - U(u0~)||^2 <= J_1(u0, U(u0~)) - J_1(u0, U(u0)).

    Uses paired per-scenario differences for the Monte-Carlo standard error and
    charges the first-order residual |grad| * |beta - beta~| to the solver.
    """
    if spec.kappa is None:
        raise RefusalError("certificate needs a declared convexity modulus")
    with ad.no_grad():
        a = gm.cost_samples(spec, 1, u0, U_u0_tilde.process, ensemble).data
        b = gm.cost_samples(spec, 1, u0, U_u0.process, ensemble).data
    diff = U_u0.process - U_u0_tilde.process
    sq = inner_product_samples(diff, diff)
    y = (a - b) - 0.5 * spec.kappa * sq
    lhs = 0.5 * spec.kappa * float(np.mean(sq))
    rhs = float(np.mean(a - b))
    se = float(np.std(y, ddof=1) / math.sqrt(len(y))) if len(y) > 1 else 0.0
    solver_tol = U_u0.grad_norm * float(np.linalg.norm(U_u0.coeffs - U_u0_tilde.coeffs)) + extra_tol
    return CertificateReport(lhs, rhs, rhs - lhs, se, solver_tol)


@dataclass
class HolderRow:
    pair_id: int
    du0_norm: float
    dU_norm: float
    bound: float
    lhs: float
    rhs: float
    slack: float
    passed: bool


@dataclass
class HolderTable:
    rows: list[HolderRow]
    C_hat: float
    slope: float | None = None
    responses: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "du0_norm", "dU_norm", "lhs", "rhs", "slack"])
            for r in self.rows:
                w.writerow([r.pair_id, repr(r.du0_norm), repr(r.dU_norm), repr(r.lhs), repr(r.rhs), repr(r.slack)])


def _as_process(u, ensemble):
    if isinstance(u, AdaptedProcess):
        return u
    return AdaptedProcess(np.asarray(u, dtype=np.float64), ensemble)


def holder_diagnostic(
    spec: gm.GameSpec, pairs, ensemble: BrownianEnsemble, cfg: ResponseSolveConfig | None = None, extra_tol: float = 1e-4
) -> HolderTable:
    """Tabulate ||du0|| against ||dU|| and check the 1/2-Hölder bound.

    The bound is ||dU|| <= (2 / sqrt(kappa)) (2 C ||du0||)^(1/2) with C the largest
    observed quotient |J_1(u0, v) - J_1(u0~, v)| / ||du0|| over v in {U(u0), U(u0~)}.
    """
    if spec.kappa is None:
        raise RefusalError("Hölder diagnostic needs a declared convexity modulus")
    cfg = cfg or ResponseSolveConfig()
    basis = follower_basis(spec, cfg, ensemble)
    solved = []
    C_hat = 0.0
    for u0, u0t in pairs:
        u0, u0t = _as_process(u0, ensemble), _as_process(u0t, ensemble)
        r, rt = solve(spec, u0, cfg, ensemble, basis), solve(spec, u0t, cfg, ensemble, basis)
        d0 = u0 - u0t
        du0 = math.sqrt(max(float(np.mean(inner_product_samples(d0, d0))), 0.0))
        if du0 > 0:
            for v in (r.process, rt.process):
                q = abs(gm.cost(spec, 1, u0, v, ensemble) - gm.cost(spec, 1, u0t, v, ensemble)) / du0
                C_hat = max(C_hat, q)
        solved.append((u0, u0t, r, rt, du0))
    rows = []
    for i, (u0, u0t, r, rt, du0) in enumerate(solved):
        dU = r.process - rt.process
        dU_norm = math.sqrt(max(float(np.mean(inner_product_samples(dU, dU))), 0.0))
        bound = 2.0 / math.sqrt(spec.kappa) * math.sqrt(2.0 * C_hat * du0)
        cert = convexity_certificate(spec, u0, u0t, r, rt, ensemble, extra_tol)
        ok = dU_norm <= bound + cert.tolerance and cert.passed
        rows.append(HolderRow(i, du0, dU_norm, bound, cert.lhs, cert.rhs, cert.slack, ok))
    table = HolderTable(rows, C_hat, responses=[(s[2], s[3]) for s in solved])
    xs = np.array([r.du0_norm for r in rows])
    ys = np.array([r.dU_norm for r in rows])
    keep = (xs > 0) & (ys > 0)
    if keep.sum() >= 2 and np.ptp(np.log(xs[keep])) > 0:
        table.slope = float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])
    return table
