"""Operator training (supervised on solved best responses, unsupervised on the
leader objective) and finite-probe equilibrium certificates."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from stackop import autodiff as ad
from stackop import best_response as br
from stackop import game as gm
from stackop.compact_sets import CoefficientBox
from stackop.errors import ConvergenceError, RefusalError, TrainingDivergedError
from stackop.neural_operator import AttentionalNO
from stackop.process import AdaptedProcess, BrownianEnsemble, ProjectionBasis, inner_product_samples, project

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "supervised"
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-2
    lr_final: float | None = None
    momentum: float = 0.9
    optimizer: str = "momentum"
    seed: int = 0
    eval_controls: int = 16
    param_radius: float = 1e3
    # unsupervised only
    leader_lr: float = 0.1
    leader_steps: int = 1
    leader_weight: float = 0.0
    divergence: float = 1e6

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("epochs", "batch_size", "eval_controls", "leader_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "param_radius", "leader_lr", "divergence"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ValueError("lr_final must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.leader_weight < 0:
            raise ValueError("leader_weight must be nonnegative")


class Momentum:
    """Heavy-ball gradient descent, followed by projection onto a parameter-norm ball."""

    def __init__(self, params: list[ad.Tensor], lr: float, momentum: float, radius: float = math.inf):
        self.params = params
        self.lr, self.momentum, self.radius = lr, momentum, radius
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v -= self.lr * g
            p.data += v
        self._project()

    def _project(self) -> None:
        if math.isfinite(self.radius):
            nrm = math.sqrt(sum(float(np.sum(p.data**2)) for p in self.params))
            if nrm > self.radius:
                for p in self.params:
                    p.data *= self.radius / nrm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {f"opt.v{i}": v for i, v in enumerate(self.velocity)}

    def load_state(self, st: dict) -> None:
        for i in range(len(self.velocity)):
            if f"opt.v{i}" in st:
                self.velocity[i] = np.array(st[f"opt.v{i}"], dtype=np.float64).reshape(self.velocity[i].shape)


class Adam(Momentum):
    """Bias-corrected Adam (first-moment decay = momentum), same ball projection.

    Per-coordinate step normalization matters when encoder coefficients span
    orders of magnitude, as they do on exponentially decaying sets.
    """

    def __init__(self, params, lr, momentum, radius=math.inf, beta2=0.999, eps=1e-8):
        super().__init__(params, lr, momentum, radius)
        self.beta2, self.eps, self.t = beta2, eps, 0
        self.second = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.momentum**self.t, 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.velocity, self.second):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.momentum
            m += (1.0 - self.momentum) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self._project()

    def state(self) -> dict[str, np.ndarray]:
        st = super().state()
        st.update({f"opt.s{i}": v for i, v in enumerate(self.second)})
        st["opt.t"] = np.asarray(self.t, dtype=np.float64)
        return st

    def load_state(self, st: dict) -> None:
        super().load_state(st)
        for i in range(len(self.second)):
            if f"opt.s{i}" in st:
                self.second[i] = np.array(st[f"opt.s{i}"], dtype=np.float64).reshape(self.second[i].shape)
        self.t = int(np.asarray(st.get("opt.t", self.t)).reshape(-1)[0])


def make_optimizer(params: list[ad.Tensor], cfg: TrainConfig) -> Momentum:
    cls = Adam if cfg.optimizer == "adam" else Momentum
    return cls(params, cfg.lr, cfg.momentum, cfg.param_radius)


@dataclass
class TrainResult:
    operator: AttentionalNO
    history: list[tuple[int, float, float]]
    optimizer: Momentum | None = field(default=None, repr=False)
    leader_coeffs: np.ndarray | None = None

    @property
    def final_sup_error(self) -> float:
        return self.history[-1][2] if self.history else math.nan


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Geometric interpolation from lr at epoch 1 to lr_final at the last epoch."""
    if cfg.lr_final is None or cfg.epochs == 1:
        return cfg.lr
    frac = (epoch - 1) / (cfg.epochs - 1)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "sup_error"])
        for e, loss, sup in history:
            w.writerow([e, repr(float(loss)), repr(float(sup))])


def save_checkpoint(result: TrainResult, path, header: str = "") -> None:
    extra = {"train.epoch": np.asarray(result.history[-1][0] if result.history else 0, dtype=np.float64)}
    if result.optimizer is not None:
        extra.update(result.optimizer.state())
    if result.leader_coeffs is not None:
        extra["leader.coeffs"] = result.leader_coeffs
    if result.history:
        extra["train.history"] = np.asarray(result.history, dtype=np.float64)
    result.operator.save(path, extra=extra, header=header)


# --- supervised ----------------------------------------------------------------------


def solve_targets(game: gm.GameSpec, controls, ensemble: BrownianEnsemble, solve_cfg: br.ResponseSolveConfig) -> list[AdaptedProcess]:
    basis = br.follower_basis(game, solve_cfg, ensemble)
    out = []
    for i, u0 in enumerate(controls):
        try:
            out.append(br.solve(game, u0, solve_cfg, ensemble, basis).process)
        except ConvergenceError as exc:
            raise ConvergenceError(f"best response for control {i} failed: {exc}", exc.last_iterate, exc.grad_norm) from exc
    return out


@dataclass
class _Supervised:
    X: np.ndarray  # encodings (n, d_enc)
    b: np.ndarray  # <value directions, target> (n, NQ)
    t: np.ndarray  # ||target||^2 (n,)


def _value_gram(no: AttentionalNO, ensemble: BrownianEnsemble) -> np.ndarray:
    G, _ = no.value_basis.gram(ensemble)
    G = np.kron(G, np.eye(no.value_basis.k))
    nq = no.N * no.Q
    return G[:nq, :nq]


def _prepare(no: AttentionalNO, controls, targets, ensemble) -> _Supervised:
    nq = no.N * no.Q
    X = np.stack([no.encode(u) for u in controls])
    b = np.stack([no.value_basis.coefficients(t.values, ensemble)[:nq] for t in targets])
    tt = np.array([float(np.mean(inner_product_samples(t, t))) for t in targets])
    return _Supervised(X, b, tt)


def _sq_errors(no, data: _Supervised, G, idx=None) -> ad.Tensor:
    """Per-control Monte-Carlo squared distances gamma'G gamma - 2 gamma'b + |t|^2."""
    X, b, t = (data.X, data.b, data.t) if idx is None else (data.X[idx], data.b[idx], data.t[idx])
    gamma = no.coefficients_tensor(X)
    quad = ad.tsum(ad.matmul(gamma, G) * gamma, axis=1)
    cross = ad.tsum(gamma * b, axis=1)
    return quad - 2.0 * cross + t


def sup_error(no: AttentionalNO, controls, targets, ensemble: BrownianEnsemble) -> float:
    """max over controls of ||U(u) - target(u)|| in the Monte-Carlo H^2_T norm."""
    data = _prepare(no, controls, targets, ensemble)
    with ad.no_grad():
        sq = _sq_errors(no, data, _value_gram(no, ensemble)).data
    return float(np.sqrt(np.max(np.maximum(sq, 0.0))))


def train_supervised(
    no: AttentionalNO,
    game: gm.GameSpec,
    controls,
    cfg: TrainConfig,
    ensemble: BrownianEnsemble,
    heldout=None,
    targets=None,
    heldout_targets=None,
    solve_cfg: br.ResponseSolveConfig | None = None,
    resume: dict | None = None,
) -> TrainResult:
    """Minimize the mean of ||U(u0) - U*(u0)||^2 over the controls by minibatch descent.

    Targets default to solved best responses; the loss CSV column sup_error is
    measured on the held-out controls after each epoch.
    """
    solve_cfg = solve_cfg or br.ResponseSolveConfig()
    if targets is None:
        targets = solve_targets(game, controls, ensemble, solve_cfg)
    heldout = list(heldout) if heldout is not None else list(controls)
    if heldout_targets is None:
        heldout_targets = targets if heldout == list(controls) else solve_targets(game, heldout, ensemble, solve_cfg)

    G = _value_gram(no, ensemble)
    train = _prepare(no, controls, targets, ensemble)
    held = _prepare(no, heldout, heldout_targets, ensemble)
    opt = make_optimizer(no.parameters(), cfg)
    history: list[tuple[int, float, float]] = []
    start = 0
    if resume is not None:
        opt.load_state(resume)
        start = int(resume.get("train.epoch", 0))
        if "train.history" in resume:
            history = [(int(r[0]), float(r[1]), float(r[2])) for r in np.atleast_2d(resume["train.history"])]
    n = len(train.t)
    for epoch in range(start + 1, cfg.epochs + 1):
        opt.lr = learning_rate(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            opt.zero_grad()
            loss = ad.mean(_sq_errors(no, train, G, idx))
            loss.backward()
            opt.step()
        with ad.no_grad():
            full = float(np.mean(_sq_errors(no, train, G).data))
            sup = float(np.sqrt(np.max(np.maximum(_sq_errors(no, held, G).data, 0.0))))
        if not math.isfinite(full) or full > cfg.divergence:
            raise TrainingDivergedError(f"supervised loss {full:.3e} at epoch {epoch}")
        history.append((epoch, full, sup))
    return TrainResult(no, history, opt)


# --- unsupervised ----------------------------------------------------------------------


_TILED: dict = {}


def _tiled(ensemble: BrownianEnsemble, B: int) -> BrownianEnsemble:
    """The ensemble repeated B times along the scenario axis (one block per control)."""
    key = (ensemble.key, ensemble.n_paths, ensemble.cfg, B)
    if key not in _TILED:
        if len(_TILED) > 8:
            _TILED.clear()
        inc = np.tile(ensemble.increments, (B, 1, 1))
        _TILED[key] = BrownianEnsemble(ensemble.cfg, B * ensemble.n_paths, seed=ensemble.seed, increments=inc, tag="tiled")
    return _TILED[key]


def _leader_values(basis: ProjectionBasis, beta, ensemble) -> ad.Tensor:
    """Leader control values (B, P, M, k) for coefficient rows beta (B, dim); on the tape."""
    tp, ch = basis.factors(ensemble)
    beta = ad.as_tensor(beta)
    b = ad.reshape(beta, (beta.shape[0], len(basis), basis.k))
    return ad.einsum("np,bnk,nm->bpmk", ch, b, tp)


def _encode_tensor(no: AttentionalNO, u: ad.Tensor, ensemble) -> ad.Tensor:
    """Differentiable encoder for values (B, P, M, k)."""
    tp, ch = no.encoder_basis.factors(ensemble)
    x = ad.einsum("bpmk,nm,np->bnk", u, tp, ch) * (ensemble.dt / ensemble.n_paths)
    return ad.reshape(x, (u.shape[0], no.encoder_basis.dim))


def _response_values(no: AttentionalNO, gamma: ad.Tensor, ensemble) -> ad.Tensor:
    """Operator output values (B, P, M, k) for output coefficients gamma (B, N Q)."""
    tp, ch = no.value_basis.factors(ensemble)
    k = no.value_basis.k
    B = gamma.shape[0]
    pad = no.value_basis.dim - no.N * no.Q
    if pad:
        gamma = ad.concatenate([gamma, ad.Tensor(np.zeros((B, pad)))], axis=1)
    g = ad.reshape(gamma, (B, len(no.value_basis), k))
    return ad.einsum("np,bnk,nm->bpmk", ch, g, tp)


def _batched_cost(game, player, u0: ad.Tensor, u1: ad.Tensor, ensemble) -> ad.Tensor:
    """Mean over the B controls of J_player, via one rollout on the tiled ensemble."""
    B, P, M = u0.shape[:3]
    ens = _tiled(ensemble, B)
    a = ad.reshape(u0, (B * P, M, u0.shape[3]))
    b = ad.reshape(u1, (B * P, M, u1.shape[3]))
    return gm.cost_tensor(game, player, a, b, ens)


def train_unsupervised(
    no: AttentionalNO,
    game: gm.GameSpec,
    box: CoefficientBox,
    cfg: TrainConfig,
    ensemble: BrownianEnsemble,
    leader_init=None,
    resume: dict | None = None,
) -> TrainResult:
    """Alternate follower-penalized operator updates with projected leader descent.

    Each epoch draws a batch of leader coefficients from the box, moves the
    operator downhill on their mean follower cost J_1(u0, U(u0)) (plus
    leader_weight times J_0 at the current leader), then takes leader_steps
    projected gradient steps on beta -> J_0(beta, U(beta)).
    """
    if game.kappa is None:
        raise RefusalError(f"game {game.name!r} has no convexity modulus; unsupervised training is not meaningful")
    lb = ProjectionBasis.first(box.dim // game.d0, ensemble.cfg, k=game.d0)
    if lb.dim != box.dim:
        raise ValueError(f"box dimension {box.dim} is not a multiple of the leader dimension {game.d0}")
    beta = box.project(np.zeros(box.dim) if leader_init is None else np.asarray(leader_init, dtype=np.float64))
    opt = make_optimizer(no.parameters(), cfg)
    history: list[tuple[int, float, float]] = []
    start = 0
    if resume is not None:
        opt.load_state(resume)
        start = int(resume.get("train.epoch", 0))
        if "leader.coeffs" in resume:
            beta = np.asarray(resume["leader.coeffs"], dtype=np.float64).reshape(-1)
        if "train.history" in resume:
            history = [(int(r[0]), float(r[1]), float(r[2])) for r in np.atleast_2d(resume["train.history"])]

    for epoch in range(start + 1, cfg.epochs + 1):
        opt.lr = learning_rate(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        batch = np.vstack([box.sample(cfg.batch_size, rng), beta[None, :]])
        opt.zero_grad()
        with ad.no_grad():
            u0 = _leader_values(lb, batch, ensemble)
            x = _encode_tensor(no, u0, ensemble)
        u0 = ad.Tensor(u0.data)
        x = ad.Tensor(x.data)
        u1 = _response_values(no, no.coefficients_tensor(x), ensemble)
        follower = _batched_cost(game, 1, u0, u1, ensemble)
        loss = follower
        if cfg.leader_weight > 0:
            lead = _batched_cost(game, 0, ad.getitem(u0, slice(-1, None)), ad.getitem(u1, slice(-1, None)), ensemble)
            loss = loss + cfg.leader_weight * lead
        loss.backward()
        opt.step()

        for _ in range(cfg.leader_steps):
            b = ad.parameter(beta[None, :])
            u0b = _leader_values(lb, b, ensemble)
            gam = no.coefficients_tensor(_encode_tensor(no, u0b, ensemble))
            J0 = _batched_cost(game, 0, u0b, _response_values(no, gam, ensemble), ensemble)
            J0.backward()
            beta = box.project(beta - cfg.leader_lr * b.grad.reshape(-1))
            for p in no.parameters():
                p.grad = None

        total = follower.item() + J0.item()
        if not math.isfinite(total) or total > cfg.divergence:
            raise TrainingDivergedError(f"unsupervised objective {total:.3e} at epoch {epoch}")
        history.append((epoch, total, math.nan))
    return TrainResult(no, history, opt, beta)


def leader_control(result: TrainResult, ensemble: BrownianEnsemble, d0: int = 1) -> AdaptedProcess:
    basis = ProjectionBasis.first(result.leader_coeffs.size // d0, ensemble.cfg, k=d0)
    return basis.synthesize(result.leader_coeffs, ensemble)


# --- certificates ------------------------------------------------------------------------


@dataclass
class EquilibriumCertificate:
    leader_coeffs: np.ndarray | None
    eps0: float
    eps1: float
    n_probe_u0: int
    n_probe_u1: int
    worst_follower: tuple[int, int] | None = None
    worst_leader: int | None = None
    follower_gaps: np.ndarray | None = field(default=None, repr=False)
    leader_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def eps(self) -> float:
        return max(self.eps0, self.eps1)

    def report(self) -> str:
        lines = [
            "equilibrium certificate (finite probing)",
            f"eps = {self.eps!r}",
            f"eps0 (leader gap) = {self.eps0!r}",
            f"eps1 (follower gap) = {self.eps1!r}",
            f"probes: {self.n_probe_u0} leader controls, {self.n_probe_u1} follower controls",
            "This is a LOWER bound on the true eps: only the listed probes were compared.",
        ]
        if self.worst_follower is not None:
            lines.append(f"worst follower pair (u0 index, u1 index) = {self.worst_follower}")
        if self.worst_leader is not None:
            lines.append(f"best probe leader control index = {self.worst_leader}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        import os

        with open(os.path.join(directory, "certificate.txt"), "w") as fh:
            fh.write(self.report())
        with open(os.path.join(directory, "certificate.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            w.writerow(["eps", repr(self.eps)])
            w.writerow(["eps0", repr(self.eps0)])
            w.writerow(["eps1", repr(self.eps1)])
            w.writerow(["n_probe_u0", self.n_probe_u0])
            w.writerow(["n_probe_u1", self.n_probe_u1])


def certify(
    no: AttentionalNO,
    game: gm.GameSpec,
    probe_u0,
    probe_u1,
    ensemble: BrownianEnsemble,
    leader: AdaptedProcess | None = None,
    leader_coeffs=None,
) -> EquilibriumCertificate:
    """Follower gap eps1 = max_{u0, u1} J_1(u0, U(u0)) - J_1(u0, u1), clipped at 0;
    leader gap eps0 = J_0(leader, U(leader)) - min over probes u0 of J_0(u0, U(u0)).

    The trained leader is always compared against itself, so eps0 >= 0.
    """
    probe_u0, probe_u1 = list(probe_u0), list(probe_u1)
    if not probe_u0 or not probe_u1:
        raise ValueError("probe sets must be nonempty")
    if leader is None:
        leader = probe_u0[0]
    responses = [no.apply(u, ensemble) for u in probe_u0]
    gaps = np.empty((len(probe_u0), len(probe_u1)))
    for i, (u0, r) in enumerate(zip(probe_u0, responses)):
        own = gm.cost(game, 1, u0, r, ensemble)
        for j, u1 in enumerate(probe_u1):
            gaps[i, j] = own - gm.cost(game, 1, u0, u1, ensemble)
    lead_vals = np.array([gm.cost(game, 0, u0, r, ensemble) for u0, r in zip(probe_u0, responses)])
    J0_leader = gm.cost(game, 0, leader, no.apply(leader, ensemble), ensemble)
    eps1 = max(0.0, float(gaps.max()))
    best = float(min(lead_vals.min(), J0_leader))
    eps0 = max(0.0, J0_leader - best)
    wf = tuple(int(v) for v in np.unravel_index(np.argmax(gaps), gaps.shape))
    return EquilibriumCertificate(
        None if leader_coeffs is None else np.asarray(leader_coeffs),
        eps0,
        eps1,
        len(probe_u0),
        len(probe_u1),
        wf,
        int(np.argmin(lead_vals)),
        gaps,
        lead_vals,
    )


@dataclass
class GapTable:
    rows: list[tuple[int, float, float, float]]

    @property
    def max_gap(self) -> float:
        return max(r[3] for r in self.rows) if self.rows else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "J0_best_response", "J0_operator", "gap"])
            for r in self.rows:
                w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])


def objective_gap_scan(
    no: AttentionalNO,
    game: gm.GameSpec,
    samples,
    ensemble: BrownianEnsemble,
    d: int,
    solve_cfg: br.ResponseSolveConfig | None = None,
) -> GapTable:
    """Per sample |J_0(u0, U*(u0)) - J_0(p_d u0, U(p_d u0))| with U* from the best-response solver."""
    solve_cfg = solve_cfg or br.ResponseSolveConfig()
    fb = br.follower_basis(game, solve_cfg, ensemble)
    lb = ProjectionBasis.first(d, ensemble.cfg, k=game.d0)
    rows = []
    for i, u0 in enumerate(samples):
        star = br.solve(game, u0, solve_cfg, ensemble, fb).process
        J_star = gm.cost(game, 0, u0, star, ensemble)
        _, pu = project(u0, lb)
        J_hat = gm.cost(game, 0, pu, no.apply(pu, ensemble), ensemble)
        rows.append((i, J_star, J_hat, abs(J_star - J_hat)))
    return GapTable(rows)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
