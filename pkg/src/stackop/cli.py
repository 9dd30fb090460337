"""Command-line runner: ``stackop <command> --config run.yaml``.

Exit codes: 0 pass, 1 numerical failure (or refusal), 2 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("stackop")


def _cap_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# --- wiring -----------------------------------------------------------------------------


def _horizon(cfg):
    from stackop.process import HorizonConfig

    h = cfg["horizon"]
    return HorizonConfig(T=float(h["T"]), M=int(h["M"]), d=int(h["d"]))


def _ensemble(cfg, P=None, salt=0):
    from stackop.process import BrownianEnsemble

    e = cfg["ensemble"]
    return BrownianEnsemble(_horizon(cfg), P or e["P"], seed=e["seed"] + salt)


def _game(cfg):
    from stackop import game as gm

    params = dict(cfg["game"].get("params") or {})
    kappa = params.pop("kappa", "unset")
    spec = gm.make_game(cfg["game"]["name"], **params)
    if kappa != "unset":
        spec = dataclasses.replace(spec, kappa=kappa)
    return spec


def _compact_set(cfg):
    from stackop import compact_sets as cs

    c = cfg["compact_set"]
    if c["variant"] == "holder":
        return cs.HolderDeterministic(alpha=c["alpha"], bound=c["bound"], knots=c["knots"])
    if c["variant"] == "lipschitz":
        return cs.LipschitzConditioned(lipschitz=c["lipschitz"], cap=c["cap"])
    return cs.ExpEllipsoid(C=c["C"], r=c["r"], n_terms=c["n_terms"])


def _solve_cfg(cfg, d1=None):
    from stackop.best_response import ResponseSolveConfig

    s = cfg["solver"]
    return ResponseSolveConfig(
        d1_basis=d1 or cfg["basis"]["d1"],
        max_iters=s["max_iters"],
        step_rule=s["step_rule"],
        step_size=s["step_size"],
        grad_tol=s["grad_tol"],
        restarts=s["restarts"],
    )


def _train_cfg(cfg):
    from stackop.training import TrainConfig

    t = cfg["training"]
    keys = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in t.items() if k in keys})


def _operator(cfg, k_in=1, k_out=1):
    from stackop.neural_operator import AttentionalNO

    o = cfg["operator"]
    return AttentionalNO.build(
        _horizon(cfg), cfg["basis"]["d_enc"], o["N"], o["Q"], o["J"], o["W"], o["activation"], o["seed"], k_in, k_out
    )


def _outdir(cfg) -> Path:
    out = Path(cfg["outputs"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


# --- commands -----------------------------------------------------------------------------


def cmd_basis_check(cfg) -> int:
    from stackop.process import ProjectionBasis, check_adapted
    from stackop.basis import evaluate_basis

    ens = _ensemble(cfg)
    basis = ProjectionBasis.first(cfg["basis"]["n_check"], ens.cfg)
    G, se = basis.gram(ens)
    tol = cfg["basis"]["sigma_tol"]
    floor = cfg["basis"]["floor"]
    rows, worst = [], 0.0
    n = len(basis)
    import numpy as np

    eye = np.eye(n)
    dev = np.abs(G - eye)
    ok_mat = dev <= tol * se + floor
    for i in range(n):
        for j in range(n):
            rows.append((i, j, float(G[i, j]), float(se[i, j]), int(ok_mat[i, j])))
            if se[i, j] > 0:
                worst = max(worst, float(dev[i, j] / se[i, j]))
    _write_rows(_outdir(cfg) / "gram.csv", ["i", "j", "value", "se", "pass"], rows)
    # adaptedness belongs to the evaluator, so a bounded ensemble on the same grid is enough
    probe = ens if ens.n_paths <= 4096 else _ensemble(cfg, P=4096)
    adapted = [check_adapted(evaluate_basis(e, probe)) for e in basis.elements]
    _write_rows(_outdir(cfg) / "adapted.csv", ["rank", "adapted"], [(e.linear_rank, int(a)) for e, a in zip(basis.elements, adapted)])
    n_bad = int((~ok_mat).sum())
    max_se = float(se.max())
    print(f"basis-check: {n}x{n} Gram on P={ens.n_paths}, M={ens.cfg.M}; max |G - I| = {dev.max():.3e}; worst deviation {worst:.2f} sigma; {n_bad} entries outside {tol} sigma; largest sigma {max_se:.3e}; adapted {sum(adapted)}/{n}")
    if n_bad or not all(adapted):
        print(f"basis-check FAILED: {n_bad} entries exceed {tol} standard errors (largest {worst:.2f} sigma)", file=sys.stderr)
        return EXIT_FAIL
    if max_se > cfg["basis"]["max_se"]:
        print(
            f"basis-check FAILED: ensemble too small to resolve orthonormality, largest standard error {max_se:.3e} "
            f"> basis.max_se = {cfg['basis']['max_se']:.3e} (P = {ens.n_paths})",
            file=sys.stderr,
        )
        return EXIT_FAIL
    return EXIT_OK


def cmd_best_response(cfg) -> int:
    from stackop import best_response as br
    from stackop import compact_sets as cs

    spec = _game(cfg)
    if spec.kappa is None:
        print(
            f"best-response refused: game {spec.name!r} has no strong-convexity modulus; the best-response map "
            "need not admit a Hölder (or even continuous) selection, so nothing is certified",
            file=sys.stderr,
        )
        return EXIT_FAIL
    ens = _ensemble(cfg)
    b = cfg["best_response"]
    pairs = cs.perturbation_pairs(_compact_set(cfg), b["pairs"], ens, b["seed"], b["scale_min"], b["scale_max"])
    table = br.holder_diagnostic(spec, pairs, ens, _solve_cfg(cfg), extra_tol=b["extra_tol"])
    out = _outdir(cfg)
    table.to_csv(out / "certificate.csv")
    rows = []
    for i, (r, rt) in enumerate(table.responses):
        rows.append((i, "u0", r.J1_value, r.grad_norm, r.iterations))
        rows.append((i, "u0_tilde", rt.J1_value, rt.grad_norm, rt.iterations))
    _write_rows(out / "response.csv", ["pair_id", "control", "J1", "grad_norm", "iterations"], rows)
    slope_ok = table.slope is None or table.slope >= b["min_slope"]
    worst = min(r.slack for r in table.rows)
    print(f"best-response: {len(table.rows)} pairs, min slack {worst:.3e}, C_hat {table.C_hat:.3e}, log-log slope {table.slope}")
    if not (table.passed and slope_ok):
        print("best-response FAILED: a slack or Hölder check is violated", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(cfg) -> int:
    import numpy as np

    from stackop import compact_sets as cs
    from stackop import config as cf
    from stackop import training as tr
    from stackop.neural_operator import AttentionalNO
    from stackop.process import norm

    spec = _game(cfg)
    tcfg = _train_cfg(cfg)
    if tcfg.mode == "unsupervised" and spec.kappa is None:
        print(f"train refused: unsupervised training needs a convexity modulus, game {spec.name!r} has none", file=sys.stderr)
        return EXIT_FAIL
    ens = _ensemble(cfg)
    out = _outdir(cfg)
    cf.dump(cfg, out / "config.yaml")
    ckpt = out / "checkpoint.txt"
    resume = None
    if cfg["training"]["resume"] and ckpt.exists():
        no, resume = AttentionalNO.load(ckpt, ens.cfg)
    else:
        no = _operator(cfg, spec.d0, spec.d1)
    K0 = _compact_set(cfg)
    if tcfg.mode == "supervised":
        t = cfg["training"]
        train = cs.sample(K0, t["n_train"], ens, seed=tcfg.seed + 101)
        held = cs.sample(K0, tcfg.eval_controls, ens, seed=tcfg.seed + 202)
        scfg = _solve_cfg(cfg)
        targets = tr.solve_targets(spec, train, ens, scfg)
        held_t = tr.solve_targets(spec, held, ens, scfg)
        res = tr.train_supervised(no, spec, train, tcfg, ens, heldout=held, targets=targets, heldout_targets=held_t, resume=resume)
        scale = max(norm(u) for u in held_t)
        threshold = t["sup_error_rel"] * scale
        tr.write_loss_csv(res.history, out / "loss.csv")
        tr.save_checkpoint(res, ckpt, header=f"game={spec.name}")
        final = res.final_sup_error
        print(f"train: {len(res.history)} epochs, final loss {res.history[-1][1]:.3e}, sup error {final:.3e} (threshold {threshold:.3e})")
        return EXIT_OK if final <= threshold else EXIT_FAIL
    if not isinstance(K0, cs.ExpEllipsoid):
        raise _ConfigProblem("unsupervised training needs compact_set.variant = exp_ellipsoid (a coefficient box)")
    box = cs.CoefficientBox.from_ellipsoid(K0, K0.n_terms)
    res = tr.train_unsupervised(no, spec, box, tcfg, ens, leader_init=box.upper, resume=resume)
    tr.write_loss_csv(res.history, out / "loss.csv")
    tr.save_checkpoint(res, ckpt, header=f"game={spec.name}")
    cert = _certify(cfg, no, spec, ens, res.leader_coeffs)
    cert.write(out)
    print(f"train: {len(res.history)} epochs, final objective {res.history[-1][1]:.3e}, leader |beta| = {np.linalg.norm(res.leader_coeffs):.3e}, eps = {cert.eps:.3e}")
    return EXIT_OK


def _certify(cfg, no, spec, ens, leader_coeffs):
    from stackop import compact_sets as cs
    from stackop import training as tr
    from stackop.process import ProjectionBasis

    c = cfg["certify"]
    K0 = _compact_set(cfg)
    probes = cs.sample(K0, c["probes"], ens, seed=c["seed"])
    lb = ProjectionBasis.first(len(leader_coeffs) // spec.d0, ens.cfg, k=spec.d0)
    leader = lb.synthesize(leader_coeffs, ens)
    return tr.certify(no, spec, [leader, *probes], [leader, *probes], ens, leader=leader, leader_coeffs=leader_coeffs)


class _ConfigProblem(Exception):
    pass


def cmd_certify(cfg) -> int:
    import numpy as np

    from stackop import compact_sets as cs
    from stackop import training as tr
    from stackop.neural_operator import AttentionalNO

    spec = _game(cfg)
    ens = _ensemble(cfg)
    out = _outdir(cfg)
    ckpt = Path(cfg["certify"]["checkpoint"] or out / "checkpoint.txt")
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    no, st = AttentionalNO.load(ckpt, ens.cfg)
    leader = st.get("leader.coeffs")
    if leader is None:
        leader = np.zeros(cfg["compact_set"]["n_terms"] * spec.d0)
    leader = np.asarray(leader).reshape(-1)
    cert = _certify(cfg, no, spec, ens, leader)
    cert.write(out)
    K0 = _compact_set(cfg)
    samples = cs.sample(K0, cfg["certify"]["probes"], ens, seed=cfg["certify"]["seed"] + 1)
    gaps = tr.objective_gap_scan(no, spec, samples, ens, len(leader) // spec.d0, _solve_cfg(cfg))
    gaps.to_csv(out / "gaps.csv")
    c = cfg["certify"]
    print(f"certify: eps = {cert.eps:.3e} (eps0 {cert.eps0:.3e}, eps1 {cert.eps1:.3e}; a lower bound from finite probes), max objective gap {gaps.max_gap:.3e}")
    ok = cert.eps <= c["threshold"] and gaps.max_gap <= c["gap_threshold"]
    return EXIT_OK if ok else EXIT_FAIL


def cmd_counterexample(cfg) -> int:
    from stackop import game as gm

    c = cfg["counterexample"]
    rows, ok = [], True
    for u0 in c["grid"]:
        v = gm.counterexample_value(float(u0))
        ve = gm.counterexample_value_grid(float(u0), c["G"])
        expected = -1.0 if u0 == 0 else 0.0
        ok &= v == expected and ve == v
        rows.append((float(u0), v, ve))
    _write_rows(_outdir(cfg) / "table.csv", ["u0", "value", "value_enumerated"], rows)
    for u0, v, _ in rows:
        print(f"{u0!r} {v!r}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sim(cfg) -> int:
    import numpy as np

    from stackop import best_response as br
    from stackop import compact_sets as cs
    from stackop import game as gm
    from stackop.process import AdaptedProcess, to_columnar, write_columnar

    spec = _game(cfg)
    ens = _ensemble(cfg)
    s = cfg["sim"]
    u0 = AdaptedProcess.zeros(ens, spec.d0) if s["leader"] == "zero" else cs.sample(_compact_set(cfg), 1, ens, s["seed"])[0]
    if s["follower"] == "zero":
        u1 = AdaptedProcess.zeros(ens, spec.d1)
    else:
        u1 = br.solve(spec, u0, _solve_cfg(cfg), ens).process
    path = gm.simulate(spec, u0, u1, ens)
    out = _outdir(cfg)
    write_columnar(path.values, out / "paths.csv")
    to_columnar(u0, out / "leader.csv")
    to_columnar(u1, out / "follower.csv")
    J0, J1 = gm.costs(spec, u0, u1, ens)
    _write_rows(out / "costs.csv", ["player", "cost"], [(0, J0), (1, J1)])
    print(f"sim: {ens.n_paths} scenarios x {ens.cfg.M} steps; J0 = {J0:.6e}, J1 = {J1:.6e}; mean X_T = {float(np.mean(path.values[:, -1])):.6e}")
    return EXIT_OK


COMMANDS = {
    "basis-check": cmd_basis_check,
    "best-response": cmd_best_response,
    "train": cmd_train,
    "certify": cmd_certify,
    "counterexample": cmd_counterexample,
    "sim": cmd_sim,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stackop", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", default=None, help="YAML run configuration (defaults apply if omitted)")
        p.add_argument("--out", default=None, help="override outputs.directory")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    _cap_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    from stackop import config as cf
    from stackop.errors import ConfigError, DomainError, StackopError

    try:
        cfg = cf.load(args.config) if args.config else cf.validate({})
        if args.out:
            cfg["outputs"]["directory"] = args.out
        if args.command != "counterexample":
            _game(cfg)
    except (ConfigError, DomainError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except (ConfigError, _ConfigProblem) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StackopError as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ArithmeticError, ValueError) as exc:
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
