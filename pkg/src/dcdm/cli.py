"""Command-line entry point: ``dcdm {gen-dataset,train,bench,simulate}``.

Every command accepts ``--config FILE`` (flat ``key=value`` lines, ``#``
comments); explicit flags override file entries, and the effective
configuration is written next to the outputs. All randomness derives from
``--seed`` through named substreams.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fluid, krylov, model, spectral
from .grid import DomainFormatError, VoxelDomain, assemble_poisson, load_domain

log = logging.getLogger("dcdm")

EXIT_USAGE = 2
EXIT_NUMERIC = 3

NUMERIC_ERRORS = (krylov.KrylovError, spectral.NoPositiveSpectrum, model.CollapsedOutput, ArithmeticError)
INPUT_ERRORS = (
    OSError,
    ValueError,
    DomainFormatError,
    spectral.DatasetFormatError,
    model.WeightFormatError,
    model.ShapeError,
)


REQUIRED = {"gen-dataset": ("out",), "train": ("dataset", "out"), "bench": ("out",), "simulate": ("out",)}


class UsageError(Exception):
    pass


def substream(seed: int, purpose: str) -> int:
    """64-bit seed for one named use of randomness."""
    return (int(seed) ^ zlib.crc32(purpose.encode())) & 0xFFFF_FFFF_FFFF_FFFF


# -- config handling -------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _effective(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Defaults < config file < flags, with config strings converted by each option's type."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    cfg = {dest: a.default for dest, a in actions.items()}
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            if k not in actions:
                raise UsageError(f"unknown config key {k!r}")
            conv = actions[k].type or str
            try:
                cfg[k] = conv(v)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for {k}: {v!r}") from exc
    for k, v in vars(args).items():
        if k in actions and v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED.get(parser.prog.split()[-1], ()) if cfg[k] is None]
    if missing:
        raise UsageError("missing required settings: " + ", ".join(missing))
    return cfg


def write_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in sorted(cfg.items()) if v is not None))


# -- shared helpers --------------------------------------------------------------------


def even_grid(text: str) -> int:
    n = int(text)
    if n < 2 or n % 2:
        raise argparse.ArgumentTypeError(f"grid size must be even and >= 2 (got {n})")
    return n


def make_domain(spec: str, n: int) -> VoxelDomain:
    base = VoxelDomain.full(n)
    if spec == "full":
        return base
    if spec == "sphere":
        ob = fluid.Sphere((0.5, 0.5, 0.5), 0.2)
    elif spec == "box":
        ob = fluid.RotatingBox((0.5, 0.5, 0.5), (0.2, 0.2, 0.2), 0.0)
    elif spec.startswith("mask:"):
        d = load_domain(spec[5:])
        if d.dims != base.dims:
            raise UsageError(f"mask dims {d.dims} do not match grid {n}")
        return d
    else:
        raise UsageError(f"unknown domain {spec!r}")
    return fluid.update_obstacle(base, 0.0, fluid.SimConfig(n=n, frames=0, obstacle=ob))[0]


def project_to_range(v: np.ndarray, domain: VoxelDomain) -> np.ndarray:
    """Zero boundary cells and remove the mean of every connected fluid region."""
    out = np.where(domain.fluid.ravel(), v, 0.0)
    labels, count = ndimage.label(domain.fluid)
    flat = labels.ravel()
    for k in range(1, count + 1):
        sel = flat == k
        out[sel] -= out[sel].mean()
    return out


def _solver_table(names, cfg: krylov.SolverConfig, A, domain, net, seed):
    solvers = {}
    for name in names:
        if name == "cg":
            solvers[name] = lambda b: krylov.cg(A, b, cfg=cfg)
        elif name == "icpcg":
            L = krylov.ic0_factor(A)
            solvers[name] = lambda b, L=L: krylov.pcg(A, b, None, L, cfg)
        elif name == "dpcg":
            W = spectral.deflation_vectors(A, domain.fluid, 16, substream(seed, "deflation"))
            L = krylov.ic0_factor(A)
            solvers[name] = lambda b, W=W, L=L: krylov.deflated_pcg(A, b, W, cfg, L=L)
        elif name == "dcdm" or name.startswith("dcdm-w"):
            if net is None:
                raise UsageError(f"solver {name} needs --model")
            window = None if name == "dcdm" else int(name[6:])
            c = krylov.SolverConfig(cfg.rel_tol, cfg.max_iter, window)
            orc = model.as_oracle(net, domain)
            solvers[name] = lambda b, c=c, orc=orc: krylov.dcdm(A, b, np.zeros(A.n), orc, c)
        else:
            raise UsageError(f"unknown solver {name!r}")
    return solvers


# -- commands --------------------------------------------------------------------------


def cmd_gen_dataset(cfg: dict) -> int:
    n = cfg["grid"]
    domain = make_domain(cfg["domain"], n)
    A = assemble_poisson(domain)
    m = cfg["m"] or spectral.default_lanczos_steps(domain.n_fluid)
    theta = cfg["theta"] if cfg["theta"] is not None else spectral.default_theta(m)
    lseed, sseed = substream(cfg["seed"], "lanczos"), substream(cfg["seed"], "sample")
    log.info("lanczos: m=%d seed=%d", m, lseed)
    try:
        lr = spectral.lanczos(A, m, lseed, fluid=domain.fluid, checkpoint=cfg["checkpoint"])
    except spectral.EarlyBreakdown as exc:
        log.warning("%s; using the %d-step basis", exc, exc.steps)
        lr = exc.result
    basis = spectral.ritz_vectors(lr)
    log.info("sampling: count=%d theta=%s seed=%d", cfg["count"], theta, sseed)
    ds = spectral.sample_training_vectors(basis, cfg["count"], theta, sseed, fluid=domain.fluid)
    ds.meta.update(dims=domain.dims, domain=cfg["domain"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    spectral.save_dataset(ds, out)
    write_config(cfg, out.with_name(out.name + ".config.txt"))
    print(f"wrote {len(ds)} vectors ({n}^3, m={lr.m}) to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    ds = spectral.load_dataset(cfg["dataset"])
    dims = ds.meta.get("dims")
    if not isinstance(dims, tuple) or len(dims) != 3:
        raise UsageError("dataset has no dims metadata")
    domain = make_domain(str(ds.meta.get("domain", "full")), dims[0]) if len(set(dims)) == 1 else VoxelDomain.full(*dims)
    net = model.DirectionNet(max(dims)).init_weights(substream(cfg["seed"], "init"))
    tc = model.TrainConfig(
        learning_rate=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=substream(cfg["seed"], "train")
    )
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_csv = Path(cfg["loss_csv"]) if cfg["loss_csv"] else out.with_suffix(".loss.csv")

    def report(s):
        log.info("epoch %d: train %.5f val %.5f", s.epoch, s.train_loss, s.val_loss)

    net, hist = model.train(net, ds, domain, tc, dims=dims, on_epoch=report)
    model.save_weights(net, out)
    with open(loss_csv, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_loss", "val_loss", "collapsed"])
        wr.writerows((s.epoch, repr(s.train_loss), repr(s.val_loss), s.collapsed) for s in hist)
    write_config(cfg, out.with_name(out.name + ".config.txt"))
    if cfg["epochs"] > 0 and not hist:
        print("training stopped before completing an epoch", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote weights to {out} ({len(hist)} epochs)")
    return 0


def _bench_rhs(cfg, domain, A):
    src = cfg["rhs"]
    count = cfg["count"]
    if src == "random":
        rng = np.random.default_rng(substream(cfg["seed"], "rhs"))
        return domain, [project_to_range(rng.standard_normal(domain.n), domain) for _ in range(count)]
    if src.startswith("dataset:"):
        ds = spectral.load_dataset(src[8:])
        if ds.vectors.shape[1] != domain.n:
            raise UsageError("dataset vectors do not match the grid")
        return domain, [project_to_range(v, domain) for v in ds.vectors[:count]]
    if src == "sim":
        sc = fluid.SimConfig(n=cfg["grid"], frames=count, obstacle=fluid.Sphere((0.5, 0.5, 0.5), 0.2))
        g = fluid.initial_grid(sc)
        solver = fluid.make_solver("icpcg", sc.solver_cfg)
        bs = []
        for f in range(count):
            pre = fluid.pre_projection(g, f * sc.dt, sc)
            fluid.set_boundary_velocities(pre, sc)
            bs.append(fluid.build_rhs(pre))
            g, _ = fluid.pressure_project(pre, solver, sc)
        return g.domain, bs
    raise UsageError(f"unknown rhs source {src!r}")


def cmd_bench(cfg: dict) -> int:
    names = [s.strip() for s in cfg["solvers"].split(",") if s.strip()]
    if not names:
        raise UsageError("solver list is empty")
    if not 0 < cfg["rel_tol"] < 1:
        raise UsageError("rel_tol must lie in (0, 1)")
    domain = make_domain(cfg["domain"], cfg["grid"])
    domain, rhs = _bench_rhs(cfg, domain, None)
    A = assemble_poisson(domain)
    net = model.load_weights(cfg["model"]) if cfg["model"] else None
    scfg = krylov.SolverConfig(cfg["rel_tol"], cfg["max_iter"])
    solvers = _solver_table(names, scfg, A, domain, net, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    rows = []
    for name, solve in solvers.items():
        for i, b in enumerate(rhs):
            t0 = time.perf_counter()
            rep = solve(b)
            dt = time.perf_counter() - t0
            rows.append((name, i, rep.iterations, dt, rep.converged))
            rep.to_csv(out / f"history_{name}_{i:03d}.csv")
    with open(out / "bench.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["solver", "rhs", "iterations", "seconds", "converged"])
        wr.writerows((n, i, it, f"{t:.6f}", int(c)) for n, i, it, t, c in rows)
    print(f"{'solver':<10} {'n_r':>8} {'t_r [s]':>10} {'converged':>10}")
    for name in solvers:
        mine = [r for r in rows if r[0] == name]
        its = np.mean([r[2] for r in mine])
        ts = np.mean([r[3] for r in mine])
        ok = sum(r[4] for r in mine)
        print(f"{name:<10} {its:>8.1f} {ts:>10.4f} {ok:>6d}/{len(mine)}")
    return 0


def _obstacle(spec: str, omega: float):
    if spec == "none":
        return None
    if spec == "sphere":
        return fluid.Sphere((0.5, 0.5, 0.5), 0.15)
    if spec == "box":
        return fluid.RotatingBox((0.5, 0.5, 0.5), (0.15, 0.15, 0.15), omega)
    if spec.startswith("mask:"):
        return fluid.StaticMask(spec[5:])
    raise UsageError(f"unknown obstacle {spec!r}")


def cmd_simulate(cfg: dict) -> int:
    out = Path(cfg["out"])
    sc = fluid.SimConfig(
        n=cfg["grid"],
        dt=cfg["dt"],
        frames=cfg["frames"],
        obstacle=_obstacle(cfg["obstacle"], cfg["omega"]),
        buoyancy=cfg["buoyancy"],
        solver=cfg["solver"],
        solver_cfg=krylov.SolverConfig(cfg["rel_tol"], cfg["max_iter"]),
        out_dir=str(out),
    )
    net = model.load_weights(cfg["model"]) if cfg["model"] else None
    if sc.solver == "dcdm" and net is None:
        raise UsageError("--solver dcdm needs --model")
    write_config(cfg, out / "config.txt")
    solver = fluid.make_solver(sc.solver, sc.solver_cfg, model=net, seed=substream(cfg["seed"], "deflation"))
    res = fluid.run(sc, solver=solver)
    its = [r.iterations for r in res.reports]
    if its:
        print(f"{len(its)} frames, mean {np.mean(its):.1f} iterations, worst reduction {max(res.divergence_reduction):.2e}")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcdm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value file; flags take precedence")
        sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-dataset", help="Lanczos/Ritz training vectors")
    common(g)
    g.add_argument("--grid", type=even_grid, default=16)
    g.add_argument("--domain", default="full", help="full | sphere | box | mask:FILE")
    g.add_argument("--m", type=int, default=None, help="Lanczos steps (default min(n_fluid/2, 1024))")
    g.add_argument("--theta", type=float, default=None, help="band extension (default m/20)")
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--checkpoint", default=None)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", help="train the direction network")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--loss-csv", default=None)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="compare solvers on identical systems")
    common(b)
    b.add_argument("--grid", type=even_grid, default=16)
    b.add_argument("--domain", default="full")
    b.add_argument("--solvers", default="cg,icpcg", help="comma list of cg, icpcg, dpcg, dcdm, dcdm-wN")
    b.add_argument("--rel-tol", type=float, default=1e-4)
    b.add_argument("--max-iter", type=int, default=10000)
    b.add_argument("--rhs", default="random", help="random | dataset:FILE | sim")
    b.add_argument("--count", type=int, default=5)
    b.add_argument("--model", default=None)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("simulate", help="smoke plume simulation")
    common(s)
    s.add_argument("--grid", type=even_grid, default=32)
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--dt", type=float, default=0.02)
    s.add_argument("--solver", choices=["cg", "icpcg", "dpcg", "dcdm"], default="cg")
    s.add_argument("--model", default=None)
    s.add_argument("--obstacle", default="sphere", help="none | sphere | box | mask:FILE")
    s.add_argument("--omega", type=float, default=1.0, help="box angular speed (rad/s)")
    s.add_argument("--buoyancy", type=float, default=1.0)
    s.add_argument("--rel-tol", type=float, default=1e-4)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)
    return p


def _subparser(parser, name):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    sp = _subparser(parser, args.command)
    try:
        cfg = _effective(args, sp)
        return args.func(cfg)
    except UsageError as exc:
        print(f"dcdm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"dcdm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        print(f"dcdm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
