"""Command line entry point.

Exit codes: 0 success, 2 schema error, 3 invariant-budget violation,
4 search or horizon exhaustion.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, output_path, provenance, validate_config
from .engine import DEFAULT, ConservationError, FixedPointError, fixed_point_solve, gfp_run, nmp_run
from .equilibrium import ConvergenceError, pk_rate, pk_rate_in_system, stationary_state
from .measure import StateMeasure, core_rectangle
from .network import FlowStats, chaos_from_counts, empirical_projection, inflow_tests, init_network, network_step
from .service import SpecError, TypeBSpec, build_distribution
from .transience import SearchExhausted, TransienceCertificate, construct, verify_certificate

log = logging.getLogger("nmpqueue")

EXIT_OK, EXIT_SCHEMA, EXIT_BUDGET, EXIT_EXHAUSTED = 0, 2, 3, 4


def _header(cfg: ExperimentConfig | None) -> list[str]:
    prov = provenance(cfg)
    return [f"config_sha256={prov['config_sha256']}", f"version={prov['version']}"]


def _write_json(path: Path, obj: dict, cfg: ExperimentConfig | None) -> None:
    obj = dict(obj)
    obj["provenance"] = provenance(cfg)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, columns: list[str], rows: Sequence[Sequence], cfg: ExperimentConfig | None) -> None:
    with path.open("w", newline="") as fh:
        for h in _header(cfg):
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def _read_rates(path: str) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    head = rows[0].split(",")
    col = head.index("lambda") if "lambda" in head else 0
    start = 1 if not _is_number(head[col]) else 0
    return np.array([float(r.split(",")[col]) for r in rows[start:]])


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# -- subcommands --------------------------------------------------------------

def cmd_nmp_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    dist = build_distribution(cfg.spec())
    T = args.horizon or cfg.get("horizon", 500)
    band = tuple(cfg.get("band", (0, 0)))
    res = nmp_run(cfg.initial_state(), dist, T, snapshots=cfg.get("snapshots", "geometric"), band=band,
                  config=cfg.engine())
    out = cfg.output_path(args.out)
    rows = zip(range(1, len(res.trace) + 1), res.trace.lam.tolist(), res.mean_queue.tolist(),
               res.idle_mass.tolist(), res.lost_mass.tolist(), res.banded_mean.tolist())
    _write_csv(out, ["t", "lambda", "mean_queue", "idle_mass", "lost_mass", "banded_mean"], list(rows), cfg)
    snap_dir = out.with_name(out.stem + "_snapshots")
    snap_dir.mkdir(exist_ok=True)
    for t, mu in res.snapshots.items():
        mu.write_csv(snap_dir / f"t{t:08d}.csv", _header(cfg) + [f"t={t}"])
    print(json.dumps({"final_lambda": float(res.trace.lam[-1]), "max_mean_drift": res.max_mean_drift,
                      "tail_mean_lambda": float(res.trace.lam[-max(1, T // 10):].mean())}))
    return EXIT_OK


def cmd_gfp_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    dist = build_distribution(cfg.spec())
    if args.rates:
        rates = _read_rates(args.rates)
    else:
        rates = np.full(args.horizon or cfg.get("horizon", 500), float(args.constant))
    trace = gfp_run(cfg.initial_state(), dist, rates, config=cfg.engine())
    rows = zip(range(1, rates.size + 1), rates.tolist(), trace.lam.tolist())
    _write_csv(cfg.output_path(args.out), ["t", "lambda_in", "lambda_out"], list(rows), cfg)
    return EXIT_OK


def cmd_fixed_point(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    dist = build_distribution(cfg.spec())
    T = args.horizon or cfg.get("horizon", 200)
    res = fixed_point_solve(cfg.initial_state(), dist, T, tol=args.tol, config=cfg.engine())
    rows = zip(range(1, T + 1), res.trace.lam.tolist())
    _write_csv(cfg.output_path(args.out), ["t", "lambda"], list(rows), cfg)
    print(json.dumps({"iterations": res.iterations, "residual": res.residual}))
    return EXIT_OK


def cmd_stationary(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else None
    spec = TypeBSpec.load(args.dist) if args.dist else cfg.spec()
    dist = build_distribution(spec)
    st = cfg.section("stationary") if cfg else {}
    rho = args.rho if args.rho is not None else float(st.get("rho", 1.0))
    res = stationary_state(dist, rho, tol=float(st.get("tol", 1e-10)), max_T=int(st.get("max_T", 200_000)),
                           config=cfg.engine() if cfg else DEFAULT)
    obj = res.to_json()
    obj.update({"pk_rate": pk_rate(rho, dist.mean, dist.second_moment),
                "pk_rate_in_system": pk_rate_in_system(rho, dist.mean, dist.second_moment),
                "core_rectangle": res.rect.to_json()})
    out = output_path(args.out)
    _write_json(out, obj, cfg)
    res.state.write_csv(out.with_suffix(".state.csv"), _header(cfg))
    return EXIT_OK


def cmd_pk(args: argparse.Namespace) -> int:
    print(json.dumps({
        "rho": args.rho, "m1": args.m1, "m2": args.m2,
        "pk_rate": pk_rate(args.rho, args.m1, args.m2),
        "pk_rate_in_system": pk_rate_in_system(args.rho, args.m1, args.m2),
    }))
    return EXIT_OK


def cmd_transience_build(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else None
    tr = cfg.section("transience") if cfg else {}
    if args.base:
        base = TypeBSpec.load(args.base)
    elif cfg is not None:
        base = cfg.spec()
    else:
        base = TypeBSpec(((1, 1),))
    K = args.levels or int(tr.get("levels", 3))
    eps = args.eps or float(tr.get("eps", 0.05))
    spec, delta, cert = construct(K, base, eps, F=tr.get("F"), gaps=tr.get("gaps"),
                                  d_max_j=int(tr.get("d_max_j", 40)), B_cap=int(tr.get("B_cap", 1 << 26)),
                                  config=cfg.engine() if cfg else DEFAULT)
    out = output_path(args.out)
    _write_json(out, cert.to_json(), cfg)
    print(json.dumps({"low_windows": cert.low_windows, "high_points": cert.high_points}))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cert = TransienceCertificate.load(args.cert)
    ok = verify_certificate(cert, horizon=args.horizon)
    print(json.dumps({"verified": ok}))
    return EXIT_OK if ok else EXIT_BUDGET


def _meanfield_job(job: tuple) -> dict:
    raw, base_dir, M, seed, steps, every, out_dir, designated = job
    cfg = ExperimentConfig(raw, Path(base_dir))
    dist = build_distribution(cfg.spec())
    state = init_network(cfg.initial_state(), M, seed)
    N0 = state.N
    out = Path(out_dir) / f"M{M}_seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    sigma = np.zeros(steps, dtype=np.int64)
    arr = np.zeros((steps, len(designated)), dtype=np.int64)
    for s in range(steps):
        sigma[s], a = network_step(state, dist)
        arr[s] = a[list(designated)]
        if state.N != N0:
            raise ConservationError(f"customer count changed at t = {state.t}")
        if every and state.t % every == 0:
            empirical_projection(state).write_csv(out / f"t{state.t:08d}.csv",
                                                  _header(cfg) + [f"t={state.t}", f"M={M}", f"seed={seed}"])
    _write_csv(out / "sigma.csv", ["t", "sigma"] + [f"arrivals_{i}" for i in designated],
               [[t + 1, int(sigma[t])] + arr[t].tolist() for t in range(steps)], cfg)
    report: dict = {"M": M, "seed": seed, "N": N0, "steps": steps, "mean_sigma_per_server": float(sigma.mean() / M)}
    if steps >= 1000 and len(designated) >= 2:
        try:
            rep = inflow_tests(FlowStats(sigma, arr, tuple(designated)))
            report["inflow"] = {"chi2_p": rep.chi2_p, "cov": rep.cov, "cov_se": rep.cov_se,
                                "conditional_tv": rep.conditional_tv, "conditional_p": rep.conditional_p}
        except ValueError as exc:
            report["inflow"] = {"error": str(exc)}
    _write_json(out / "stats.json", report, cfg)
    return report


def cmd_meanfield(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    mf = cfg.section("meanfield")
    Ms = [args.M] if args.M else list(mf.get("M", [100]))
    seeds = [args.seed] if args.seed is not None else list(mf.get("seeds", [0]))
    steps = args.steps or int(mf.get("steps", 50))
    every = int(mf.get("snapshot_every", 10))
    designated = tuple(mf.get("designated", [0, 1]))
    out_dir = cfg.output_path(Path(args.out) / "x").parent
    jobs = [(cfg.raw, str(cfg.base_dir), M, s, steps, every, str(out_dir), designated) for M in Ms for s in seeds]
    workers = int(cfg.get("workers", os.cpu_count() or 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_meanfield_job, jobs))
    else:
        reports = [_meanfield_job(j) for j in jobs]
    _write_json(out_dir / "summary.json", {"runs": reports}, cfg)
    return EXIT_OK


def _snapshot_time(path: Path) -> int:
    return int(path.stem.lstrip("t"))


def cmd_compare(args: argparse.Namespace) -> int:
    mf_dir = Path(args.meanfield)
    nmp = Path(args.nmp)
    snap_dir = nmp if nmp.is_dir() else nmp.with_name(nmp.stem + "_snapshots")
    refs = {_snapshot_time(p): p for p in snap_dir.glob("t*.csv")}
    rows = []
    for run in sorted(p for p in mf_dir.iterdir() if p.is_dir()):
        M = int(run.name.split("_")[0][1:])
        for snap in sorted(run.glob("t*.csv")):
            t = _snapshot_time(snap)
            if t not in refs:
                continue
            ref = StateMeasure.read_csv(refs[t])
            emp = StateMeasure.read_csv(snap)
            counts = {cell: int(round(m * M)) for cell, m in emp.atoms()}
            counts[(0, 0)] = int(round(emp.idle_mass * M))
            d = chaos_from_counts(counts, ref, core_rectangle(ref, args.budget))
            rows.append([run.name, M, t, d.single, d.pair])
    if not rows:
        print("no matching snapshot times", file=sys.stderr)
        return EXIT_SCHEMA
    _write_csv(output_path(args.out), ["run", "M", "t", "chaos_single", "chaos_pair"], rows, None)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(json.dumps({"diagnostics": [str(exc)]}))
        return EXIT_SCHEMA
    problems = validate_config(raw, path.parent)
    print(json.dumps({"diagnostics": problems}))
    return EXIT_SCHEMA if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmpqueue", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("nmp-run", help="iterate the measure dynamics")
    s.add_argument("--config", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_nmp_run)

    s = sub.add_parser("gfp-run", help="server driven by exogenous input rates")
    s.add_argument("--config", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--rates", help="CSV with a lambda column")
    g.add_argument("--constant", type=float)
    s.add_argument("--horizon", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gfp_run)

    s = sub.add_parser("fixed-point", help="solve lambda = A(nu, lambda)")
    s.add_argument("--config", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--tol", type=float, default=1e-12)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fixed_point)

    s = sub.add_parser("stationary", help="long-run state with a given mean queue")
    s.add_argument("--config")
    s.add_argument("--dist")
    s.add_argument("--rho", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stationary)

    s = sub.add_parser("pk", help="throughput formulas")
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--m1", type=float, required=True)
    s.add_argument("--m2", type=float, required=True)
    s.set_defaults(func=cmd_pk)

    s = sub.add_parser("transience-build", help="build and certify an oscillating server")
    s.add_argument("--config")
    s.add_argument("--levels", type=int)
    s.add_argument("--eps", type=float)
    s.add_argument("--base")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transience_build)

    s = sub.add_parser("verify", help="re-run a certificate")
    s.add_argument("cert")
    s.add_argument("--horizon", type=int)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("meanfield", help="simulate the finite network")
    s.add_argument("--config", required=True)
    s.add_argument("--M", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_meanfield)

    s = sub.add_parser("compare", help="chaos distances between network and measure snapshots")
    s.add_argument("--meanfield", required=True)
    s.add_argument("--nmp", required=True)
    s.add_argument("--budget", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("validate", help="check a config file")
    s.add_argument("config")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"schema error: {problem}", file=sys.stderr)
        return EXIT_SCHEMA
    except SpecError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConservationError as exc:
        print(f"invariant violated: conservation: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (SearchExhausted, ConvergenceError, FixedPointError) as exc:
        print(f"exhausted: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED


if __name__ == "__main__":
    sys.exit(main())
