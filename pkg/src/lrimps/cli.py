"""Command-line frontend: ``lrimps solve|sweep|analyze|validate``."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .analysis import (FitError, correlation, density_profile, detect_periodicity, entanglement_entropy,
                       fit_luttinger, select_ground_state, selected_state, transfer_matrix, uniform_state)
from .config import ConfigError, RunConfig, load_config
from .engine import Engine, EngineConfig, EngineError
from .models import build_model, density_operator_name
from .operators import named_operator
from .validation import CHECKS, FAULTS, run_checks

log = logging.getLogger("lrimps")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
WORKERS_ENV = "LRIMPS_WORKERS"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(stream, columns, rows, header_lines=()):
    for ln in header_lines:
        stream.write(f"# {ln}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])


def summarize(engine: Engine, model: str) -> dict:
    """Energy, period, mean density and entropy of the converged tensor."""
    st = uniform_state(engine.A)
    q = detect_periodicity(transfer_matrix(st.q_left))
    op = named_operator(density_operator_name(model), engine.mpo.d)
    rho = float(np.mean(density_profile(st, op, q)))
    return {"energy_per_site": engine.shift, "q": q, "rho": rho, "S_chi": entanglement_entropy(st.lam),
            "converged": engine.converged, "rounds": engine.round}


# --------------------------------------------------------------------------
# solve
# --------------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    eng = cfg.engine
    changes = {}
    if getattr(args, "chi", None) is not None:
        changes["chi"] = args.chi
    if getattr(args, "max_rounds", None) is not None:
        changes["max_rounds"] = args.max_rounds
    seed = cfg.seed if getattr(args, "seed", None) is None else args.seed
    changes["seed"] = seed
    eng = EngineConfig.from_dict({**eng.to_dict(), **changes})
    out = args.out if getattr(args, "out", None) else cfg.out
    workers = getattr(args, "workers", None) or cfg.workers
    return replace(cfg, engine=eng, seed=seed, out=out, workers=workers)


def cmd_solve(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        engine = checkpoint.load(args.resume)
        if args.max_rounds is not None:
            engine.config.max_rounds = args.max_rounds
    else:
        engine = Engine(build_model(cfg.model, cfg.params), cfg.engine)
    ck_path = out / "checkpoint.bin"
    every = max(1, args.progress)
    with open(out / "reports.jsonl", "a" if args.resume else "w") as rep:
        def on_step(r):
            rep.write(json.dumps(r.as_dict()) + "\n")
            if r.round % every == 0:
                log.info("round %d  e/site %.12f  dA %.3e  xi %.3f  gamma %.3e  iter %d",
                         r.round, r.energy_per_site, r.delta, r.xi, r.gamma, r.iterations)
        try:
            done = engine.round
            engine.run(max_rounds=max(0, engine.config.max_rounds - done) if args.resume else None, callback=on_step)
        except (EngineError, FloatingPointError) as exc:
            checkpoint.save(engine, ck_path)
            print(f"error: {exc} (checkpoint written to {ck_path})", file=sys.stderr)
            return EXIT_FAIL
    checkpoint.save(engine, ck_path)
    np.save(out / "site_tensor.npy", engine.A)
    s = summarize(engine, cfg.model)
    cols = ["energy_per_site", "q", "rho", "S_chi", "converged", "rounds"]
    with open(out / "summary.csv", "w") as fh:
        write_csv(fh, cols, [[s[c] for c in cols]], cfg.echo())
    print(f"energy/site {fmt(s['energy_per_site'])}  q {s['q']}  rho {fmt(s['rho'])}  "
          f"S_chi {fmt(s['S_chi'])}  converged {s['converged']}  rounds {s['rounds']}")
    if not s["converged"]:
        print("error: not converged within the round budget", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep
# --------------------------------------------------------------------------

def _solve_point(job):
    model, params, engine_dict = job
    engine = Engine(build_model(model, params), EngineConfig.from_dict(engine_dict))
    try:
        engine.run()
        s = summarize(engine, model)
    except EngineError:
        s = {"energy_per_site": math.nan, "q": 0, "rho": math.nan, "S_chi": math.nan,
             "converged": False, "rounds": engine.round}
    return params, s


def resolve_workers(cli_value: Optional[int], cfg_value: Optional[int]) -> int:
    if cli_value:
        return cli_value
    if cfg_value:
        return cfg_value
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be at least 1")
        return n
    return 1


def sweep_jobs(cfg: RunConfig):
    if not cfg.sweep:
        raise ConfigError("sweep needs a non-empty [sweep] section")
    keys = list(cfg.sweep)
    points = list(itertools.product(*(cfg.sweep[k] for k in keys)))
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(points))
    jobs = []
    for vals, ss in zip(points, seeds):
        params = {**cfg.params, **dict(zip(keys, vals))}
        eng = {**cfg.engine.to_dict(), "seed": int(ss.generate_state(1)[0])}
        jobs.append((cfg.model, params, eng))
    return keys, jobs


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    workers = resolve_workers(args.workers, cfg.workers)
    keys, jobs = sweep_jobs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if workers == 1:
        results = map(_solve_point, jobs)
        rows = _collect(results, keys, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = _collect(pool.map(_solve_point, jobs), keys, len(jobs))
    cols = keys + ["rho", "q", "energy_per_site", "S_chi", "converged", "rounds"]
    with open(out / "sweep.csv", "w") as fh:
        write_csv(fh, cols, rows, cfg.echo())
    n_bad = sum(1 for r in rows if not r[-2])
    print(f"{len(rows)} points written to {out / 'sweep.csv'}; {n_bad} unconverged")
    return EXIT_FAIL if n_bad else EXIT_OK


def _collect(results, keys, total):
    rows = []
    for i, (params, s) in enumerate(results, start=1):
        rows.append([params[k] for k in keys] + [s["rho"], s["q"], s["energy_per_site"], s["S_chi"],
                                                 s["converged"], s["rounds"]])
        log.info("point %d/%d done (%s)", i, total, ", ".join(f"{k}={fmt(params[k])}" for k in keys))
    return rows


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

_PAIR_ALIASES = {"nn": ("n", "n"), "cc": ("cdag", "c"), "zz": ("sz", "sz"), "xx": ("sx", "sx")}


def _pair(spec: str):
    if spec in _PAIR_ALIASES:
        return _PAIR_ALIASES[spec]
    parts = spec.split(",")
    if len(parts) != 2:
        raise ConfigError(f"correlation spec must be an alias ({', '.join(_PAIR_ALIASES)}) or 'op1,op2'")
    return parts[0].strip(), parts[1].strip()


def cmd_analyze(args) -> int:
    engine = checkpoint.load(args.checkpoint)
    d = engine.mpo.d
    st = uniform_state(engine.A)
    q = detect_periodicity(transfer_matrix(st.q_left), args.tol)
    buf = io.StringIO()
    header = [f"checkpoint {args.checkpoint}", f"rounds {engine.round}", f"converged {engine.converged}"]
    try:
        if args.correlation:
            a, b = _pair(args.correlation)
            series = correlation(st, named_operator(a, d), named_operator(b, d), args.r_max,
                                 connected=args.connected, names=(a, b))
            write_csv(buf, ["r", "value"], zip(series.r, np.real(series.values)), header)
        elif args.entropy:
            write_csv(buf, ["S_chi"], [[entanglement_entropy(st.lam)]], header)
        elif args.profile:
            period = args.period or q
            prof = density_profile(st, named_operator(args.profile, d), period)
            write_csv(buf, ["site", "value"], enumerate(prof), header)
        elif args.luttinger:
            r0, r1 = args.luttinger
            n_op = named_operator("n", d)
            rho0 = float(np.mean(density_profile(st, n_op, q)))
            nn = correlation(st, n_op, n_op, r1)
            cc = correlation(st, named_operator("cdag", d), named_operator("c", d), r1)
            fit = fit_luttinger(nn, cc, rho0, (r0, r1))
            write_csv(buf, ["K_nn", "K_cc", "const_nn", "const_cc", "residual_nn", "residual_cc"],
                      [[fit.k_nn, fit.k_cc, fit.const_nn, fit.const_cc, fit.residual_nn, fit.residual_cc]], header)
        elif args.select:
            op = named_operator(args.select, d)
            sel = select_ground_state(st.q_left, st.q_right, st.lam, op)
            prof = density_profile(selected_state(st, sel), op, max(q, 1))
            write_csv(buf, ["site", "value"], enumerate(prof),
                      header + [f"objective {args.select}", f"value {fmt(sel.value)}", f"degenerate {sel.degenerate}"])
        else:
            s = summarize(engine, "dipolar" if engine.mpo.name.startswith("dipolar") else engine.mpo.name)
            cols = list(s)
            write_csv(buf, cols, [[s[c] for c in cols]], header)
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

def cmd_validate(args) -> int:
    if args.list:
        for name, (desc, _) in CHECKS.items():
            print(f"{name:16s} {desc}")
        return EXIT_OK
    names = args.check or None
    if names:
        bad = [n for n in names if n not in CHECKS]
        if bad:
            raise ConfigError(f"unknown check(s): {', '.join(bad)}; use --list")
    results = run_checks(names, args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrimps", description="iMPS ground states of long-range 1D chains")
    p.add_argument("-v", "--verbose", action="store_true", help="progress output on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (overrides [run] out)")
        sp.add_argument("--chi", type=int, help="bond dimension override")
        sp.add_argument("--max-rounds", type=int, dest="max_rounds")

    s = sub.add_parser("solve", help="run one engine to convergence")
    common(s)
    s.add_argument("--resume", help="continue from a checkpoint file")
    s.add_argument("--progress", type=int, default=50, help="log every N rounds")
    s.set_defaults(func=cmd_solve)

    w = sub.add_parser("sweep", help="independent solves over parameter grids")
    common(w)
    w.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="observables of a checkpointed state")
    a.add_argument("checkpoint")
    g = a.add_mutually_exclusive_group()
    g.add_argument("--correlation", help="nn, cc, zz, xx or 'op1,op2'")
    g.add_argument("--entropy", action="store_true")
    g.add_argument("--profile", help="local operator for a one-period profile")
    g.add_argument("--luttinger", nargs=2, type=int, metavar=("R_MIN", "R_MAX"))
    g.add_argument("--select", help="objective operator for symmetry-broken state selection")
    a.add_argument("--r-max", type=int, default=100, dest="r_max")
    a.add_argument("--connected", action="store_true")
    a.add_argument("--period", type=int)
    a.add_argument("--tol", type=float, default=1e-6, help="periodicity tolerance")
    a.add_argument("--out", help="CSV output file (default stdout)")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("validate", help="dense-oracle self checks")
    v.add_argument("--list", action="store_true")
    v.add_argument("--check", action="append", help="run only this check (repeatable)")
    v.add_argument("--inject-fault", choices=FAULTS, dest="inject_fault")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except checkpoint.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
