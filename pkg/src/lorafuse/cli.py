"""``lorafuse`` command line: profile, compose, plan, macs, report.

Exit codes: 0 success, 1 usage or configuration error, 2 failed ``--check``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .accounting import count_macs, mac_table
from .cachesys import dynamic_plan, no_cache_plan, plan_from_strategy, uniform_plan
from .composer import RunConfig, build_trace, run_compose
from .config import ConfigError, ExperimentConfig, load_config
from .denoiser import init_net, latent_checksum
from .numerics import ParameterError
from .profiler import (average_category, order_adapters, partition, profile_adapter, rank_categories,
                       write_partition_json, write_series_csv)

SUMMARY_FIELDS = ["method", "N", "strategy", "seed", "total_macs", "full_macs", "partial_macs",
                  "latent_sha256", "net_sha256", "run"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- artifacts ---------------------------------------------------------------

def write_latent(path_stem: str, values: np.ndarray) -> None:
    """Raw row-major little-endian float64 plus a min-max normalised 8-bit PGM."""
    with open(path_stem + ".f64", "wb") as fh:
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    c, h, w = values.shape
    tiles = np.concatenate(list(values), axis=1)  # channels side by side
    lo, hi = float(tiles.min()), float(tiles.max())
    if hi > lo:
        img = np.round((tiles - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros(tiles.shape, dtype=np.uint8)
    with open(path_stem + ".pgm", "wb") as fh:
        fh.write(f"P5\n{w * c} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _dump_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_name(method: str, n: int, strategy: str, seed: int) -> str:
    tag = strategy.replace("(", "").replace(")", "").replace(",", "-")
    return f"{method}_N{n}_{tag}_s{seed}"


# -- profile -----------------------------------------------------------------

def do_profile(cfg: ExperimentConfig) -> dict:
    os.makedirs(cfg.output, exist_ok=True)
    net = init_net(cfg.net)
    T = cfg.run.profile_T or cfg.run.T
    series = {}
    for a in cfg.adapters:
        series[a.id] = profile_adapter(net, a, T, cfg.run.profile_seed, cfg.run.h, cfg.run.z,
                                       cfg.run.guidance, cfg.run.prompt)
    sdir = os.path.join(cfg.output, "series")
    os.makedirs(sdir, exist_ok=True)
    for aid, s in series.items():
        write_series_csv(os.path.join(sdir, f"{aid}.csv"), [s])
    by_cat = {}
    for aid in sorted(series):
        by_cat.setdefault(series[aid].category, []).append(series[aid])
    profiles = [average_category(v, c) for c, v in sorted(by_cat.items())]
    cat_order = rank_categories(profiles)
    adapter_order = order_adapters(series)
    write_partition_json(os.path.join(cfg.output, "partition.json"), partition(cat_order))
    _dump_json(os.path.join(cfg.output, "ordering.json"), {
        "categories": [{"label": l, "early_mean": v} for l, v in zip(cat_order.labels, cat_order.statistics)],
        "adapters": [{"id": l, "early_mean": v} for l, v in zip(adapter_order.labels, adapter_order.statistics)],
    })
    return {"categories": cat_order.labels, "adapters": adapter_order.labels}


def _load_adapter_ordering(cfg: ExperimentConfig) -> tuple[str, ...]:
    path = os.path.join(cfg.output, "ordering.json")
    if not os.path.exists(path):
        return tuple(do_profile(cfg)["adapters"])
    with open(path) as fh:
        data = json.load(fh)
    ids = tuple(x["id"] for x in data["adapters"])
    if sorted(ids) != sorted(a.id for a in cfg.adapters):
        return tuple(do_profile(cfg)["adapters"])
    return ids


# -- compose -----------------------------------------------------------------

def _execute_run(job) -> dict:
    cfg, method, n, strategy, seed, ordering = job
    adapters = cfg.adapters[:n]
    ids = {a.id for a in adapters}
    sub_order = tuple(x for x in ordering if x in ids) if ordering else None
    r = cfg.run
    rc = RunConfig(method=method, adapters=() if method == "naive" else adapters, T=r.T, s=r.guidance,
                   cache=strategy, seed=seed, net=cfg.net, prompt=r.prompt, h=r.h, z=r.z,
                   profile_T=r.profile_T, ordering=sub_order if method != "naive" else None,
                   alpha=r.alpha, w_init=r.w_init, decay=r.decay, tau=r.tau, skip=r.skip, ridge=r.ridge)
    net = init_net(cfg.net)
    res = run_compose(rc, net)
    name = run_name(method, n, strategy, seed)
    rdir = os.path.join(cfg.output, name)
    os.makedirs(rdir, exist_ok=True)
    write_latent(os.path.join(rdir, "latent"), res.latent.values)
    res.trace.write_csv(os.path.join(rdir, "trace.csv"))
    res.macs.write_json(os.path.join(rdir, "macs.json"))
    row = {
        "method": method, "N": n, "strategy": res.plan.strategy, "seed": seed,
        "total_macs": res.macs.total, "full_macs": res.macs.full_macs, "partial_macs": res.macs.partial_macs,
        "latent_sha256": latent_checksum(res.latent), "net_sha256": net.checksum(), "run": name,
    }
    _dump_json(os.path.join(rdir, "run.json"), {**row, "T": r.T, "guidance": r.guidance,
                                                "adapters": [a.id for a in adapters] if method != "naive" else [],
                                                "ordering": list(res.ordering) if res.ordering else None,
                                                "plan_full_steps": len(res.plan)})
    return row


def write_summary(path: str, rows) -> None:
    rows = sorted(rows, key=lambda r: (r["method"], int(r["N"]), r["strategy"], int(r["seed"])))
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        out.writeheader()
        for r in rows:
            out.writerow({k: r[k] for k in SUMMARY_FIELDS})


def check_mac_invariants(rows) -> list[str]:
    """Cost relations every summary should satisfy; returns violations."""
    fails = []
    total = {}
    for r in rows:
        total[(r["method"], int(r["N"]), r["strategy"], int(r["seed"]))] = int(r["total_macs"])
    keys = set(total)
    for (m, n, s, seed), v in sorted(total.items()):
        full = total.get((m, n, "none", seed))
        # a lone cmlora adapter is dominant at every step, so it never caches
        lone = m == "cmlora" and n == 1
        if s != "none" and full is not None and not lone and not v < full:
            fails.append(f"{m} N={n} {s}: cached {v} is not below uncached {full}")
        if m == "cmlora" and n >= 2 and s != "none":
            comp = total.get(("composite", n, "none", seed))
            if comp is not None and not v < comp:
                fails.append(f"cmlora N={n} {s}: {v} is not below uncached composite {comp}")
        if m == "composite":
            one = total.get(("composite", 1, s, seed))
            if one is not None and v != n * one:
                fails.append(f"composite N={n} {s}: {v} != {n} x {one}")
        if m == "switch":
            for (m2, n2, s2, seed2) in keys:
                if m2 == "switch" and s2 == s and seed2 == seed and total[(m2, n2, s2, seed2)] != v:
                    fails.append(f"switch {s}: total differs between N={n} and N={n2}")
    for (m, n, s, seed) in sorted(keys):
        chain = [total.get((m, n, f"uniform({c})", seed)) for c in (5, 3, 2)] + [total.get((m, n, "none", seed))]
        present = [x for x in chain if x is not None]
        if s == "none" and not (m == "cmlora" and n == 1) and any(not a < b for a, b in zip(present, present[1:])):
            fails.append(f"{m} N={n}: uniform stride ordering violated {present}")
    return sorted(set(fails))


def do_compose(cfg: ExperimentConfig, jobs: int = 1, seeds=None) -> list[dict]:
    os.makedirs(cfg.output, exist_ok=True)
    seeds = tuple(seeds) if seeds else cfg.matrix.seeds
    ordering = None
    if any(m in ("switch-a", "cmlora") for m in cfg.matrix.methods):
        ordering = _load_adapter_ordering(cfg)
    todo = []
    for method in cfg.matrix.methods:
        for n in cfg.matrix.n:
            for cache in cfg.matrix.cache:
                strategy = plan_from_strategy(cfg.run.T, cfg.strategy(cache)).strategy
                for seed in seeds:
                    todo.append((cfg, method, n, strategy, seed, ordering))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_execute_run, todo))
    else:
        rows = [_execute_run(j) for j in todo]
    write_summary(os.path.join(cfg.output, "summary.csv"), rows)
    return rows


# -- macs / plan / report ----------------------------------------------------

def do_macs(cfg: ExperimentConfig) -> dict:
    reports = []
    for method in cfg.matrix.methods:
        for n in cfg.matrix.n:
            ids = tuple(a.id for a in cfg.adapters[:n]) if method != "naive" else ()
            for cache in cfg.matrix.cache:
                plan = plan_from_strategy(cfg.run.T, cfg.strategy(cache))
                # cost does not depend on which adapter leads, so roster order stands in
                trace = build_trace(method, ids, cfg.run.T, plan, ordering=ids, tau=cfg.run.tau,
                                    alpha=cfg.run.alpha, w_init=cfg.run.w_init, decay=cfg.run.decay,
                                    skip=cfg.run.skip)
                reports.append(count_macs(cfg.net, trace, plan))
    table = mac_table(reports)
    if "naive" in cfg.matrix.methods:
        # naive ignores N; keep one column per requested N for a rectangular table
        table["naive"] = {str(n): table["naive"]["0"] for n in cfg.matrix.n}
    return table


def do_report(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        path = os.path.join(d, "run.json")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"not a run directory (missing {path})") from None
        rows.append({k: data[k] for k in SUMMARY_FIELDS})
    return rows


def _expand_runs(paths) -> list[str]:
    out = []
    for p in paths:
        if os.path.exists(os.path.join(p, "run.json")):
            out.append(p)
        elif os.path.isdir(p):
            out += [os.path.join(p, d) for d in sorted(os.listdir(p))
                    if os.path.exists(os.path.join(p, d, "run.json"))]
        else:
            raise UsageError(f"no such run directory: {p}")
    if not out:
        raise UsageError("no run directories found")
    return out


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lorafuse", description="Frequency-profiled LoRA composition on a toy denoiser.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("profile", help="profile adapters and write ordering and partition")
    sp.add_argument("--config", required=True)

    sc = sub.add_parser("compose", help="execute the run matrix")
    sc.add_argument("--config", required=True)
    sc.add_argument("--jobs", type=int, default=1)
    sc.add_argument("--seed", type=int, action="append", help="override matrix seeds (repeatable)")
    sc.add_argument("--check", action="store_true", help="exit 2 if MAC invariants fail")

    pl = sub.add_parser("plan", help="print a cache plan as JSON")
    pl.add_argument("--t", type=int, default=200)
    g = pl.add_mutually_exclusive_group()
    g.add_argument("--uniform", type=int, metavar="C")
    g.add_argument("--dynamic", type=int, nargs=2, metavar=("C1", "C2"))
    g.add_argument("--none", action="store_true")

    sm = sub.add_parser("macs", help="analytic MAC table for the run matrix")
    sm.add_argument("--config", required=True)
    sm.add_argument("--out")

    sr = sub.add_parser("report", help="aggregate run directories into one summary CSV")
    sr.add_argument("runs", nargs="+")
    sr.add_argument("--out")
    return p


def _sha(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plan":
            if args.uniform is not None:
                plan = uniform_plan(args.t, args.uniform)
            elif args.dynamic is not None:
                plan = dynamic_plan(args.t, *args.dynamic)
            else:
                plan = no_cache_plan(args.t)
            json.dump(plan.to_json(), sys.stdout)
            sys.stdout.write("\n")
            return 0
        if args.command == "report":
            rows = do_report(_expand_runs(args.runs))
            if args.out:
                write_summary(args.out, rows)
            else:
                out = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
                out.writeheader()
                for r in sorted(rows, key=lambda r: (r["method"], int(r["N"]), r["strategy"], int(r["seed"]))):
                    out.writerow(r)
            return 0
        cfg = load_config(args.config)
        if args.command == "profile":
            res = do_profile(cfg)
            print("ordering:", " > ".join(res["categories"]))
            return 0
        if args.command == "macs":
            table = do_macs(cfg)
            text = json.dumps(table, indent=2, sort_keys=True) + "\n"
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return 0
        if args.command == "compose":
            if args.jobs < 1:
                raise UsageError("--jobs must be at least 1")
            rows = do_compose(cfg, jobs=args.jobs, seeds=args.seed)
            summary = os.path.join(cfg.output, "summary.csv")
            print(f"{len(rows)} runs, summary {summary} sha256 {_sha(summary)}")
            if args.check:
                fails = check_mac_invariants(rows)
                for f in fails:
                    print("check failed:", f, file=sys.stderr)
                if fails:
                    return 2
            return 0
    except (ConfigError, ParameterError, UsageError) as exc:
        print(f"lorafuse: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lorafuse: error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
