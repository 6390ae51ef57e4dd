"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Errors are also written to stderr as a one-line JSON record.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import effects, sensitivity, simulation
from .config import load_config
from .data import load_dataset, save_dataset
from .exceptions import CheckpointError, DataError, NumericalError
from .sampler import Chain, PosteriorStore, export_trace, fit, run_manifest, write_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
log = logging.getLogger("riaftbart")


class UsageError(Exception):
    pass


def _workers(arg):
    return arg if arg is not None else (os.cpu_count() or 1)


def _parse_pairs(text, labels):
    if not text:
        return [(labels[i], labels[j]) for i in range(len(labels)) for j in range(i + 1, len(labels))]
    out = []
    for tok in text.split(","):
        parts = tok.strip().split(":")
        if len(parts) != 2:
            raise UsageError(f"malformed pair {tok!r}; expected a:b")
        for p in parts:
            if p not in labels:
                raise UsageError(f"unknown treatment label {p!r} in pair {tok!r}")
        out.append(tuple(parts))
    return out


def _load_data(args, rc):
    exclude = tuple(rc.exclude) + tuple(getattr(args, "exclude", None) or ())
    return load_dataset(args.data, rc.schema, rc.categorical, exclude)


def _sampler_overrides(args):
    return {
        "seed": args.seed, "n_draws": args.draws, "n_burn": args.burnin, "n_trees": args.trees,
        "chains": getattr(args, "chains", None), "thin": getattr(args, "thin", None),
    }


# -- commands ---------------------------------------------------------------


def cmd_fit(args):
    t0 = time.time()
    rc = load_config(args.config).with_sampler(**_sampler_overrides(args))
    cfg = rc.sampler
    if args.workers is not None or cfg.chains > 1:
        from dataclasses import replace

        cfg = replace(cfg, workers=_workers(args.workers))
    data = _load_data(args, rc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume or args.checkpoint:
        stores = []
        for c in range(cfg.chains):
            ck = Path(args.resume or args.checkpoint)
            ck = ck if cfg.chains == 1 else ck.with_name(f"{ck.name}.chain{c}")
            ch = Chain.resume(ck, data) if args.resume else Chain(data, cfg, c)
            ch.run(checkpoint=ck, every=args.checkpoint_every)
            stores.append(ch.result())
        store = stores[0] if len(stores) == 1 else PosteriorStore.merge(stores)
        cfg = ch.cfg
    else:
        store = fit(data, cfg)
    paths = {"store": store.save(out / "store.npz"), "trace": export_trace(store, out / "trace.csv")}
    man = run_manifest("fit", cfg, data, paths, time.time() - t0, {"argv": sys.argv[1:], "store_checksum": store.checksum()})
    write_manifest(man, out / "manifest.json")
    print(json.dumps({"store": str(paths["store"]), "draws": store.n_draws}))
    return EXIT_OK


def cmd_effects(args):
    t0 = time.time()
    if args.scale in ("surv", "rmst") and args.tstar is None:
        raise UsageError(f"--scale {args.scale} requires --tstar")
    store = PosteriorStore.load(args.store)
    pairs = _parse_pairs(args.pairs, store.trt_labels)
    ests = []
    for a, b in pairs:
        if args.scale == "rmst":
            ests.append(effects.rmst_effect(store, a, b, args.tstar, args.level, args.grid))
        elif args.target == "catt":
            ests.append(effects.catt(store, a, b, args.level))
        else:
            ests.append(effects.estimate(store, a, b, args.scale, args.tstar, args.level))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = {"effects": effects.write_effects(ests, out)}
    if args.curves:
        if args.tstar is None:
            raise UsageError("--curves requires --tstar")
        grid = effects.time_grid(args.tstar, args.grid)
        curves = [effects.counterfactual_survival(store, lab, grid) for lab in store.trt_labels]
        paths["curves"] = effects.write_curves(curves, args.curves, args.level)
    man = run_manifest("effects", None, None, paths, time.time() - t0,
                       {"argv": sys.argv[1:], "store_checksum": store.checksum()})
    write_manifest(man, out.with_suffix(".manifest.json"))
    return EXIT_OK


def cmd_sensitivity(args):
    t0 = time.time()
    if args.scale in ("surv", "rmst") and args.tstar is None:
        raise UsageError(f"--scale {args.scale} requires --tstar")
    rc = load_config(args.config).with_sampler(**_sampler_overrides(args))
    data = _load_data(args, rc)
    specs = sensitivity.load_spec_file(args.cf_spec, data.n_treatments)
    q1 = args.q1 if args.q1 is not None else rc.q1
    q2 = args.q2 if args.q2 is not None else rc.q2
    labels = data.trt_labels
    pairs = [(labels.index(a) + 1, labels.index(b) + 1) for a, b in _parse_pairs(args.pairs, labels)]
    sigma_hat = None
    if any(s.needs_sigma for s in specs):
        naive = fit(data, rc.sampler)
        sigma_hat = float(np.sqrt(naive.sigma2.mean()))
    gps = sensitivity.estimate_gps(data, q1, rc.sampler.seed, cluster_sd=rc.cluster_sd)
    results = [
        sensitivity.run_sensitivity(data, rc.sampler, spec, q1, q2, pairs, args.scale, args.tstar, rc.level, gps=gps,
                                    sigma_hat=sigma_hat, workers=_workers(args.workers))
        for spec in specs
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": sensitivity.write_report(results, out / "sensitivity.csv")}
    man = run_manifest("sensitivity", rc.sampler, data, paths, time.time() - t0,
                       {"argv": sys.argv[1:], "q1": q1, "q2": q2, "sigma_hat": sigma_hat,
                        "scenarios": [s.name for s in specs]})
    write_manifest(man, out / "manifest.json")
    return EXIT_OK


def _truth_record(args, scale, t_star, n_mc):
    if args.scenario == simulation.SA_SCENARIO:
        cfg = simulation.SaConfig(K=args.k, n_k=args.nk, seed=args.seed)
        if scale != "logtime":
            raise UsageError("the sensitivity design defines log-time truths only")
        tr = simulation.compute_sa_truth(cfg, n_mc)
        rec = tr.as_dict()
        cf = simulation.sa_truth_closed_form(cfg)
        rec["closed_form"] = {f"{j}:{jp}": float(cf[j - 1, jp - 1]) for j, jp in simulation.PAIRS}
        return rec
    cfg = simulation.scenario_config(args.scenario, K=args.k, n_k=args.nk, seed=args.seed)
    return simulation.compute_truth(cfg, scale, n_mc, t_star).as_dict()


def cmd_simulate(args):
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario == simulation.SA_SCENARIO:
        cfg = simulation.SaConfig(K=args.k, n_k=args.nk, seed=args.seed, censoring_mode=args.censoring_mode)
        res = simulation.gen_sa_illustrative(cfg, args.replicate)
        with (out / "confounding.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            keys = sorted(res.extra["confounding"])
            w.writerow([f"{j}:{m}" for j, m in keys])
            for row in zip(*(res.extra["confounding"][k] for k in keys)):
                w.writerow([repr(float(v)) for v in row])
    else:
        cfg = simulation.scenario_config(args.scenario, K=args.k, n_k=args.nk, seed=args.seed,
                                         censoring_mode=args.censoring_mode)
        res = simulation.gen_dataset(cfg, args.replicate)
    ds = res.dataset
    paths = {"dataset": save_dataset(ds, out / "dataset.csv")}
    truth = _truth_record(args, "logtime", None, args.nmc)
    truth.update({"scenario": args.scenario, "censoring_rate": res.rate,
                  "censored_fraction": float(1 - ds.delta.mean()), "unmeasured": list(ds.unmeasured)})
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    paths["truth"] = out / "truth.json"
    man = run_manifest("simulate", None, ds, paths, time.time() - t0,
                       {"argv": sys.argv[1:], "scenario": args.scenario, "seed": args.seed, "replicate": args.replicate})
    write_manifest(man, out / "manifest.json")
    return EXIT_OK


def cmd_truth(args):
    if args.scale in ("surv", "rmst") and args.tstar is None:
        raise UsageError(f"--scale {args.scale} requires --tstar")
    rec = _truth_record(args, args.scale, args.tstar, args.nmc)
    rec["scenario"] = args.scenario
    text = json.dumps(rec, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report(UsageError(message), EXIT_USAGE)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="riaftbart", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    def sampler_flags(sp):
        sp.add_argument("--data", required=True, help="input CSV")
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--draws", type=int, help="retained draws per chain")
        sp.add_argument("--burnin", type=int)
        sp.add_argument("--trees", type=int)
        sp.add_argument("--exclude", nargs="*", help="covariate columns to drop")
        sp.add_argument("--workers", type=int, help="worker processes (default: all cores)")

    f = add("fit", help="fit the model and write a posterior store")
    sampler_flags(f)
    f.add_argument("--chains", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--checkpoint", help="checkpoint file written during the run")
    f.add_argument("--checkpoint-every", type=int, default=100)
    f.add_argument("--resume", help="continue from a checkpoint file")
    f.set_defaults(func=cmd_fit)

    e = add("effects", help="pairwise treatment effects from a store")
    e.add_argument("--store", required=True)
    e.add_argument("--pairs", help="comma-separated a:b pairs (default: all)")
    e.add_argument("--scale", choices=effects.SCALES, default="logtime")
    e.add_argument("--target", choices=("cate", "catt"), default="cate")
    e.add_argument("--tstar", type=float)
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--grid", type=int, default=effects.DEFAULT_GRID)
    e.add_argument("--curves", help="also write survival curves to this CSV")
    e.add_argument("--out", required=True, help="effects CSV")
    e.set_defaults(func=cmd_effects)

    s = add("sensitivity", help="confounding-function sensitivity analysis")
    sampler_flags(s)
    s.add_argument("--cf-spec", required=True, help="INI file, one section per scenario")
    s.add_argument("--q1", type=int)
    s.add_argument("--q2", type=int)
    s.add_argument("--pairs")
    s.add_argument("--scale", choices=effects.SCALES, default="logtime")
    s.add_argument("--tstar", type=float)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sensitivity)

    scen = sorted(simulation.SCENARIOS) + [simulation.SA_SCENARIO]
    m = add("simulate", help="generate a simulated dataset")
    m.add_argument("--scenario", choices=scen, required=True)
    m.add_argument("--nk", type=int, default=500)
    m.add_argument("--k", type=int, default=20)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--replicate", type=int, default=0)
    m.add_argument("--nmc", type=int, default=200_000, help="MC size of the log-time truth")
    m.add_argument("--censoring-mode", choices=simulation.CENSORING_MODES, default="population",
                   help="tune the censoring rate on the design (population) or on this dataset")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)

    t = add("truth", help="Monte Carlo ground truth of a scenario")
    t.add_argument("--scenario", choices=scen, required=True)
    t.add_argument("--scale", choices=effects.SCALES, default="logtime")
    t.add_argument("--tstar", type=float)
    t.add_argument("--nmc", type=int, default=1_000_000)
    t.add_argument("--nk", type=int, default=500)
    t.add_argument("--k", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_truth)
    return p


def _report(exc, code):
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(rec) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        if isinstance(e, DataError):
            code = EXIT_DATA
        else:
            code = EXIT_USAGE
        _report(e, code)
        return code
    except (DataError, CheckpointError, FileNotFoundError) as e:
        _report(e, EXIT_DATA)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as e:
        _report(e, EXIT_NUMERICAL)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
