"""Command-line front end.

Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clt import cdf_plot_data, default_workers
from .config import ConfigError, ExperimentConfig, load_config
from .engine import simulate_ensemble
from .experiments import (
    Streams, resolve_observable, run_check, run_clt, run_sigma2, validate_clt,
)
from .fm import EmpiricalMeasure, SupportCapError, fm_distance
from .model import HybridMetric, ModelError
from .report import write_csv, write_json, write_manifest
from .rng import RngStream

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _setup(args):
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers or default_workers()
    return cfg, out, workers


def _wants(cfg: ExperimentConfig, fmt: str) -> bool:
    return fmt in cfg.output.formats


def _finish(out, command, cfg, model, files, workers, passed: bool) -> int:
    write_manifest(out, command, cfg.run.seed, model, files, cfg.as_dict(), workers)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_simulate(args) -> int:
    cfg, out, workers = _setup(args)
    model = cfg.build_model()
    root = RngStream(cfg.run.seed)
    n = cfg.simulate.replicas
    ens = simulate_ensemble(model, cfg.init_state(model), cfg.run.horizon_time,
                            root.split(Streams.SIMULATE).spawn_keys(n))
    files = []
    if cfg.simulate.layout == "long":
        path = out / "ensemble.csv"
        ens.to_long_csv(path)
        files.append(path)
    else:
        width = max(4, len(str(n - 1)))
        for r in range(n):
            path = out / f"trajectory_{r:0{width}d}.csv"
            ens.trajectory(r).to_csv(path)
            files.append(path)
    return _finish(out, "simulate", cfg, model, files, workers, True)


def _write_tables(out, tables) -> list:
    return [write_csv(out / name, header, rows) for name, (header, rows) in tables.items()]


def cmd_check(args) -> int:
    cfg, out, workers = _setup(args)
    model = cfg.build_model()
    payload, passed, tables, _ = run_check(cfg, model, RngStream(cfg.run.seed))
    files = [write_json(out / "check.json", payload)]
    if _wants(cfg, "csv"):
        files += _write_tables(out, tables)
    return _finish(out, "check", cfg, model, files, workers, passed)


def _chi_header(model):
    return [f"y{k}" for k in range(model.dim)] + ["regime", "chi", "stderr"]


def _sigma2_files(out, cfg, model, sig) -> list:
    files = [write_json(out / "sigma2.json", {**sig.report.to_dict(), "pass": sig.passed})]
    if _wants(cfg, "csv"):
        files.append(write_csv(out / "chi_table.csv", _chi_header(model), sig.chi_table))
    return files


def cmd_sigma2(args) -> int:
    cfg, out, workers = _setup(args)
    model = cfg.build_model()
    root = RngStream(cfg.run.seed)
    g = resolve_observable(cfg, model, root)
    erg = None
    if cfg.sigma2.chi == "monte-carlo":
        _, _, _, erg = run_check(cfg, model, root)
    sig = run_sigma2(cfg, model, g, root, erg)
    files = _sigma2_files(out, cfg, model, sig)
    return _finish(out, "sigma2", cfg, model, files, workers, sig.passed)


def _clt_files(out, cfg, clt) -> list:
    rep = clt.report
    files = [write_json(out / "clt.json", clt.to_dict())]
    if _wants(cfg, "csv"):
        files.append(write_csv(out / "samples.csv", ["sample"], [(v,) for v in rep.samples]))
        sigma = float(np.sqrt(rep.sigma2_ref.value))
        files.append(write_csv(out / "cdf.csv", ["u", "empirical_cdf", "normal_cdf"],
                               cdf_plot_data(rep.samples, sigma)))
    return files


def cmd_clt(args) -> int:
    cfg, out, workers = _setup(args)
    validate_clt(cfg)
    model = cfg.build_model()
    root = RngStream(cfg.run.seed)
    g = resolve_observable(cfg, model, root)
    sig = run_sigma2(cfg, model, g, root)
    clt = run_clt(cfg, model, root, sig, workers)
    return _finish(out, "clt", cfg, model, _clt_files(out, cfg, clt), workers, clt.passed)


def cmd_full_report(args) -> int:
    cfg, out, workers = _setup(args)
    validate_clt(cfg)
    model = cfg.build_model()
    root = RngStream(cfg.run.seed)
    check, check_ok, tables, erg = run_check(cfg, model, root)
    g = resolve_observable(cfg, model, root)
    sig = run_sigma2(cfg, model, g, root, erg)
    clt = run_clt(cfg, model, root, sig, workers)
    files = [write_json(out / "check.json", check)]
    if _wants(cfg, "csv"):
        files += _write_tables(out, tables)
    files += _sigma2_files(out, cfg, model, sig)
    files += _clt_files(out, cfg, clt)
    passed = check_ok and sig.passed and clt.passed
    bundle = {
        "check": check,
        "sigma2": {**sig.report.to_dict(), "pass": sig.passed},
        "clt": clt.to_dict(),
        "pass": passed,
    }
    files.append(write_json(out / "report.json", bundle))
    return _finish(out, "full-report", cfg, model, files, workers, passed)


def cmd_fm(args) -> int:
    try:
        mu = EmpiricalMeasure.from_csv(args.file_a)
        nu = EmpiricalMeasure.from_csv(args.file_b)
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"cannot read point cloud: {exc}") from exc
    metric = HybridMetric(args.c)
    res = fm_distance(mu, nu, metric, cap=args.cap, certificate=True)
    print(repr(res.value))
    if args.certificate:
        res.certificate_to_csv(args.certificate)
    if args.json:
        write_json(args.json, {"fm_distance": res.value, "support_size": len(res.f), "c": args.c})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdmpclt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="YAML experiment configuration")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $PDMPCLT_WORKERS or CPU count)")
        p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.set_defaults(func=func)

    experiment("simulate", cmd_simulate, "write trajectories and a manifest")
    experiment("check", cmd_check, "check drift, contraction and ergodicity hypotheses")
    experiment("sigma2", cmd_sigma2, "estimate the asymptotic variance three ways")
    experiment("clt", cmd_clt, "run the CLT acceptance ensemble")
    experiment("full-report", cmd_full_report, "check, sigma2 and clt bundled into one report")

    p = sub.add_parser("fm", help="Fortet-Mourier distance between two point clouds")
    p.add_argument("file_a")
    p.add_argument("file_b")
    p.add_argument("--c", type=float, default=1.0, help="regime weight of the metric")
    p.add_argument("--cap", type=int, default=2000, help="largest combined support")
    p.add_argument("--certificate", default=None, help="write the optimal test function as CSV")
    p.add_argument("--json", default=None, help="write the result as JSON")
    p.set_defaults(func=cmd_fm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SupportCapError) as exc:
        print(f"pdmpclt: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"pdmpclt: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"pdmpclt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
