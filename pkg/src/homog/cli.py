"""Command-line front end.

Subcommands map one-to-one onto the harness and walk entry points; every
command reads one JSON config, writes deterministic artifacts under
--out, and exits 0 on success, 2 when a configured acceptance threshold
is violated, 1 on error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .environment import sample_environment
from .harness import (
    CSV_HEADER,
    ExperimentConfig,
    emit_report,
    expansion_residual,
    run_rate_experiment,
    verify_tensors,
)
from .homogenize import compute_correctors, effective_stats
from .lattice import GridFunction, build_torus, dump_grid
from .walk import chain_average_a, qclt_estimate

_OK, _ERROR, _THRESHOLD = 0, 1, 2


def _write_json(path: str, data: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(data, sort_keys=True, indent=2) + "\n")


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        config = ExperimentConfig()
    else:
        with open(args.config) as fh:
            config = ExperimentConfig.from_json_dict(json.load(fh))
    if args.seed is not None:
        config.base_seed = int(args.seed)
    return config


def _cmd_env(config: ExperimentConfig, out: str, threads: int) -> int:
    env = sample_environment(config.dist, config.base_seed, config.d,
                             geometry=config.torus_L)
    torus = build_torus(config.torus_L, config.d)
    grids = env.a_axis_grids(torus.shape)
    for i, g in enumerate(grids):
        dump_grid(GridFunction(torus, g.ravel()),
                  os.path.join(out, f"a{i + 1}.grid"))
    _write_json(os.path.join(out, "env.json"), {
        "config": config.to_json_dict(),
        "sites": torus.n_sites,
        "a_min": float(min(g.min() for g in grids)),
        "a_max": float(max(g.max() for g in grids)),
    })
    return _OK


def _cmd_correctors(config: ExperimentConfig, out: str, threads: int) -> int:
    env = sample_environment(config.dist, config.base_seed, config.d,
                             geometry=config.torus_L)
    torus = build_torus(config.torus_L, config.d)
    cs = compute_correctors(env, torus, config.psi, config.solver)
    for k, fld in sorted(cs.v.items()):
        dump_grid(fld, os.path.join(out, f"v{k + 1}.grid"))
    dump_grid(cs.xi, os.path.join(out, "xi.grid"))
    dump_grid(cs.density, os.path.join(out, "density.grid"))
    _write_json(os.path.join(out, "correctors.json"), {
        "config": config.to_json_dict(),
        "a_bar": [float(x) for x in cs.a_bar],
        "psi_bar": cs.psi_bar,
        "solves": {k: {"iterations": r.iterations,
                       "residual": r.residual_inf,
                       "converged": r.converged}
                   for k, r in sorted(cs.results.items())},
    })
    return _OK if all(r.converged for r in cs.results.values()) else _ERROR


def _cmd_stats(config: ExperimentConfig, out: str, threads: int) -> int:
    seeds = range(config.base_seed, config.base_seed + config.stats_seeds)
    es = effective_stats(config.dist, config.psi, config.d, config.torus_L,
                         seeds, config.solver)
    _write_json(os.path.join(out, "stats.json"), {
        "config": config.to_json_dict(),
        "n_seeds": config.stats_seeds,
        "a_bar_mean": es.a_bar_mean.tolist(),
        "a_bar_se": es.a_bar_se.tolist(),
        "psi_bar_mean": float(es.psi_bar.mean()),
        "lam_mean": es.lam_mean.tolist(),
        "lam_se": es.lam_se.tolist(),
        "eta_mean": es.eta_mean.tolist(),
        "eta_se": es.eta_se.tolist(),
    })
    return _OK


def _cmd_tensors(config: ExperimentConfig, out: str, threads: int) -> int:
    report = verify_tensors(config)
    emit_report(report, out, formats=("json",))
    if report.max_abs_z > 3.0 or not report.pairing_ok:
        return _THRESHOLD
    return _OK


def _cmd_rates(config: ExperimentConfig, out: str, threads: int) -> int:
    report = run_rate_experiment(config, max_workers=max(1, threads))
    emit_report(report, out)
    if config.max_slope is not None and report.fitted_slope > config.max_slope:
        return _THRESHOLD
    return _OK


def _cmd_walk(config: ExperimentConfig, out: str, threads: int) -> int:
    env = sample_environment(config.dist, config.base_seed, config.d,
                             geometry=config.torus_L)
    q = qclt_estimate(env, config.walk_n_walks, config.walk_horizon,
                      seed=config.base_seed)
    burn = config.walk_burn_in
    if burn >= config.walk_horizon:
        burn = 0
    chain_mean, chain_se = chain_average_a(
        env, config.walk_n_walks, config.walk_horizon,
        seed=config.base_seed + 1, burn_in=burn)
    csv_path = os.path.join(out, "walk.csv")
    d = config.d
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("seed,walk,steps," +
                 ",".join(f"end_{i + 1}" for i in range(d)) + "\n")
        for w in range(q.n_walks):
            ends = ",".join(str(int(x)) for x in q.endpoints[w])
            fh.write(f"{config.base_seed},{w},{q.horizon},{ends}\n")
    _write_json(os.path.join(out, "walk.json"), {
        "config": config.to_json_dict(),
        "covariance": q.covariance.tolist(),
        "standard_errors": q.standard_errors.tolist(),
        "n_walks": q.n_walks,
        "horizon": q.horizon,
        "horizon_warning": q.horizon_warning,
        "chain_average_a": chain_mean.tolist(),
        "chain_average_se": chain_se.tolist(),
    })
    return _OK


def _cmd_expansion(config: ExperimentConfig, out: str, threads: int) -> int:
    report = expansion_residual(config)
    emit_report(report, out, formats=("json",))
    bad = (config.max_slope is not None
           and report.slope_full > config.max_slope)
    if config.min_degradation is not None:
        bad = bad or report.degradation < config.min_degradation
    return _THRESHOLD if bad else _OK


def _cmd_report(config: ExperimentConfig, out: str, threads: int) -> int:
    merged = {"config": config.to_json_dict(), "reports": {}}
    for name in sorted(os.listdir(out)):
        if not name.endswith(".json") or name == "report.json":
            continue
        with open(os.path.join(out, name)) as fh:
            merged["reports"][name[:-5]] = json.load(fh)
    _write_json(os.path.join(out, "report.json"), merged)
    return _OK


_COMMANDS = {
    "env": _cmd_env,
    "stats": _cmd_stats,
    "correctors": _cmd_correctors,
    "tensors": _cmd_tensors,
    "rates": _cmd_rates,
    "walk": _cmd_walk,
    "expansion": _cmd_expansion,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="homog",
        description="Difference-operator homogenization experiments")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None,
                        help="JSON experiment configuration")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config base seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for (R, seed) cells")
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](config, args.out, args.threads)
    except BrokenPipeError:
        raise
    except Exception as exc:  # CLI boundary: fold failures into exit 1
        print(f"homog {args.command}: {exc}", file=sys.stderr)
        return _ERROR


if __name__ == "__main__":
    sys.exit(main())
