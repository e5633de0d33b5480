#!/usr/bin/env python3
"""
╔═══════════════════════════════════════════════════════════════════════════════╗
║                          BRWRE Workbench v1.0.0                               ║
║        Branching random walks in random environment: simulate and verify      ║
╚═══════════════════════════════════════════════════════════════════════════════╝

Command-line entry point:
- simulate / ensemble / clt-moments: trajectories and cross-replica summaries
- oracle second-moment / oracle quenched-mean: exact series
- check-condition / pi-d: the regular growth condition and its ingredients
- verify ze: pathwise Feynman-Kac identity over many seeds

Exit status: 0 on success, 2 on configuration errors, 3 on numeric aborts,
enumeration caps and output failures.

License: MIT
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from brwre_core import (
    CapError, ConfigError, DomainError, NumericAbortError, OutputError,
    PopulationOverflowError, RunConfig, __version__, configure_logging,
    index_label, load_run_config, read_config_file,
)
from brwre_env import EnvironmentField, check_regular_growth, load_environment
from brwre_kernels import DEFAULT_BUDGET, METHODS, TRUNCATED_GREEN, gaussian_moment, return_probability
from brwre_oracle import SERIES_METHODS, quenched_mean, two_walk_series, verify_zeta_identity
from brwre_sim import build_pipeline, run_trajectory
from brwre_stats import ALIVE
from ensemble_manager import EnsembleManager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

SUBCOMMANDS = (
    "simulate", "ensemble", "oracle second-moment", "oracle quenched-mean",
    "check-condition", "pi-d", "verify ze", "clt-moments",
)
ZETA_TOLERANCE = 1e-12
ZE_HORIZON = 3
OVERFLOW = "Overflow"


# ═══════════════════════════════════════════════════════════════════════════════
# OUTPUT
# ═══════════════════════════════════════════════════════════════════════════════

def _atomic_write(path: Path, data: bytes) -> None:
    """Write through a temp file in the same directory, then rename."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise OutputError(path, e.strerror or str(e)) from e


def csv_bytes(frame: pd.DataFrame) -> bytes:
    """Fixed column order, 17 significant digits, LF line endings."""
    return frame.to_csv(index=False, float_format='%.17g', lineterminator='\n').encode('utf-8')


def json_bytes(document: Any) -> bytes:
    return (json.dumps(document, indent=2, sort_keys=True, default=str) + "\n").encode('utf-8')


def write_outputs(
    outdir: Path,
    tables: Dict[str, pd.DataFrame],
    documents: Dict[str, Any],
    manifest: Dict[str, Any],
) -> Dict[str, str]:
    """
    Write CSV tables and JSON documents, then a manifest with their checksums.

    Args:
        outdir: Output directory (created if missing)
        tables: File name -> DataFrame
        documents: File name -> JSON-serializable document
        manifest: Manifest body; a 'checksums' entry is added

    Returns:
        File name -> sha256 of every artifact except the manifest

    Raises:
        OutputError: If any file cannot be written
    """
    outdir = Path(outdir)
    checksums: Dict[str, str] = {}
    for name, frame in tables.items():
        data = csv_bytes(frame)
        _atomic_write(outdir / name, data)
        checksums[name] = hashlib.sha256(data).hexdigest()
    for name, document in documents.items():
        data = json_bytes(document)
        _atomic_write(outdir / name, data)
        checksums[name] = hashlib.sha256(data).hexdigest()
    _atomic_write(outdir / 'manifest.json', json_bytes({**manifest, "checksums": checksums}))
    logger.info(f"Wrote {len(checksums) + 1} files to {outdir}")
    return checksums


def build_manifest(
    command: str,
    config: Optional[RunConfig],
    seeds: Dict[str, Any],
    status: Dict[str, Any],
    started: float,
    record_timing: bool,
    approx_sampling: bool = False,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Everything needed to reproduce the invocation."""
    manifest: Dict[str, Any] = {
        "tool": "brwre",
        "version": __version__,
        "command": command,
        "config": {k: v for k, v in config.to_dict().items() if k != 'output_dir'} if config else None,
        "seeds": seeds,
        "status": status,
        "approx_sampling": approx_sampling,
    }
    if extra:
        manifest.update(extra)
    if record_timing:
        manifest["wall_clock_seconds"] = time.perf_counter() - started
    return manifest


def _print_json(document: Any) -> None:
    sys.stdout.write(json_bytes(document).decode('utf-8'))


# ═══════════════════════════════════════════════════════════════════════════════
# CONFIGURATION
# ═══════════════════════════════════════════════════════════════════════════════

def _parse_tuple(text: str, kind: Callable = int) -> List[Any]:
    try:
        return [kind(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Cannot parse {text!r} as a comma-separated list") from e


def _index(text: str) -> List[int]:
    return _parse_tuple(text, int)


def _frequency(text: str) -> List[float]:
    return _parse_tuple(text, float)


def resolve_config(
    args: argparse.Namespace, command_defaults: Optional[Dict[str, Any]] = None
) -> Tuple[RunConfig, Optional[dict]]:
    """
    Bundled defaults < command defaults < --config file < command-line flags.

    A 'stats' table in the config file replaces the bundled plugin config.
    """
    file_data: Dict[str, Any] = {}
    if getattr(args, 'config', None):
        file_data = dict(read_config_file(Path(args.config)))
    stats_config = file_data.pop('stats', None)

    flags = {
        'dimension': getattr(args, 'dim', None),
        'horizon': getattr(args, 'horizon', None),
        'environment': getattr(args, 'env', None),
        'env_seed': getattr(args, 'env_seed', None),
        'particle_seed': getattr(args, 'particle_seed', None),
        'mode': getattr(args, 'mode', None),
        'replicas': getattr(args, 'replicas', None),
        'moment_indices': getattr(args, 'moment', None),
        'y_indices': getattr(args, 'y_index', None),
        'cosine_frequencies': getattr(args, 'cosine', None),
        'exact_threshold': getattr(args, 'exact_threshold', None),
        'genealogy_cap': getattr(args, 'genealogy_cap', None),
        'dp_radius': getattr(args, 'radius', None),
        'workers': getattr(args, 'workers', None),
        'output_dir': getattr(args, 'out', None),
    }
    overrides = {
        **(command_defaults or {}),
        **file_data,
        **{k: v for k, v in flags.items() if v is not None},
    }
    return load_run_config(None, overrides), stats_config


# ═══════════════════════════════════════════════════════════════════════════════
# COMMANDS
# ═══════════════════════════════════════════════════════════════════════════════

def cmd_simulate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config, stats_config = resolve_config(args)
    model = load_environment(config.environment)
    seeds = {"env_seed": config.env_seed, "particle_seed": config.particle_seed}
    extra = {"environment": model.to_dict()}

    try:
        result = run_trajectory(config, stats_config, model=model)
    except PopulationOverflowError as e:
        records = getattr(e, 'records', [])
        if records:
            columns = ['t'] + build_pipeline(config, model, stats_config).columns() + ['status']
            frame = pd.DataFrame([r.to_row(columns) for r in records], columns=columns)
            manifest = build_manifest(
                "simulate", config, seeds, {"trajectory": OVERFLOW, "overflow_t": e.t},
                started, args.record_timing, extra=extra,
            )
            write_outputs(Path(config.output_dir), {"trajectory.csv": frame}, {}, manifest)
        raise

    manifest = build_manifest(
        "simulate", config, seeds, {"trajectory": result.status, "final_t": len(result.records) - 1},
        started, args.record_timing, approx_sampling=result.approx_sampling, extra=extra,
    )
    write_outputs(Path(config.output_dir), {"trajectory.csv": result.to_frame()}, {}, manifest)
    return EXIT_OK


def cmd_ensemble(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config, stats_config = resolve_config(args)
    manager = EnsembleManager(config, stats_config)
    summary = manager.run()

    tables = {"summary.csv": summary.to_frame()}
    if args.keep_replicas:
        tables["replicas.csv"] = manager.frame
    manifest = build_manifest(
        "ensemble", config,
        {"env_seed": config.env_seed, "particle_seed": config.particle_seed,
         "replica_seeds": "SeedSequence([env_seed, particle_seed]).spawn(replicas)"},
        {"replicas": config.replicas, "failed": len(summary.failures),
         "final_survival": float(summary.survival.iloc[-1])},
        started, args.record_timing, approx_sampling=summary.approx_sampling,
    )
    write_outputs(Path(config.output_dir), tables, {"summary.json": summary.to_dict()}, manifest)
    return EXIT_OK


def cmd_clt_moments(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config, stats_config = resolve_config(args)
    manager = EnsembleManager(config, stats_config)
    summary = manager.run()

    t = config.horizon
    frame = manager.frame
    final = frame[(frame['t'] == t) & (frame['status'] == ALIVE)]
    rows = []
    for n in config.moment_indices:
        column = f'Mrho_{index_label(n)}'
        if column not in final.columns:
            raise ConfigError(f"Column {column} missing; enable density_normalized for CltMoments")
        values = final[column].astype(float)
        survivors = int(values.count())
        mean = float(values.mean()) if survivors else float('nan')
        se = float(values.std(ddof=1) / survivors ** 0.5) if survivors > 1 else float('nan')
        limit = float(gaussian_moment(n, config.dimension))
        rows.append({
            "index": index_label(n),
            "t": t,
            "survivors": survivors,
            "cond_mean": mean,
            "cond_se": se,
            "gaussian_limit": limit,
            "rel_error": abs(mean - limit) / limit if limit else float('nan'),
        })
    table = pd.DataFrame(rows, columns=["index", "t", "survivors", "cond_mean", "cond_se",
                                        "gaussian_limit", "rel_error"])
    manifest = build_manifest(
        "clt-moments", config,
        {"env_seed": config.env_seed, "particle_seed": config.particle_seed},
        {"replicas": config.replicas, "failed": len(summary.failures),
         "survivors": int(len(final))},
        started, args.record_timing, approx_sampling=summary.approx_sampling,
    )
    write_outputs(
        Path(config.output_dir),
        {"clt_moments.csv": table, "summary.csv": summary.to_frame()},
        {"summary.json": summary.to_dict()},
        manifest,
    )
    return EXIT_OK


def cmd_second_moment(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config, _ = resolve_config(args)
    if config.horizon < 1:
        raise ConfigError("second-moment needs --horizon >= 1")
    model = load_environment(config.environment)
    series = two_walk_series(model, config.dimension, config.horizon, method=args.method, radius=config.dp_radius)
    manifest = build_manifest(
        "oracle second-moment", config, {}, {"method": series.method, "truncated_mass": series.truncated_mass},
        started, args.record_timing, extra={"environment": model.to_dict()},
    )
    write_outputs(Path(config.output_dir), {"second_moment.csv": series.to_frame()}, {}, manifest)
    return EXIT_OK


def cmd_quenched_mean(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config, _ = resolve_config(args)
    model = load_environment(config.environment)
    result = quenched_mean(EnvironmentField(model, config.env_seed), config.dimension, config.horizon)
    zbar = pd.DataFrame({'t': range(result.horizon + 1), 'zbar': result.zbar})
    manifest = build_manifest(
        "oracle quenched-mean", config, {"env_seed": config.env_seed}, {},
        started, args.record_timing, extra={"environment": model.to_dict()},
    )
    write_outputs(
        Path(config.output_dir),
        {"quenched_mean.csv": result.to_frame(), "zbar.csv": zbar},
        {},
        manifest,
    )
    return EXIT_OK


def cmd_check_condition(args: argparse.Namespace) -> int:
    config, _ = resolve_config(args)
    model = load_environment(config.environment)
    estimate = return_probability(config.dimension, budget=args.budget)
    report = check_regular_growth(model, config.dimension, estimate.value)
    document = {**report.to_dict(), "d": config.dimension, "pi_method": estimate.method}
    _print_json(document)
    return EXIT_OK


def cmd_pi_d(args: argparse.Namespace) -> int:
    config, _ = resolve_config(args)
    estimate = return_probability(config.dimension, budget=args.budget, method=args.method, walks=args.walks, seed=args.seed)
    _print_json(estimate.to_dict())
    return EXIT_OK


def cmd_verify_ze(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config, _ = resolve_config(args, command_defaults={"horizon": ZE_HORIZON})
    model = load_environment(config.environment)
    worst = 0.0
    worst_aggregated = 0.0
    failed: List[int] = []
    for i in range(args.seeds):
        field = EnvironmentField(model, config.env_seed + i)
        check = verify_zeta_identity(
            field, config.particle_seed + i, config.dimension, config.horizon, path_cap=config.path_cap
        )
        worst = max(worst, check.max_error)
        worst_aggregated = max(worst_aggregated, check.aggregated_error)
        if max(check.max_error, check.aggregated_error) >= args.tolerance:
            failed.append(i)
    document = {
        "max_error": worst,
        "aggregated_max_error": worst_aggregated,
        "seeds": args.seeds,
        "seeds_failed": failed,
        "tolerance": args.tolerance,
    }
    _print_json(document)
    if args.out:
        manifest = build_manifest(
            "verify ze", config,
            {"env_seeds": [config.env_seed, config.env_seed + args.seeds - 1],
             "particle_seeds": [config.particle_seed, config.particle_seed + args.seeds - 1]},
            {"seeds_failed": len(failed)}, started, args.record_timing,
        )
        write_outputs(Path(config.output_dir), {}, {"zeta.json": document}, manifest)
    return EXIT_OK


# ═══════════════════════════════════════════════════════════════════════════════
# ARGUMENT PARSING
# ═══════════════════════════════════════════════════════════════════════════════

def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--env', help="Preset name or environment spec file")
    parser.add_argument('--dim', type=int, help="Lattice dimension d")
    parser.add_argument('--horizon', type=int, help="Number of time steps T")
    parser.add_argument('--env-seed', type=int, help="Environment field seed")
    parser.add_argument('--particle-seed', type=int, help="Particle stream seed")
    parser.add_argument('--out', help="Output directory")
    parser.add_argument('--record-timing', action='store_true', help="Record wall-clock time in the manifest")


def _add_stat_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--mode', choices=['aggregate', 'genealogy'])
    parser.add_argument('--moment', type=_index, action='append', help="CLT moment multi-index, e.g. 2,0,0")
    parser.add_argument('--y-index', type=_index, action='append', help="Y_n multi-index, e.g. 2,0,0")
    parser.add_argument('--cosine', type=_frequency, action='append', help="Cosine frequency, e.g. 1,0,0")
    parser.add_argument('--exact-threshold', type=int, help="Largest count sampled with exact multinomials")
    parser.add_argument('--genealogy-cap', type=int, help="Largest population in genealogy mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='brwre',
        description="Branching random walk in random environment: simulator and exact oracles",
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', help="DEBUG, INFO, WARNING or ERROR (default: $BRWRE_LOG_LEVEL or WARNING)")
    parser.add_argument('--log-file', help="Also log to this file")
    parser.add_argument('--config', help="JSON or TOML run configuration")
    commands = parser.add_subparsers(dest='command', metavar='{' + ','.join(SUBCOMMANDS) + '}')
    commands.required = True

    simulate = commands.add_parser('simulate', help="One trajectory")
    _add_run_flags(simulate)
    _add_stat_flags(simulate)
    simulate.set_defaults(handler=cmd_simulate)

    ensemble = commands.add_parser('ensemble', help="Independent replicas and their summary")
    _add_run_flags(ensemble)
    _add_stat_flags(ensemble)
    ensemble.add_argument('--replicas', type=int)
    ensemble.add_argument('--workers', type=int, help="Worker processes (capped by $BRWRE_THREADS)")
    ensemble.add_argument('--keep-replicas', action='store_true', help="Also write every replica's records")
    ensemble.set_defaults(handler=cmd_ensemble)

    clt = commands.add_parser('clt-moments', help="Survival-conditioned CLT moments against the Gaussian limit")
    _add_run_flags(clt)
    _add_stat_flags(clt)
    clt.add_argument('--replicas', type=int)
    clt.add_argument('--workers', type=int)
    clt.set_defaults(handler=cmd_clt_moments)

    oracle = commands.add_parser('oracle', help="Exact series")
    oracle_commands = oracle.add_subparsers(dest='oracle_command', metavar='{second-moment,quenched-mean}')
    oracle_commands.required = True
    second = oracle_commands.add_parser('second-moment', help="Two-walk second-moment series")
    _add_run_flags(second)
    second.add_argument('--method', choices=SERIES_METHODS, default='auto')
    second.add_argument('--radius', type=int, help="DP box half-width")
    second.set_defaults(handler=cmd_second_moment)
    quenched = oracle_commands.add_parser('quenched-mean', help="Quenched mean by transfer")
    _add_run_flags(quenched)
    quenched.set_defaults(handler=cmd_quenched_mean)

    condition = commands.add_parser('check-condition', help="Regular growth verdict")
    condition.add_argument('--env', help="Preset name or environment spec file")
    condition.add_argument('--dim', type=int, help="Lattice dimension d")
    condition.add_argument('--budget', type=int, default=DEFAULT_BUDGET)
    condition.set_defaults(handler=cmd_check_condition)

    pi_d = commands.add_parser('pi-d', help="Return probability of the simple walk")
    pi_d.add_argument('--dim', type=int, help="Lattice dimension d")
    pi_d.add_argument('--budget', type=int, default=DEFAULT_BUDGET)
    pi_d.add_argument('--method', choices=METHODS, default=TRUNCATED_GREEN)
    pi_d.add_argument('--walks', type=int, default=100_000)
    pi_d.add_argument('--seed', type=int, default=0)
    pi_d.set_defaults(handler=cmd_pi_d)

    verify = commands.add_parser('verify', help="Pathwise identities")
    verify_commands = verify.add_subparsers(dest='verify_command', metavar='{ze}')
    verify_commands.required = True
    ze = verify_commands.add_parser('ze', help="Feynman-Kac representation over many seeds")
    _add_run_flags(ze)
    ze.add_argument('--seeds', type=int, default=100)
    ze.add_argument('--tolerance', type=float, default=ZETA_TOLERANCE)
    ze.set_defaults(handler=cmd_verify_ze)

    return parser


# ═══════════════════════════════════════════════════════════════════════════════
# ENTRY POINT
# ═══════════════════════════════════════════════════════════════════════════════

def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run one subcommand and map errors to exit codes.

    Returns:
        0 on success, 2 on configuration/usage errors, 3 on numeric aborts,
        caps and output errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_CONFIG

    configure_logging(args.log_level, args.log_file)
    try:
        return args.handler(args)
    except (ConfigError, DomainError) as e:
        logger.error(f"Configuration error: {e}")
        sys.stderr.write(f"brwre: error: {e}\n")
        return EXIT_CONFIG
    except (NumericAbortError, CapError, OutputError) as e:
        logger.error(f"Aborted: {e}")
        sys.stderr.write(f"brwre: aborted: {e}\n")
        return EXIT_NUMERIC


def main():
    """Main entry point."""
    sys.exit(run_command())


if __name__ == "__main__":
    main()
