"""
Command-line entry point: simulate, fit, summarize, compare and bench
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from config import CHAIN_PRESETS, DEFAULT_PRESET, DENSITY_BINS, FLOAT_FORMAT, LOG_LEVEL, MANIFEST_VERSION, PROPOSAL_SCALE, WORKERS
from consensus import ensemble_output, run_consensus
from data_io import generate, ingest, load_schema, read_chain, read_key_values, write_chain, write_ensemble, write_key_values, write_synthetic
from diagnostics import bench_table, compare, density_frame, summarize, summary_frame, sweep_table
from errors import ConfigurationError, ExitCode, LogitMCMCError, UsageError
from likelihood_estimator import build_index, resolve_subsample_size
from models import ChainOutput, ConsensusEnsemble, Dataset, Method, PriorSpec, ProposalSpec, RunManifest, SyntheticSpec
from samplers import mh_run, subsampling_mh_run, two_stage_mh_run

logger = logging.getLogger(__name__)

SYNTHETIC_KEYS = ("n", "l", "sparsity_target", "seed", "true_beta")
LIST_KEYS = ("init", "true_beta")


class CLIParser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; usage errors here exit with 1"""

    def error(self, message: str) -> None:
        raise UsageError(message)


# Manifest loading
def _parse_list(value: str) -> List[float]:
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated list of numbers, got {value!r}")


def load_manifest_file(path: str) -> Dict[str, Any]:
    """Versioned key = value manifest; synthetic.* keys describe generated data"""
    entries = read_key_values(path, ConfigurationError)
    version, line = entries.pop("manifest_version", ("", None))
    if version != str(MANIFEST_VERSION):
        raise ConfigurationError(f"{path}: unsupported manifest_version {version!r}, expected {MANIFEST_VERSION}")
    values: Dict[str, Any] = {}
    synthetic: Dict[str, Any] = {}
    for key, (value, _) in entries.items():
        target, name = (synthetic, key[len("synthetic."):]) if key.startswith("synthetic.") else (values, key)
        target[name] = _parse_list(value) if name in LIST_KEYS else value
    if synthetic:
        values["synthetic"] = synthetic
    if "schema" in values:
        values["schema_path"] = values.pop("schema")
    return values


def _cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {
        "method": args.method,
        "data": args.data,
        "schema_path": args.schema,
        "preset": args.preset,
        "iterations": args.iterations,
        "burnin": args.burnin,
        "thinning": args.thinning,
        "seed": args.seed,
        "init": _parse_list(args.init) if args.init else None,
        "prior_variance": args.prior_variance,
        "intercept_variance": args.intercept_variance,
        "proposal_scale": args.proposal_scale,
        "adapt": False if args.no_adapt else None,
        "target_acceptance": args.target_acceptance,
        "subsample_size": args.subsample_size,
        "subsample_fraction": args.subsample_fraction,
        "refresh_every": args.refresh_every,
        "partitions": args.partitions,
        "workers": args.workers,
        "output": args.output,
        "label": args.label,
    }
    overrides = {key: value for key, value in flags.items() if value is not None}
    synthetic = {
        "n": args.n, "l": args.l, "sparsity_target": args.sparsity,
        "seed": args.data_seed, "true_beta": _parse_list(args.true_beta) if args.true_beta else None,
    }
    synthetic = {key: value for key, value in synthetic.items() if value is not None}
    if synthetic:
        overrides["synthetic"] = synthetic
    return overrides


def build_manifest(values: Dict[str, Any]) -> RunManifest:
    """Apply the chain preset and defaults, then validate"""
    values = dict(values)
    preset_name = values.pop("preset", None)
    if preset_name is None and "iterations" not in values:
        preset_name = DEFAULT_PRESET
    if preset_name is not None:
        if preset_name not in CHAIN_PRESETS:
            raise ConfigurationError(f"unknown preset '{preset_name}', expected one of {sorted(CHAIN_PRESETS)}")
        preset = CHAIN_PRESETS[preset_name]
        for key in ("iterations", "burnin", "thinning"):
            values.setdefault(key, preset[key])
        if preset["note"]:
            values.setdefault("preset_note", preset["note"])
    values.setdefault("proposal_scale", PROPOSAL_SCALE)
    values.setdefault("workers", WORKERS)
    if isinstance(values.get("adapt"), str):
        values["adapt"] = values["adapt"].strip().lower() in ("true", "1", "yes")
    return RunManifest(**values)


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    values: Dict[str, Any] = load_manifest_file(args.config) if getattr(args, "config", None) else {}
    overrides = _cli_overrides(args)
    if "synthetic" in overrides and "synthetic" in values:
        overrides["synthetic"] = {**values["synthetic"], **overrides["synthetic"]}
    if "data" in overrides:
        values.pop("synthetic", None)
    if "synthetic" in overrides:
        values.pop("data", None)
        values.pop("schema_path", None)
    values.update(overrides)
    return build_manifest(values)


def write_manifest(manifest: RunManifest, path: str) -> None:
    """Resolved manifest, reloadable with --config"""
    entries: Dict[str, object] = {"manifest_version": MANIFEST_VERSION}
    for key, value in manifest.model_dump(exclude_none=True, mode="json").items():
        if key == "synthetic":
            for name, item in value.items():
                if item is not None:
                    entries[f"synthetic.{name}"] = ",".join(FLOAT_FORMAT % v for v in item) if name in LIST_KEYS else item
        elif key == "schema_path":
            entries["schema"] = value
        elif key in LIST_KEYS:
            entries[key] = ",".join(FLOAT_FORMAT % v for v in value)
        else:
            entries[key] = value
    write_key_values(path, entries)


# Fitting
def load_dataset(manifest: RunManifest, on_unknown_level: str = "drop") -> Dataset:
    if manifest.synthetic is not None:
        return generate(manifest.synthetic).dataset
    return ingest(manifest.data, load_schema(manifest.schema_path), on_unknown_level=on_unknown_level)


def build_prior(manifest: RunManifest, dataset: Dataset) -> PriorSpec:
    if manifest.intercept_variance is not None and dataset.feature_names[0] != "intercept":
        raise ConfigurationError("intercept_variance given but the design has no intercept column")
    return PriorSpec.isotropic(
        dataset.n_features, manifest.prior_variance, intercept_variance=manifest.intercept_variance,
    )


def run_manifest(
    manifest: RunManifest,
    dataset: Optional[Dataset] = None,
) -> Tuple[ChainOutput, Optional[ConsensusEnsemble]]:
    """Dispatch a manifest to its sampler"""
    dataset = dataset if dataset is not None else load_dataset(manifest)
    prior = build_prior(manifest, dataset)
    proposal = ProposalSpec.isotropic(
        dataset.n_features, manifest.proposal_scale,
        adapt_burnin=manifest.adapt, target_acceptance=manifest.target_acceptance,
    )
    config = manifest.chain_config()
    method = manifest.method
    a = None
    if method.uses_subsample:
        a = resolve_subsample_size(build_index(dataset), manifest.subsample_size, manifest.subsample_fraction)

    logger.info("fitting %s on %d rows x %d coefficients", method.value, dataset.n_rows, dataset.n_features)
    if method in (Method.MH, Method.PARALLEL_MH):
        return mh_run(dataset, prior, proposal, config, workers=manifest.workers, method=method), None
    if method is Method.SUBSAMPLE:
        return subsampling_mh_run(dataset, prior, proposal, config, a, refresh=manifest.refresh_every, workers=manifest.workers), None
    if method is Method.TWO_STAGE:
        return two_stage_mh_run(dataset, prior, proposal, config, a, refresh=manifest.refresh_every, workers=manifest.workers), None
    ensemble = run_consensus(
        dataset, prior, proposal, config, manifest.partitions,
        kernel=method, a=a, refresh=manifest.refresh_every, workers=manifest.workers,
    )
    return ensemble_output(ensemble, method, workers=manifest.workers), ensemble


def _print_frame(frame: pd.DataFrame) -> None:
    print(frame.to_string(index=False))


# Commands
def cmd_simulate(args: argparse.Namespace) -> int:
    true_beta = _parse_list(args.true_beta) if args.true_beta else None
    spec = SyntheticSpec(n=args.n, l=args.l, sparsity_target=args.sparsity, seed=args.seed, true_beta=true_beta)
    result = generate(spec)
    paths = write_synthetic(result, args.output)
    print(json.dumps({
        **paths,
        "realized_fraction": result.realized_fraction,
        "bisection_steps": result.bisection_steps,
        "true_beta": result.true_beta.tolist(),
    }))
    return ExitCode.SUCCESS


def cmd_fit(args: argparse.Namespace) -> int:
    manifest = manifest_from_args(args)
    dataset = load_dataset(manifest, on_unknown_level=args.on_unknown_level)
    chain, ensemble = run_manifest(manifest, dataset)

    stem = manifest.output
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    write_chain(chain, stem)
    write_manifest(manifest, f"{stem}.manifest.txt")
    if ensemble is not None:
        write_ensemble(ensemble, stem)
    report = summarize(chain)
    summary = summary_frame(report)
    summary.to_csv(f"{stem}.summary.csv", index=False, float_format=FLOAT_FORMAT)
    density_frame({manifest.display_label: chain}, bins=args.bins).to_csv(
        f"{stem}.density.csv", index=False, float_format=FLOAT_FORMAT,
    )
    _print_frame(summary[["name", "mean", "sd", "q025", "q50", "q975", "ess", "mcse"]])
    return ExitCode.SUCCESS


def cmd_summarize(args: argparse.Namespace) -> int:
    chain = read_chain(args.chain)
    stem = args.output or args.chain
    summary = summary_frame(summarize(chain))
    summary.to_csv(f"{stem}.summary.csv", index=False, float_format=FLOAT_FORMAT)
    density_frame({chain.method: chain}, bins=args.bins).to_csv(
        f"{stem}.density.csv", index=False, float_format=FLOAT_FORMAT,
    )
    _print_frame(summary)
    return ExitCode.SUCCESS


def cmd_compare(args: argparse.Namespace) -> int:
    labels = args.labels.split(",") if args.labels else list(args.chains)
    if len(labels) != len(args.chains):
        raise UsageError(f"{len(labels)} labels for {len(args.chains)} runs")
    if len(set(labels)) != len(labels):
        raise UsageError("run labels must be distinct")
    chains = {label: read_chain(stem) for label, stem in zip(labels, args.chains)}
    aligned, pairs = compare(chains)
    aligned.to_csv(f"{args.output}.summary.csv", index=False, float_format=FLOAT_FORMAT)
    pairs.to_csv(f"{args.output}.compare.csv", index=False, float_format=FLOAT_FORMAT)
    density_frame(chains, bins=args.bins).to_csv(f"{args.output}.density.csv", index=False, float_format=FLOAT_FORMAT)
    _print_frame(pairs)
    return ExitCode.SUCCESS


def cmd_bench(args: argparse.Namespace) -> int:
    if args.repeat < 3:
        raise UsageError(f"--repeat must be at least 3, got {args.repeat}")
    runs = []
    two_stage: Optional[Tuple[RunManifest, Dataset]] = None
    for path in args.configs:
        manifest = build_manifest(load_manifest_file(path))
        dataset = load_dataset(manifest)
        repeats = [run_manifest(manifest, dataset)[0] for _ in range(args.repeat)]
        runs.append((manifest.display_label, repeats))
        if manifest.method is Method.TWO_STAGE and two_stage is None:
            two_stage = (manifest, dataset)

    table = bench_table(runs)
    table.to_csv(f"{args.output}.bench.csv", index=False, float_format=FLOAT_FORMAT)
    _print_frame(table)

    if args.fractions:
        if two_stage is None:
            raise UsageError("--fractions needs a two-stage manifest among the benchmarked runs")
        manifest, dataset = two_stage
        sweep = []
        for fraction in _parse_list(args.fractions):
            variant = manifest.model_copy(update={"subsample_size": None, "subsample_fraction": fraction})
            sweep.append((fraction, run_manifest(variant, dataset)[0]))
        sweep_frame = sweep_table(sweep)
        sweep_frame.to_csv(f"{args.output}.sweep.csv", index=False, float_format=FLOAT_FORMAT)
        _print_frame(sweep_frame)
    return ExitCode.SUCCESS


def build_parser() -> argparse.ArgumentParser:
    parser = CLIParser(prog="logit-mcmc", description="Exact and scalable MCMC for Bayesian logistic classification")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level for stderr")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CLIParser)

    simulate = commands.add_parser("simulate", help="generate a synthetic sparse-outcome dataset")
    simulate.add_argument("--n", type=int, required=True, help="rows")
    simulate.add_argument("--l", type=int, required=True, help="coefficients, intercept included")
    simulate.add_argument("--sparsity", type=float, required=True, help="target success fraction")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--true-beta", help="comma-separated coefficients; the intercept is recalibrated")
    simulate.add_argument("--output", required=True, help="output stem")
    simulate.set_defaults(handler=cmd_simulate)

    fit = commands.add_parser("fit", help="run one sampler and write draws, metadata and a summary")
    fit.add_argument("--config", help="manifest file; flags override its values")
    fit.add_argument("--method", choices=[m.value for m in Method])
    fit.add_argument("--data", help="comma-delimited data file")
    fit.add_argument("--schema", help="schema file for --data")
    fit.add_argument("--n", type=int, help="synthetic rows")
    fit.add_argument("--l", type=int, help="synthetic coefficients")
    fit.add_argument("--sparsity", type=float, help="synthetic success fraction")
    fit.add_argument("--data-seed", type=int, help="synthetic data seed")
    fit.add_argument("--true-beta", help="synthetic coefficients")
    fit.add_argument("--preset", choices=sorted(CHAIN_PRESETS))
    fit.add_argument("--iterations", type=int)
    fit.add_argument("--burnin", type=int)
    fit.add_argument("--thinning", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--init", help="comma-separated starting coefficients")
    fit.add_argument("--prior-variance", type=float)
    fit.add_argument("--intercept-variance", type=float)
    fit.add_argument("--proposal-scale", type=float, help="random-walk step variance per coefficient")
    fit.add_argument("--no-adapt", action="store_true", help="keep the proposal scale fixed during burn-in")
    fit.add_argument("--target-acceptance", type=float)
    fit.add_argument("--subsample-size", type=int, help="a, rows drawn from the majority class")
    fit.add_argument("--subsample-fraction", type=float, help="a as a fraction of the majority class")
    fit.add_argument("--refresh-every", type=int, help="redraw the subsample every K iterations")
    fit.add_argument("--partitions", type=int, help="p, for consensus methods")
    fit.add_argument("--workers", type=int)
    fit.add_argument("--output", help="output stem")
    fit.add_argument("--label")
    fit.add_argument("--on-unknown-level", choices=["drop", "abort"], default="drop")
    fit.add_argument("--bins", type=int, default=DENSITY_BINS)
    fit.set_defaults(handler=cmd_fit)

    summarize_cmd = commands.add_parser("summarize", help="summarize a written chain")
    summarize_cmd.add_argument("chain", help="chain stem (<stem>.draws.csv + <stem>.meta.txt)")
    summarize_cmd.add_argument("--output", help="output stem, defaults to the chain stem")
    summarize_cmd.add_argument("--bins", type=int, default=DENSITY_BINS)
    summarize_cmd.set_defaults(handler=cmd_summarize)

    compare_cmd = commands.add_parser("compare", help="compare two or more written chains")
    compare_cmd.add_argument("chains", nargs="+", help="chain stems")
    compare_cmd.add_argument("--labels", help="comma-separated run labels")
    compare_cmd.add_argument("--output", required=True, help="output stem")
    compare_cmd.add_argument("--bins", type=int, default=DENSITY_BINS)
    compare_cmd.set_defaults(handler=cmd_compare)

    bench = commands.add_parser("bench", help="time manifests and tabulate speed ratios")
    bench.add_argument("configs", nargs="+", help="manifest files")
    bench.add_argument("--repeat", type=int, default=3)
    bench.add_argument("--fractions", help="comma-separated subsample fractions for a two-stage sweep")
    bench.add_argument("--output", required=True, help="output stem")
    bench.set_defaults(handler=cmd_bench)
    return parser


def _error_line(record: Dict[str, Any]) -> None:
    sys.stderr.write(json.dumps(record) + "\n")


def _report(exc: BaseException, code: ExitCode) -> int:
    _error_line({"error": type(exc).__name__, "exit_code": int(code), "detail": str(exc)})
    return int(code)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=args.log_level.upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        return int(args.handler(args))
    except LogitMCMCError as exc:
        _error_line(exc.to_record())
        return int(exc.exit_code)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first.get("loc", ()))
        detail = f"{location}: {first['msg']}" if location else first["msg"]
        _error_line({"error": "ValidationError", "exit_code": int(ExitCode.USAGE), "detail": detail})
        return int(ExitCode.USAGE)
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        return _report(exc, ExitCode.NUMERICAL)
    except ValueError as exc:
        return _report(exc, ExitCode.USAGE)
    except OSError as exc:
        return _report(exc, ExitCode.DATA)
    except Exception as exc:
        logger.debug("unhandled error", exc_info=True)
        return _report(exc, ExitCode.NUMERICAL)


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
