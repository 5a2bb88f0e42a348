"""
Dataset ingestion, synthetic data generation and chain serialization
"""
import logging
import os
from typing import Dict, List, Optional, Tuple, Type

import numpy as np
import pandas as pd
from dotenv.parser import parse_stream
from pydantic import ValidationError
from scipy.special import expit

from config import FLOAT_FORMAT, META_VERSION, SCHEMA_VERSION
from errors import ChainParseError, GenerationError, IngestionError, LogitMCMCError, SchemaError
from model_core import derive_rng
from models import CategoricalFeature, ChainOutput, ConsensusEnsemble, Dataset, SchemaSpec, SyntheticResult, SyntheticSpec

logger = logging.getLogger(__name__)

MAX_BISECTION_STEPS = 100
INTERCEPT_BRACKET = (-50.0, 50.0)
SPARSITY_TOLERANCE = 0.2

COUNTER_FIELDS = (
    "stage1_proposals", "stage1_promotions", "stage2_accepts",
    "exact_evals", "approx_evals",
)


# Key = value text files
def read_key_values(path: str, error: Type[LogitMCMCError] = ChainParseError) -> Dict[str, Tuple[str, int]]:
    """Parse a key = value file into {key: (value, line)}"""
    if not os.path.exists(path):
        raise error(f"file not found: {path}")
    entries: Dict[str, Tuple[str, int]] = {}
    with open(path, encoding="utf-8") as stream:
        for binding in parse_stream(stream):
            line = binding.original.line
            if binding.error:
                raise _at_line(error, f"malformed line {binding.original.string.strip()!r}", line)
            if binding.key is None:
                continue
            if binding.key in entries:
                raise _at_line(error, f"duplicate key '{binding.key}'", line)
            entries[binding.key] = (binding.value or "", line)
    return entries


def _at_line(error: Type[LogitMCMCError], detail: str, line: Optional[int]) -> LogitMCMCError:
    if error is ChainParseError:
        return ChainParseError(detail, line=line)
    return error(f"line {line}: {detail}" if line is not None else detail)


def _quote(value: object) -> str:
    text = str(value).replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{text}"'


def write_key_values(path: str, entries: Dict[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as stream:
        for key, value in entries.items():
            stream.write(f"{key} = {_quote(value)}\n")


def _split_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


# Schema files
def load_schema(path: str) -> SchemaSpec:
    """Read a versioned schema file.

    schema_version = 1
    response = outcome
    positive_label = yes
    numeric = age, balance
    categorical.contact = nonexistent: nonexistent, failure, success
    intercept = true
    """
    entries = read_key_values(path, SchemaError)
    version, line = entries.get("schema_version", ("", None))
    if version != str(SCHEMA_VERSION):
        raise _at_line(SchemaError, f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}", line)

    categorical = []
    for key, (value, line) in entries.items():
        if not key.startswith("categorical."):
            continue
        reference, sep, levels = value.partition(":")
        if not sep:
            raise _at_line(SchemaError, f"'{key}' must read 'reference: level, level, ...'", line)
        try:
            categorical.append(CategoricalFeature(
                column=key[len("categorical."):], reference=reference.strip(), levels=_split_list(levels),
            ))
        except ValidationError as exc:
            raise _at_line(SchemaError, exc.errors()[0]["msg"], line)

    for required in ("response", "positive_label"):
        if required not in entries:
            raise SchemaError(f"schema is missing '{required}'")
    try:
        return SchemaSpec(
            response=entries["response"][0],
            positive_label=entries["positive_label"][0],
            numeric_features=_split_list(entries.get("numeric", ("", 0))[0]),
            categorical_features=categorical,
            intercept=entries.get("intercept", ("true", 0))[0].strip().lower() in ("true", "1", "yes"),
        )
    except ValidationError as exc:
        raise SchemaError(exc.errors()[0]["msg"])


def write_schema(schema: SchemaSpec, path: str) -> None:
    entries: Dict[str, object] = {
        "schema_version": SCHEMA_VERSION,
        "response": schema.response,
        "positive_label": schema.positive_label,
        "numeric": ", ".join(schema.numeric_features),
        "intercept": "true" if schema.intercept else "false",
    }
    for feature in schema.categorical_features:
        entries[f"categorical.{feature.column}"] = f"{feature.reference}: {', '.join(feature.levels)}"
    write_key_values(path, entries)


# Ingestion
def ingest(path: str, schema: SchemaSpec, on_unknown_level: str = "drop") -> Dataset:
    """Build the design matrix for a comma-delimited file with a header row.

    Intercept first, numeric columns as given, then one indicator per
    non-reference categorical level. Rows with a missing value in any used
    column are dropped and counted; rows with an unknown categorical level are
    dropped and counted, or abort ingestion when on_unknown_level is "abort".
    """
    if on_unknown_level not in ("drop", "abort"):
        raise IngestionError(f"unknown-level policy must be 'drop' or 'abort', got '{on_unknown_level}'")
    if not os.path.exists(path):
        raise IngestionError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot parse {path}: {exc}")

    missing_columns = [column for column in schema.used_columns if column not in frame.columns]
    if missing_columns:
        raise SchemaError(f"unknown column(s) {missing_columns} in {path}")
    rows_read = len(frame)
    frame = frame[schema.used_columns].apply(lambda column: column.str.strip())
    # header is line 1
    frame.index = pd.RangeIndex(2, rows_read + 2)

    incomplete = frame.isna().any(axis=1) | (frame == "").any(axis=1)
    dropped_missing = int(incomplete.sum())
    frame = frame[~incomplete]

    unknown = pd.Series(False, index=frame.index)
    for feature in schema.categorical_features:
        bad = ~frame[feature.column].isin(feature.levels)
        if bad.any() and on_unknown_level == "abort":
            line = int(bad.idxmax())
            raise IngestionError(
                f"line {line}: unknown level {frame.at[line, feature.column]!r} for '{feature.column}'"
            )
        unknown |= bad
    dropped_unknown = int(unknown.sum())
    frame = frame[~unknown]

    if dropped_missing or dropped_unknown:
        logger.warning(
            "dropped %d row(s) with missing values and %d with unknown levels from %s",
            dropped_missing, dropped_unknown, path,
        )
    if frame.empty:
        raise IngestionError(f"no usable rows in {path}")

    columns = []
    if schema.intercept:
        columns.append(np.ones(len(frame)))
    for name in schema.numeric_features:
        values = pd.to_numeric(frame[name], errors="coerce")
        bad = values.isna() | ~np.isfinite(values)
        if bad.any():
            line = int(bad.idxmax())
            raise IngestionError(f"line {line}: '{name}' value {frame.at[line, name]!r} is not a finite number")
        columns.append(values.to_numpy(dtype=np.float64))
    for feature in schema.categorical_features:
        for level in feature.indicator_levels:
            columns.append((frame[feature.column] == level).to_numpy(dtype=np.float64))

    y = (frame[schema.response] == schema.positive_label).to_numpy(dtype=np.float64)
    logger.info("ingested %d of %d rows from %s (%d columns)", len(frame), rows_read, path, len(columns))
    return Dataset(
        X=np.column_stack(columns),
        y=y,
        feature_names=schema.feature_names(),
        provenance={
            "source": os.path.abspath(path),
            "rows_read": rows_read,
            "dropped_missing": dropped_missing,
            "dropped_unknown_level": dropped_unknown,
        },
    )


# Synthetic data
def generate(spec: SyntheticSpec) -> SyntheticResult:
    """Standard-normal covariates with a bisection-calibrated intercept.

    Uniforms are drawn once, so the success count is monotone in the
    intercept and bisection on it is exact.
    """
    rng = derive_rng(spec.seed, "generate")
    X = np.column_stack([np.ones(spec.n), rng.standard_normal((spec.n, spec.l - 1))])
    uniforms = rng.random(spec.n)
    beta = spec.coefficients()
    offset = X[:, 1:] @ beta[1:]
    wanted = spec.sparsity_target * spec.n

    def successes(intercept: float) -> int:
        return int(np.count_nonzero(uniforms < expit(intercept + offset)))

    low, high = INTERCEPT_BRACKET
    steps = 0
    intercept = 0.5 * (low + high)
    while steps < MAX_BISECTION_STEPS:
        steps += 1
        intercept = 0.5 * (low + high)
        count = successes(intercept)
        if abs(count - wanted) < 1.0:
            break
        if count < wanted:
            low = intercept
        else:
            high = intercept

    realized = successes(intercept) / spec.n
    if abs(realized - spec.sparsity_target) > SPARSITY_TOLERANCE * spec.sparsity_target:
        raise GenerationError(
            f"intercept calibration reached success fraction {realized:.4g} after {steps} steps; "
            f"target {spec.sparsity_target:.4g} (+/-{SPARSITY_TOLERANCE:.0%})"
        )
    beta[0] = intercept
    y = (uniforms < expit(X @ beta)).astype(np.float64)
    logger.info("generated %d rows, success fraction %.4f (target %.4f)", spec.n, realized, spec.sparsity_target)
    dataset = Dataset(
        X=X,
        y=y,
        feature_names=["intercept"] + [f"x{j}" for j in range(1, spec.l)],
        provenance={"synthetic_seed": spec.seed, "sparsity_target": spec.sparsity_target},
    )
    return SyntheticResult(dataset=dataset, true_beta=beta, realized_fraction=realized, bisection_steps=steps)


def write_synthetic(result: SyntheticResult, stem: str) -> Dict[str, str]:
    """CSV + schema + true coefficients, ready for ingest()"""
    dataset = result.dataset
    paths = {"data": f"{stem}.csv", "schema": f"{stem}.schema.txt", "truth": f"{stem}.truth.csv"}
    numeric = list(dataset.feature_names[1:])
    frame = pd.DataFrame(dataset.X[:, 1:], columns=numeric)
    frame.insert(0, "y", dataset.y.astype(int))
    frame.to_csv(paths["data"], index=False, float_format=FLOAT_FORMAT)
    write_schema(SchemaSpec(response="y", positive_label="1", numeric_features=numeric), paths["schema"])
    pd.DataFrame({"name": dataset.feature_names, "value": result.true_beta}).to_csv(
        paths["truth"], index=False, float_format=FLOAT_FORMAT,
    )
    return paths


# Chain files
def chain_paths(stem: str) -> Tuple[str, str]:
    return f"{stem}.draws.csv", f"{stem}.meta.txt"


def write_chain(output: ChainOutput, stem: str) -> Tuple[str, str]:
    """Write <stem>.draws.csv and the <stem>.meta.txt sidecar"""
    draws_path, meta_path = chain_paths(stem)
    pd.DataFrame(output.draws, columns=output.feature_names).to_csv(draws_path, index=False, float_format=FLOAT_FORMAT)

    meta: Dict[str, object] = {
        "meta_version": META_VERSION,
        "method": output.method,
        "feature_names": ",".join(output.feature_names),
        "iterations": output.iterations,
        "burnin": output.burnin,
        "thinning": output.thinning,
        "seed": output.seed,
    }
    for name in COUNTER_FIELDS:
        meta[name] = getattr(output, name)
    meta["stage2_probability_sum"] = FLOAT_FORMAT % output.stage2_probability_sum
    meta["wall_seconds"] = FLOAT_FORMAT % output.wall_seconds
    meta["target"] = output.target
    meta["proposal_scale"] = FLOAT_FORMAT % output.proposal_scale
    meta["workers"] = output.workers
    for key, value in output.subsample_meta.items():
        meta[f"subsample.{key}"] = FLOAT_FORMAT % value if isinstance(value, float) else value
    for key, value in output.notes.items():
        meta[f"note.{key}"] = value
    write_key_values(meta_path, meta)
    return draws_path, meta_path


def _meta_value(meta: Dict[str, Tuple[str, int]], key: str, cast: type, meta_path: str):
    if key not in meta:
        raise ChainParseError(f"{meta_path} is missing '{key}'")
    value, line = meta[key]
    try:
        return cast(value)
    except ValueError:
        raise ChainParseError(f"'{key}' value {value!r} is not a valid {cast.__name__}", line=line)


def _parse_scalar(value: str) -> object:
    if value in ("True", "False"):
        return value == "True"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_chain(stem: str) -> ChainOutput:
    draws_path, meta_path = chain_paths(stem)
    meta = read_key_values(meta_path, ChainParseError)
    version = _meta_value(meta, "meta_version", int, meta_path)
    if version != META_VERSION:
        raise ChainParseError(f"unsupported meta_version {version}", line=meta["meta_version"][1])
    feature_names = _split_list(_meta_value(meta, "feature_names", str, meta_path))

    if not os.path.exists(draws_path):
        raise ChainParseError(f"draws file not found: {draws_path}")
    try:
        raw = pd.read_csv(draws_path, dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ChainParseError(f"cannot parse {draws_path}: {exc}")
    if list(raw.columns) != feature_names:
        raise ChainParseError(f"header {list(raw.columns)} does not match feature names {feature_names}", line=1)
    values = raw.apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        raise ChainParseError(f"non-numeric draw in {draws_path}", line=int(np.flatnonzero(bad)[0]) + 2)
    # re-read numerically so every printed digit survives
    draws = pd.read_csv(draws_path, dtype=np.float64, float_precision="round_trip").to_numpy()

    fields = {
        "method": _meta_value(meta, "method", str, meta_path),
        "iterations": _meta_value(meta, "iterations", int, meta_path),
        "burnin": _meta_value(meta, "burnin", int, meta_path),
        "thinning": _meta_value(meta, "thinning", int, meta_path),
        "seed": _meta_value(meta, "seed", int, meta_path),
        "stage2_probability_sum": _meta_value(meta, "stage2_probability_sum", float, meta_path),
        "wall_seconds": _meta_value(meta, "wall_seconds", float, meta_path),
        "target": _meta_value(meta, "target", str, meta_path),
        "proposal_scale": _meta_value(meta, "proposal_scale", float, meta_path),
        "workers": _meta_value(meta, "workers", int, meta_path),
    }
    for name in COUNTER_FIELDS:
        fields[name] = _meta_value(meta, name, int, meta_path)
    subsample_meta = {key[len("subsample."):]: _parse_scalar(value) for key, (value, _) in meta.items() if key.startswith("subsample.")}
    notes = {key[len("note."):]: value for key, (value, _) in meta.items() if key.startswith("note.")}
    try:
        return ChainOutput(feature_names=feature_names, draws=draws, subsample_meta=subsample_meta, notes=notes, **fields)
    except ValidationError as exc:
        raise ChainParseError(f"{meta_path} is inconsistent with {draws_path}: {exc.errors()[0]['msg']}")


def write_ensemble(ensemble: ConsensusEnsemble, stem: str) -> Dict[str, str]:
    """Per-partition chains, weight matrices and the partition plan"""
    paths: Dict[str, str] = {}
    for i, chain in enumerate(ensemble.per_partition):
        paths[f"partition_{i}"] = write_chain(chain, f"{stem}.part{i}")[0]

    names = ensemble.per_partition[0].feature_names
    blocks = []
    for i, (weight, ridged) in enumerate(zip(ensemble.weights, ensemble.ridged)):
        block = pd.DataFrame(weight, columns=names)
        block.insert(0, "row", names)
        block.insert(0, "ridged", int(ridged))
        block.insert(0, "partition", i)
        blocks.append(block)
    paths["weights"] = f"{stem}.weights.csv"
    pd.concat(blocks, ignore_index=True).to_csv(paths["weights"], index=False, float_format=FLOAT_FORMAT)

    paths["partition"] = f"{stem}.partition.csv"
    pd.DataFrame({
        "row": np.arange(ensemble.plan.assignment.size),
        "partition": ensemble.plan.assignment,
    }).to_csv(paths["partition"], index=False)
    return paths
