"""
Pydantic models for the logistic MCMC toolkit
"""
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from config import ADAPT_INTERVAL, CHAIN_PRESETS, PRIOR_VARIANCE, TARGET_ACCEPTANCE


def _frozen_array(value: Any, dtype: Any, ndim: int, name: str) -> np.ndarray:
    array = np.array(value, dtype=dtype, copy=True, order="C")
    if array.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    array.setflags(write=False)
    return array


class Method(str, Enum):
    MH = "mh"
    PARALLEL_MH = "parallel-mh"
    SUBSAMPLE = "subsample"
    TWO_STAGE = "two-stage"
    CONSENSUS = "consensus"
    CONSENSUS_TWO_STAGE = "consensus-two-stage"

    @property
    def is_consensus(self) -> bool:
        return self in (Method.CONSENSUS, Method.CONSENSUS_TWO_STAGE)

    @property
    def uses_subsample(self) -> bool:
        return self in (Method.SUBSAMPLE, Method.TWO_STAGE, Method.CONSENSUS_TWO_STAGE)


# Model core types
class Dataset(BaseModel):
    """Dense design matrix paired with binary responses"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    X: np.ndarray
    y: np.ndarray
    feature_names: List[str]
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("X", mode="before")
    @classmethod
    def _coerce_x(cls, value: Any) -> np.ndarray:
        array = _frozen_array(value, np.float64, 2, "X")
        if not np.all(np.isfinite(array)):
            bad_row = int(np.flatnonzero(~np.isfinite(array).all(axis=1))[0])
            raise ValueError(f"X contains non-finite values (row {bad_row})")
        return array

    @field_validator("y", mode="before")
    @classmethod
    def _coerce_y(cls, value: Any) -> np.ndarray:
        array = _frozen_array(value, np.float64, 1, "y")
        if not np.all((array == 0.0) | (array == 1.0)):
            raise ValueError("every response must be exactly 0 or 1")
        return array

    @model_validator(mode="after")
    def _check_shapes(self) -> "Dataset":
        n, l = self.X.shape
        if n < 1 or l < 1:
            raise ValueError(f"dataset needs at least one row and one column, got {n}x{l}")
        if self.y.shape[0] != n:
            raise ValueError(f"X has {n} rows but y has {self.y.shape[0]} entries")
        if len(self.feature_names) != l:
            raise ValueError(f"{len(self.feature_names)} feature names for {l} columns")
        return self

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows in the given order, as a new dataset"""
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            X=self.X[rows],
            y=self.y[rows],
            feature_names=list(self.feature_names),
            provenance={**self.provenance, "subset_rows": int(rows.size)},
        )


class PriorSpec(BaseModel):
    """Zero-mean Gaussian prior with a consensus weight exponent"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    covariance: np.ndarray
    weight: float = Field(1.0, gt=0, le=1)
    mean: Optional[List[float]] = None

    _cholesky: np.ndarray = PrivateAttr()
    _log_det: float = PrivateAttr()

    @field_validator("covariance", mode="before")
    @classmethod
    def _coerce_covariance(cls, value: Any) -> np.ndarray:
        array = _frozen_array(np.atleast_2d(value), np.float64, 2, "covariance")
        if array.shape[0] != array.shape[1]:
            raise ValueError(f"covariance must be square, got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("covariance contains non-finite values")
        if not np.allclose(array, array.T, rtol=1e-12, atol=0.0):
            raise ValueError("covariance is not symmetric")
        try:
            np.linalg.cholesky(array)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite")
        return array

    @field_validator("mean")
    @classmethod
    def _zero_mean_only(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and any(v != 0.0 for v in value):
            raise ValueError("only zero-mean priors are supported")
        return value

    def model_post_init(self, __context: Any) -> None:
        cholesky = np.linalg.cholesky(self.covariance)
        self._cholesky = cholesky
        self._log_det = float(2.0 * np.sum(np.log(np.diag(cholesky))))

    @classmethod
    def isotropic(
        cls,
        dim: int,
        variance: float = PRIOR_VARIANCE,
        weight: float = 1.0,
        intercept_variance: Optional[float] = None,
    ) -> "PriorSpec":
        """Diagonal prior; the first coefficient may get its own variance"""
        diagonal = np.full(dim, float(variance))
        if intercept_variance is not None:
            diagonal[0] = float(intercept_variance)
        return cls(covariance=np.diag(diagonal), weight=weight)

    def reweighted(self, weight: float) -> "PriorSpec":
        return PriorSpec(covariance=self.covariance, weight=weight, mean=self.mean)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        return self._cholesky

    @property
    def log_det(self) -> float:
        return self._log_det


class LogPosteriorValue(BaseModel):
    """Log-likelihood, log-prior and their sum"""
    model_config = ConfigDict(frozen=True)

    log_likelihood: float
    log_prior: float
    total: float

    @model_validator(mode="after")
    def _check_total(self) -> "LogPosteriorValue":
        expected = self.log_likelihood + self.log_prior
        tolerance = 4 * np.spacing(max(abs(expected), 1.0))
        if abs(self.total - expected) > tolerance:
            raise ValueError(f"total {self.total} != log_likelihood + log_prior {expected}")
        return self


# Likelihood estimator types
class CaseControlIndex(BaseModel):
    """Row indices split by outcome; swapped when successes are the majority"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    success_rows: np.ndarray
    failure_rows: np.ndarray
    swapped: bool = False

    @field_validator("success_rows", "failure_rows", mode="before")
    @classmethod
    def _coerce_rows(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64, 1, "rows")

    @model_validator(mode="after")
    def _check_partition(self) -> "CaseControlIndex":
        rows = np.sort(np.concatenate([self.success_rows, self.failure_rows]))
        if not np.array_equal(rows, np.arange(rows.size)):
            raise ValueError("success and failure rows must be disjoint and cover 0..n-1")
        return self

    @property
    def n1(self) -> int:
        return int(self.success_rows.size)

    @property
    def n0(self) -> int:
        return int(self.failure_rows.size)

    @property
    def n(self) -> int:
        return self.n0 + self.n1

    @property
    def exact_rows(self) -> np.ndarray:
        """Minority-class rows, always summed exactly"""
        return self.failure_rows if self.swapped else self.success_rows

    @property
    def sampled_rows(self) -> np.ndarray:
        """Majority-class rows, the subsampling population"""
        return self.success_rows if self.swapped else self.failure_rows

    @property
    def n_sampled(self) -> int:
        return int(self.sampled_rows.size)


class Subsample(BaseModel):
    """Sorted without-replacement sample A from the sampled class"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rows: np.ndarray
    population: int = Field(..., ge=1)
    seed_tag: str = ""

    @field_validator("rows", mode="before")
    @classmethod
    def _coerce_rows(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64, 1, "rows")

    @model_validator(mode="after")
    def _check_size(self) -> "Subsample":
        if not 1 <= self.rows.size <= self.population:
            raise ValueError(f"subsample size {self.rows.size} outside [1, {self.population}]")
        if np.unique(self.rows).size != self.rows.size:
            raise ValueError("subsample rows must be distinct")
        return self

    @property
    def a(self) -> int:
        return int(self.rows.size)

    @property
    def scale(self) -> float:
        return self.population / self.a


# Sampler types
class ProposalKind(str, Enum):
    RANDOM_WALK_GAUSSIAN = "random-walk-gaussian"


class ProposalSpec(BaseModel):
    """Symmetric Gaussian random-walk proposal"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: ProposalKind = ProposalKind.RANDOM_WALK_GAUSSIAN
    scale: np.ndarray
    adapt_burnin: bool = True
    target_acceptance: float = Field(TARGET_ACCEPTANCE, gt=0.05, lt=0.95)
    adapt_interval: int = Field(ADAPT_INTERVAL, ge=1)

    _cholesky: np.ndarray = PrivateAttr()

    @field_validator("scale", mode="before")
    @classmethod
    def _coerce_scale(cls, value: Any) -> np.ndarray:
        array = _frozen_array(np.atleast_2d(value), np.float64, 2, "scale")
        if array.shape[0] != array.shape[1]:
            raise ValueError(f"proposal scale must be square, got {array.shape}")
        try:
            np.linalg.cholesky(array)
        except np.linalg.LinAlgError:
            raise ValueError("proposal scale is not positive definite")
        return array

    def model_post_init(self, __context: Any) -> None:
        self._cholesky = np.linalg.cholesky(self.scale)

    @classmethod
    def isotropic(cls, dim: int, variance: float, **kwargs: Any) -> "ProposalSpec":
        return cls(scale=np.eye(dim) * float(variance), **kwargs)

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        return self._cholesky


class ChainConfig(BaseModel):
    """Chain length, burn-in, thinning, seed and start point"""
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(..., ge=1)
    burnin: int = Field(0, ge=0)
    thinning: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    init: Optional[List[float]] = None
    preset_note: Optional[str] = None

    @model_validator(mode="after")
    def _check_burnin(self) -> "ChainConfig":
        if self.burnin >= self.iterations:
            raise ValueError(f"burnin {self.burnin} must be below iterations {self.iterations}")
        if self.kept_draws < 1:
            raise ValueError(
                f"no draws are kept: iterations - burnin = {self.iterations - self.burnin} is below thinning {self.thinning}"
            )
        if self.init is not None and not all(np.isfinite(self.init)):
            raise ValueError("init must be finite")
        return self

    @classmethod
    def from_preset(cls, name: str, seed: int = 0, init: Optional[List[float]] = None) -> "ChainConfig":
        if name not in CHAIN_PRESETS:
            raise ValueError(f"unknown chain preset '{name}', expected one of {sorted(CHAIN_PRESETS)}")
        preset = CHAIN_PRESETS[name]
        return cls(
            iterations=preset["iterations"],
            burnin=preset["burnin"],
            thinning=preset["thinning"],
            seed=seed,
            init=init,
            preset_note=preset["note"],
        )

    @property
    def kept_draws(self) -> int:
        return (self.iterations - self.burnin) // self.thinning


class ChainOutput(BaseModel):
    """Retained draws plus per-stage counters and timings"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: str
    feature_names: List[str]
    draws: np.ndarray
    iterations: int = Field(..., ge=1)
    burnin: int = Field(0, ge=0)
    thinning: int = Field(1, ge=1)
    seed: int = 0
    stage1_proposals: int = Field(0, ge=0)
    stage1_promotions: int = Field(0, ge=0)
    stage2_accepts: int = Field(0, ge=0)
    stage2_probability_sum: float = Field(0.0, ge=0)
    exact_evals: int = Field(0, ge=0)
    approx_evals: int = Field(0, ge=0)
    wall_seconds: float = Field(0.0, ge=0)
    target: str = "exact"
    proposal_scale: float = 1.0
    workers: int = Field(1, ge=1)
    subsample_meta: Dict[str, Any] = Field(default_factory=dict)
    notes: Dict[str, str] = Field(default_factory=dict)

    @field_validator("draws", mode="before")
    @classmethod
    def _coerce_draws(cls, value: Any) -> np.ndarray:
        array = np.array(value, dtype=np.float64)
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        return array

    @model_validator(mode="after")
    def _check_counters(self) -> "ChainOutput":
        if self.draws.shape[1] != len(self.feature_names):
            raise ValueError(
                f"draws have {self.draws.shape[1]} columns for {len(self.feature_names)} features"
            )
        expected = (self.iterations - self.burnin) // self.thinning
        if self.draws.shape[0] != expected:
            raise ValueError(f"expected {expected} kept draws, got {self.draws.shape[0]}")
        if not self.stage2_accepts <= self.stage1_promotions <= self.stage1_proposals:
            raise ValueError("counters must satisfy stage2_accepts <= promotions <= proposals")
        if self.method == "two-stage" and self.exact_evals > self.stage1_promotions + 1:
            raise ValueError(
                f"two-stage exact_evals {self.exact_evals} exceeds promotions + 1 = {self.stage1_promotions + 1}"
            )
        return self

    @property
    def kept_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.stage2_accepts / self.stage1_proposals if self.stage1_proposals else float("nan")

    @property
    def promotion_rate(self) -> float:
        return self.stage1_promotions / self.stage1_proposals if self.stage1_proposals else float("nan")

    @property
    def stage2_acceptance_rate(self) -> float:
        return self.stage2_accepts / self.stage1_promotions if self.stage1_promotions else float("nan")

    @property
    def mean_stage2_probability(self) -> float:
        if not self.stage1_promotions:
            return float("nan")
        return self.stage2_probability_sum / self.stage1_promotions

    @property
    def iterations_per_second(self) -> float:
        return self.iterations / self.wall_seconds if self.wall_seconds > 0 else float("nan")


# Consensus types
class PartitionPlan(BaseModel):
    """Balanced random assignment of rows to partitions"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    p: int = Field(..., ge=1)
    assignment: np.ndarray
    seed: int = 0

    @field_validator("assignment", mode="before")
    @classmethod
    def _coerce_assignment(cls, value: Any) -> np.ndarray:
        return _frozen_array(value, np.int64, 1, "assignment")

    @model_validator(mode="after")
    def _check_balance(self) -> "PartitionPlan":
        if self.assignment.size and (self.assignment.min() < 0 or self.assignment.max() >= self.p):
            raise ValueError(f"partition ids must lie in [0, {self.p})")
        sizes = self.sizes()
        if sizes.min() == 0:
            raise ValueError("every partition must be non-empty")
        if sizes.max() - sizes.min() > 1:
            raise ValueError(f"partition sizes {sizes.tolist()} differ by more than 1")
        return self

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.p)

    def rows(self, partition: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == partition)


class ConsensusEnsemble(BaseModel):
    """Per-partition chains, their weights and the combined draws"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plan: PartitionPlan
    per_partition: List[ChainOutput]
    weights: List[np.ndarray]
    combined: np.ndarray
    kernels: List[str]
    ridged: List[bool]
    wall_seconds: float = 0.0
    subsample_fraction: Optional[float] = None

    @model_validator(mode="after")
    def _check_shapes(self) -> "ConsensusEnsemble":
        shapes = {chain.draws.shape for chain in self.per_partition}
        if len(shapes) != 1:
            raise ValueError(f"partition draw matrices differ in shape: {sorted(shapes)}")
        if len(self.per_partition) != self.plan.p or len(self.weights) != self.plan.p:
            raise ValueError("one chain and one weight per partition required")
        if self.combined.shape != self.per_partition[0].draws.shape:
            raise ValueError("combined draws must match the partition draw shape")
        return self


# Data I/O types
class CategoricalFeature(BaseModel):
    """Categorical column coded against an explicit reference level"""
    column: str
    reference: str
    levels: List[str]

    @model_validator(mode="after")
    def _check_levels(self) -> "CategoricalFeature":
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"levels of '{self.column}' must be distinct")
        if self.reference not in self.levels:
            raise ValueError(f"reference '{self.reference}' not among levels of '{self.column}'")
        return self

    @property
    def indicator_levels(self) -> List[str]:
        return [level for level in self.levels if level != self.reference]


class SchemaSpec(BaseModel):
    """Maps delimited-text columns to a design matrix"""
    response: str
    positive_label: str
    numeric_features: List[str] = Field(default_factory=list)
    categorical_features: List[CategoricalFeature] = Field(default_factory=list)
    intercept: bool = True

    @model_validator(mode="after")
    def _check_columns(self) -> "SchemaSpec":
        columns = self.numeric_features + [c.column for c in self.categorical_features]
        if len(set(columns)) != len(columns):
            raise ValueError("feature columns must be distinct")
        if self.response in columns:
            raise ValueError(f"response '{self.response}' also used as a feature")
        if self.design_width < 1:
            raise ValueError("schema produces an empty design matrix")
        return self

    @property
    def used_columns(self) -> List[str]:
        return [self.response] + self.numeric_features + [c.column for c in self.categorical_features]

    @property
    def design_width(self) -> int:
        return (
            int(self.intercept)
            + len(self.numeric_features)
            + sum(len(c.levels) - 1 for c in self.categorical_features)
        )

    def feature_names(self) -> List[str]:
        names = ["intercept"] if self.intercept else []
        names += list(self.numeric_features)
        for feature in self.categorical_features:
            names += [f"{feature.column}_{level}" for level in feature.indicator_levels]
        return names


class SyntheticSpec(BaseModel):
    """Synthetic sparse-outcome logistic data"""
    n: int = Field(..., ge=1)
    l: int = Field(..., ge=1)
    true_beta: Optional[List[float]] = None
    sparsity_target: float = Field(..., gt=0, lt=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_beta(self) -> "SyntheticSpec":
        if self.true_beta is not None and len(self.true_beta) != self.l:
            raise ValueError(f"true_beta has {len(self.true_beta)} entries, expected {self.l}")
        return self

    def coefficients(self) -> np.ndarray:
        """True coefficients; entry 0 is the intercept and gets calibrated"""
        if self.true_beta is not None:
            return np.array(self.true_beta, dtype=np.float64)
        beta = np.zeros(self.l)
        for j in range(1, self.l):
            beta[j] = (-1) ** (j + 1) / j
        return beta


class SyntheticResult(BaseModel):
    """Generated dataset with the coefficients actually used"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dataset: Dataset
    true_beta: np.ndarray
    realized_fraction: float
    bisection_steps: int


# CLI types
class RunManifest(BaseModel):
    """Everything needed to reproduce one fit"""
    method: Method
    data: Optional[str] = None
    schema_path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    prior_variance: float = Field(PRIOR_VARIANCE, gt=0)
    intercept_variance: Optional[float] = Field(None, gt=0)
    iterations: int = Field(..., ge=1)
    burnin: int = Field(0, ge=0)
    thinning: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    init: Optional[List[float]] = None
    preset_note: Optional[str] = None
    proposal_scale: float = Field(..., gt=0)
    adapt: bool = True
    target_acceptance: float = Field(TARGET_ACCEPTANCE, gt=0.05, lt=0.95)
    subsample_size: Optional[int] = Field(None, ge=1)
    subsample_fraction: Optional[float] = Field(None, gt=0, le=1)
    refresh_every: Optional[int] = Field(None, ge=1)
    partitions: Optional[int] = Field(None, ge=1)
    workers: int = Field(1, ge=1)
    output: str
    label: Optional[str] = None

    @model_validator(mode="after")
    def _check_compatibility(self) -> "RunManifest":
        if (self.data is None) == (self.synthetic is None):
            raise ValueError("exactly one of data or synthetic must be given")
        if self.data is not None and self.schema_path is None:
            raise ValueError("a data file needs a schema")
        if self.method.is_consensus != (self.partitions is not None):
            raise ValueError("partitions is required iff the method is a consensus variant")
        has_subsample = self.subsample_size is not None or self.subsample_fraction is not None
        if self.method.uses_subsample != has_subsample:
            raise ValueError("a subsample size is required iff subsample/two-stage is involved")
        if self.subsample_size is not None and self.subsample_fraction is not None:
            raise ValueError("give subsample_size or subsample_fraction, not both")
        if self.refresh_every is not None and not self.method.uses_subsample:
            raise ValueError("refresh_every only applies to subsampling methods")
        if self.burnin >= self.iterations:
            raise ValueError(f"burnin {self.burnin} must be below iterations {self.iterations}")
        if self.iterations - self.burnin < self.thinning:
            raise ValueError(
                f"no draws are kept: iterations - burnin = {self.iterations - self.burnin} is below thinning {self.thinning}"
            )
        return self

    @property
    def display_label(self) -> str:
        return self.label or self.method.value

    def chain_config(self) -> ChainConfig:
        return ChainConfig(
            iterations=self.iterations,
            burnin=self.burnin,
            thinning=self.thinning,
            seed=self.seed,
            init=self.init,
            preset_note=self.preset_note,
        )


class CoefficientSummary(BaseModel):
    """Posterior summary of one coefficient"""
    name: str
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    ess: float
    mcse: float

    @model_validator(mode="after")
    def _check_quantiles(self) -> "CoefficientSummary":
        quantiles = (self.q025, self.q50, self.q975)
        if np.all(np.isfinite(quantiles)) and not self.q025 <= self.q50 <= self.q975:
            raise ValueError(f"quantiles of '{self.name}' are not monotone")
        return self


class SummaryReport(BaseModel):
    """Per-coefficient summaries plus run-level rates"""
    method: str
    kept_draws: int
    coefficients: List[CoefficientSummary]
    acceptance_rate: float
    promotion_rate: float
    stage2_acceptance_rate: float
    mean_stage2_probability: float
    exact_evals: int
    approx_evals: int
    iterations_per_second: float
    wall_seconds: float
