# schemas.py
# LeaSE Engine - Pydantic Schemas for Configuration, Specs & Results
# Created by Digital COE Gen AI Team

import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Enums

class Mode(str, Enum):
    LEASE = "lease"
    DARTS1ST = "darts1st"
    AUDIENCE_ONLY = "audience_only"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            normalized = value.strip().lower().replace("-", "_")
            for member in cls:
                if member.value == normalized:
                    return member
        return None


class ReweighMode(str, Enum):
    LITERAL = "literal"
    ABS_NORMALIZED = "abs_normalized"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            normalized = value.strip().lower().replace("-", "_")
            for member in cls:
                if member.value == normalized:
                    return member
        return None


class DataSource(str, Enum):
    SYNTHETIC = "synthetic"
    IDX = "idx"


class CandidateOp(str, Enum):
    ZERO = "zero"
    SKIP = "skip"
    CONV3X3_RELU = "conv3x3_relu"
    AVG_POOL3 = "avg_pool3"
    MAX_POOL3 = "max_pool3"


DEFAULT_OPS = [op.value for op in CandidateOp]
PARAMETRIC_OPS = {CandidateOp.CONV3X3_RELU.value}


def _split_csv(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, frozen=True)


# Search hyperparameters

class Hyperparams(_Section):
    """Step sizes and trade-offs of the four-level optimizer."""
    xi_e: float = Field(default=0.025, ge=0, description="explainer virtual/committed step")
    xi_delta: float = Field(default=0.01, ge=0, description="explanation ascent step")
    xi_w: float = Field(default=0.025, ge=0, description="audience virtual/committed step")
    eta: float = Field(default=3e-4, ge=0, description="architecture step")
    gamma: float = Field(default=1.0, ge=0, description="audience validation weight")
    epsilon: float = Field(default=0.1, ge=0, description="perturbation box bound")
    alpha_scale: float = Field(default=0.01, gt=0, description="finite-difference step numerator")
    attack_steps: int = Field(default=1, ge=1)
    reweigh_mode: ReweighMode = ReweighMode.ABS_NORMALIZED


# Search space & networks

class CellSpec(_Section):
    """Searchable cell: n_nodes intermediate nodes fed by two cell inputs."""
    n_nodes: int = Field(default=3, ge=1)
    candidate_ops: List[str] = Field(default_factory=lambda: list(DEFAULT_OPS))
    channels: int = Field(default=8, ge=1)

    @field_validator("candidate_ops", mode="before")
    @classmethod
    def _parse_ops(cls, value):
        return _split_csv(value)

    @field_validator("candidate_ops")
    @classmethod
    def _check_ops(cls, ops: List[str]) -> List[str]:
        if not ops:
            raise ValueError("candidate op list is empty")
        unknown = [op for op in ops if op not in DEFAULT_OPS]
        if unknown:
            raise ValueError(f"unknown candidate ops {unknown}; known: {DEFAULT_OPS}")
        if len(set(ops)) != len(ops):
            raise ValueError("candidate ops must be unique")
        if CandidateOp.ZERO.value not in ops:
            raise ValueError("candidate ops must include 'zero'")
        if len(ops) < 2:
            raise ValueError("candidate ops need at least one non-zero op")
        return ops

    @property
    def num_ops(self) -> int:
        return len(self.candidate_ops)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        """(source, target) pairs; nodes 0 and 1 are the cell inputs."""
        return [(src, node) for node in range(2, self.n_nodes + 2) for src in range(node)]

    @property
    def num_edges(self) -> int:
        return len(self.edges)


class NetworkConfig(_Section):
    in_channels: int = Field(default=1, ge=1)
    search_cells: int = Field(default=2, ge=1)
    eval_cells: int = Field(default=4, ge=1)
    eval_channels: Optional[int] = Field(default=None, ge=1, description="eval width; defaults to cell.channels")
    audience_channels: List[int] = Field(default_factory=lambda: [8, 16])

    @field_validator("audience_channels", mode="before")
    @classmethod
    def _parse_channels(cls, value):
        return _split_csv(value)

    @field_validator("audience_channels")
    @classmethod
    def _check_channels(cls, value: List[int]) -> List[int]:
        if len(value) != 2 or any(c < 1 for c in value):
            raise ValueError("audience_channels needs two positive widths (conv1, conv2)")
        return value


class ExplainerSpec(_Section):
    """Stem conv, `cells` stacked cells, global pool and a dense head."""
    in_channels: int = Field(default=1, ge=1)
    num_classes: int = Field(default=4, ge=2)
    cells: int = Field(default=2, ge=1)
    cell: CellSpec = Field(default_factory=CellSpec)

    @property
    def channels(self) -> int:
        return self.cell.channels


class AudienceSpec(_Section):
    """Fixed human-designed audience: conv-relu-maxpool, conv-relu-gap, dense."""
    in_channels: int = Field(default=1, ge=1)
    num_classes: int = Field(default=4, ge=2)
    conv1_channels: int = Field(default=8, ge=1)
    conv2_channels: int = Field(default=16, ge=1)


# Data

class DataConfig(_Section):
    source: DataSource = DataSource.SYNTHETIC
    image_size: int = Field(default=8, ge=3)
    num_classes: int = Field(default=4, ge=2)
    n_per_split: int = Field(default=64, ge=1)
    noise: float = Field(default=0.1, ge=0)
    test_size: int = Field(default=256, ge=1)
    idx_images: Optional[Path] = None
    idx_labels: Optional[Path] = None
    fractions: List[float] = Field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    shared_splits: bool = True
    batch_size: int = Field(default=16, ge=1)

    @field_validator("fractions", mode="before")
    @classmethod
    def _parse_fractions(cls, value):
        return _split_csv(value)

    @field_validator("fractions")
    @classmethod
    def _check_fractions(cls, value: List[float]) -> List[float]:
        if len(value) != 4 or any(f < 0 for f in value):
            raise ValueError("fractions needs four non-negative values")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1 (got {sum(value)})")
        return value

    @model_validator(mode="after")
    def _check_source(self):
        if self.source == DataSource.IDX and (self.idx_images is None or self.idx_labels is None):
            raise ValueError("source = idx requires idx_images and idx_labels")
        if self.source == DataSource.SYNTHETIC:
            if self.num_classes > 4:
                raise ValueError("synthetic bars support at most 4 classes")
            if self.n_per_split < self.num_classes:
                raise ValueError("n_per_split must be at least num_classes")
        return self


# Run

class RunSection(_Section):
    iterations: int = Field(default=200, ge=0)
    eval_epochs: int = Field(default=20, ge=0)
    seed: int = Field(default=0, ge=0)
    mode: Mode = Mode.LEASE
    out_dir: Path = Path("runs/default")
    workers: int = Field(default=1, ge=1)
    record_timing: bool = False
    checkpoint_every: int = Field(default=0, ge=0)
    dump_saliency: bool = False
    baseline_runs: int = Field(default=5, ge=1)
    gammas: List[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0])

    @field_validator("gammas", mode="before")
    @classmethod
    def _parse_gammas(cls, value):
        return _split_csv(value)

    @field_validator("gammas")
    @classmethod
    def _check_gammas(cls, value: List[float]) -> List[float]:
        if not value or any(g < 0 for g in value):
            raise ValueError("gammas must be a non-empty list of values >= 0")
        return value


class RunConfig(_Section):
    """Validated configuration of one run; each field maps to an INI section."""
    search: Hyperparams = Field(default_factory=Hyperparams)
    cell: CellSpec = Field(default_factory=CellSpec)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    run: RunSection = Field(default_factory=RunSection)

    def explainer_spec(self, evaluation: bool = False) -> ExplainerSpec:
        cell = self.cell
        if evaluation and self.network.eval_channels:
            cell = cell.model_copy(update={"channels": self.network.eval_channels})
        return ExplainerSpec(
            in_channels=self.network.in_channels,
            num_classes=self.data.num_classes,
            cells=self.network.eval_cells if evaluation else self.network.search_cells,
            cell=cell,
        )

    def audience_spec(self) -> AudienceSpec:
        conv1, conv2 = self.network.audience_channels
        return AudienceSpec(
            in_channels=self.network.in_channels,
            num_classes=self.data.num_classes,
            conv1_channels=conv1,
            conv2_channels=conv2,
        )


# Genotype

class GenotypeNode(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    node: int = Field(ge=2)
    inputs: List[Tuple[int, str]]

    @model_validator(mode="after")
    def _check_inputs(self):
        if len(self.inputs) != 2:
            raise ValueError(f"node {self.node}: exactly 2 inputs required")
        for src, op in self.inputs:
            if op == CandidateOp.ZERO.value:
                raise ValueError(f"node {self.node}: 'zero' cannot be retained")
            if not 0 <= src < self.node:
                raise ValueError(f"node {self.node}: input {src} out of range")
        return self


class Genotype(BaseModel):
    """Discrete cell: two (input node, op) pairs per intermediate node."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    format: str = "leasenas.genotype/1"
    n_nodes: int = Field(ge=1)
    candidate_ops: List[str]
    nodes: List[GenotypeNode]

    @model_validator(mode="after")
    def _check_nodes(self):
        if [n.node for n in self.nodes] != list(range(2, self.n_nodes + 2)):
            raise ValueError("nodes must be listed in order 2..n_nodes+1")
        for n in self.nodes:
            for _, op in n.inputs:
                if op not in self.candidate_ops:
                    raise ValueError(f"node {n.node}: op {op!r} not in candidate ops")
        return self


# Results

METRICS_COLUMNS = [
    "iteration",
    "explainer_train_loss",
    "explainer_val_loss",
    "audience_train_loss",
    "audience_val_loss",
    "attack_objective",
    "outer_objective",
    "wall_ms",
]


class MetricsRow(BaseModel):
    """One logged search iteration; None marks a stage the mode skipped."""
    iteration: int
    explainer_train_loss: float
    explainer_val_loss: float
    audience_train_loss: Optional[float] = None
    audience_val_loss: Optional[float] = None
    attack_objective: Optional[float] = None
    outer_objective: float
    wall_ms: Optional[float] = None

    def first_non_finite(self) -> Optional[str]:
        for name in METRICS_COLUMNS:
            value = getattr(self, name)
            if isinstance(value, float) and not math.isfinite(value):
                return name
        return None


class EvalResult(BaseModel):
    test_accuracy: float
    test_error: float
    test_loss: float
    final_train_loss: Optional[float] = None
    num_params: int
    metrics_path: Optional[Path] = None


class SweepRow(BaseModel):
    gamma: float
    seed: int
    test_error: float
    test_accuracy: float
    explainer_val_loss: Optional[float] = None
    audience_val_loss: Optional[float] = None
    genotype_path: Optional[Path] = None


SWEEP_COLUMNS = list(SweepRow.model_fields)

EVAL_COLUMNS = ["epoch", "train_loss", "test_loss", "test_accuracy", "num_params"]


class EvalEpochRow(BaseModel):
    """Evaluation-phase progress; epoch 0 is the freshly initialized network."""
    epoch: int
    train_loss: Optional[float] = None
    test_loss: float
    test_accuracy: float
    num_params: int


class BaselineKind(str, Enum):
    SEARCHED = "searched"
    RANDOM = "random"


class BaselineRow(BaseModel):
    run: int
    seed: int
    kind: BaselineKind
    test_accuracy: float
    test_error: float
    genotype_path: Optional[Path] = None


BASELINE_COLUMNS = list(BaselineRow.model_fields)
