"""Experiment configuration: one JSON document per experiment.

The config hash covers everything that affects results except the master
seed and the output directory, so runs of one config over several seeds
share a hash prefix (``<hash>-s<seed>``).

Sub-seeds come from splitmix64: phase ``i`` (data=0, init=1, unlearn=2,
attack=3) gets ``splitmix64(master + (i + 1) * 0x9E3779B97F4A7C15)``
reduced to 31 bits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

from .data import TaskParams
from .tinyformer import ModelConfig, TrainHParams
from .unlearn import UnlearnHParams

SCENARIOS = ("single", "sweep", "successive", "batch", "relearn")
SUCCESSIVE_MODES = ("iterative", "stored-info")
PHASES = ("data", "init", "unlearn", "attack")
RELEARN_SOURCES = ("retain", "fresh")

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sub_seed(master: int, phase: str) -> int:
    i = PHASES.index(phase)
    return splitmix64((master + i * _GOLDEN) & _MASK64) & 0x7FFFFFFF


@dataclass
class SuccessiveParams:
    num_requests: int = 10
    mode: str = "iterative"
    refine: bool = False

    def __post_init__(self):
        if self.mode not in SUCCESSIVE_MODES:
            raise ValueError(f"unknown successive mode {self.mode!r}")
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")


@dataclass
class RelearnParams:
    epochs: int = 10
    fraction: float = 0.2
    margin: float = 0.05
    lr: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    source: str = "retain"  # or "fresh": new draws from the task generator

    def __post_init__(self):
        if self.source not in RELEARN_SOURCES:
            raise ValueError(f"unknown relearn source {self.source!r}")


def _default_unlearn() -> UnlearnHParams:
    # frozen after a one-time grid on seed 0 of the default task
    return UnlearnHParams(method="GA", lr=32.0, epochs=5, batch_size=16, clip=0.5,
                          mask_source="MLF")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskParams = field(default_factory=TaskParams)
    train: TrainHParams = field(default_factory=TrainHParams)
    unlearn: UnlearnHParams = field(default_factory=_default_unlearn)
    sparsities: List[float] = field(default_factory=lambda: [0.9])
    scenario: str = "single"
    seed: int = 0
    successive: SuccessiveParams = field(default_factory=SuccessiveParams)
    relearn: RelearnParams = field(default_factory=RelearnParams)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not self.sparsities:
            raise ValueError("at least one sparsity is required")
        for s in self.sparsities:
            if not 0.0 <= s < 1.0:
                raise ValueError(f"sparsity {s} outside [0, 1)")
        if self.task.num_classes != self.model.num_classes:
            raise ValueError("task and model disagree on the number of classes")
        if self.task.vocab_size != self.model.vocab_size:
            raise ValueError("task and model disagree on the vocabulary size")
        if self.task.seq_len > self.model.max_seq_len:
            raise ValueError("sequences longer than the model's max_seq_len")

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "train": asdict(self.train),
            "unlearn": self.unlearn.to_dict(),
            "sparsities": [float(s) for s in self.sparsities],
            "scenario": self.scenario,
            "seed": int(self.seed),
            "successive": asdict(self.successive),
            "relearn": asdict(self.relearn),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kw = dict(d)
        if "model" in kw:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        if "task" in kw:
            kw["task"] = TaskParams(**kw["task"])
        if "train" in kw:
            kw["train"] = TrainHParams(**kw["train"])
        if "unlearn" in kw:
            kw["unlearn"] = UnlearnHParams(**kw["unlearn"])
        if "successive" in kw:
            kw["successive"] = SuccessiveParams(**kw["successive"])
        if "relearn" in kw:
            kw["relearn"] = RelearnParams(**kw["relearn"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    # -- identity ------------------------------------------------------
    def canonical(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        d.pop("out_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.config_hash()}-s{self.seed}"

    def run_dir(self, out_dir: Optional[str] = None) -> Path:
        return Path(out_dir or self.out_dir) / self.run_name()

    # -- derived pieces --------------------------------------------------
    def seeds(self) -> dict:
        return {p: sub_seed(self.seed, p) for p in PHASES}

    def model_config(self) -> ModelConfig:
        return replace(self.model, seed=sub_seed(self.seed, "init"))

    def unlearn_hparams(self, **over) -> UnlearnHParams:
        return replace(self.unlearn, seed=sub_seed(self.seed, "unlearn"), **over)

    def train_hparams(self) -> TrainHParams:
        return replace(self.train, seed=sub_seed(self.seed, "init"))

    def with_overrides(self, **over) -> "ExperimentConfig":
        return replace(self, **over)


SO_STEP = 2e-3  # second-order step size, frozen by the same one-time grid


def preset(scenario: str = "single", **over) -> ExperimentConfig:
    """Default configuration for a scenario.

    Successive and batch scenarios run SO against MAPE-SO, so they use the
    second-order step size and the retain-loss mask objective.
    """
    cfg = ExperimentConfig(scenario=scenario)
    if scenario in ("successive", "batch"):
        cfg = replace(cfg, unlearn=UnlearnHParams(method="SO", lr=SO_STEP, mask_source="MLR"))
    if scenario == "sweep":
        cfg = replace(cfg, sparsities=[0.0, 0.5, 0.7, 0.9, 0.95])
    return replace(cfg, **over)
