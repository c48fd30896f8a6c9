"""Run configuration: one JSON document describing task, split, model and training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .rng import env_seed
from .trainer import InitSpec, TrainConfig
from .zp_dataset import Random, SplitSpec, TaskSpec, split_spec_from_dict, split_spec_to_dict


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


MODEL_KEYS = ("d_model", "n_heads", "n_layers", "d_mlp", "use_layer_norm", "causal_mask")
TOP_KEYS = ("task", "split", "model", "train", "output_dir", "report")


@dataclass(frozen=True)
class ReportOptions:
    log_x: bool = False
    raw_med: bool = False


@dataclass
class RunConfig:
    task: TaskSpec
    split: SplitSpec = field(default_factory=lambda: Random(0.3, 0))
    model: ModelConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "."
    report: ReportOptions = field(default_factory=ReportOptions)

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig.for_task(self.task)
        if self.model.out_classes != self.task.p:
            raise ConfigError(f"model.out_classes={self.model.out_classes} but p={self.task.p}")
        if self.model.vocab_size != self.task.vocab_size:
            raise ConfigError(f"model.vocab_size={self.model.vocab_size} but the tokenizer needs {self.task.vocab_size}")

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "split": split_spec_to_dict(self.split),
            "model": {k: getattr(self.model, k) for k in MODEL_KEYS},
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "report": {"log_x": self.report.log_x, "raw_med": self.report.raw_med},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_env_seed(self) -> "RunConfig":
        """Apply ``GROKLAB_SEED`` (if set) to the split and training seeds."""
        seed = env_seed(-1)
        if seed < 0:
            return self
        split = split_spec_from_dict({**split_spec_to_dict(self.split), "seed": seed})
        train = TrainConfig.from_dict({**self.train.to_dict(), "seed": seed})
        return RunConfig(self.task, split, self.model, train, self.output_dir, self.report)


def _unknown(d: dict, allowed, where: str) -> None:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown {where} keys: {sorted(extra)}")


def task_from_dict(d: dict) -> TaskSpec:
    _unknown(d, ("p", "f", "terms", "offset"), "task")
    if "p" not in d:
        raise ConfigError("task.p is required")
    if "f" in d and "terms" in d:
        raise ConfigError("give task.f or task.terms, not both")
    offset = int(d.get("offset", 0))
    if "terms" in d:
        return TaskSpec(int(d["p"]), tuple(tuple(t) for t in d["terms"]), offset)
    return TaskSpec.from_expr(int(d["p"]), d.get("f", "i+j"), offset)


def run_config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    _unknown(d, TOP_KEYS, "top-level")
    try:
        task = task_from_dict(d.get("task", {}))
        split = split_spec_from_dict({"frac": 0.3, **d.get("split", {})})
        model_d = d.get("model", {})
        _unknown(model_d, MODEL_KEYS, "model")
        model = ModelConfig.for_task(task, **model_d)
        train_d = dict(d.get("train", {}))
        if isinstance(train_d.get("init"), dict):
            train_d["init"] = InitSpec(**train_d["init"])
        train = TrainConfig.from_dict(train_d)
        report_d = d.get("report", {})
        _unknown(report_d, [f.name for f in fields(ReportOptions)], "report")
        return RunConfig(task, split, model, train, str(d.get("output_dir", ".")), ReportOptions(**report_d))
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(data)
