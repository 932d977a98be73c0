"""Run configuration: one JSON file describing every pipeline stage.

Parsing is strict (unknown keys are rejected), and each section validates
itself through its dataclass. CLI flags override individual fields after
the file loads.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionConfig
from .qa import QAConfig
from .segmenter import EncoderConfig, LossWeights
from .synth import SynthConfig


class RunConfigError(ValueError):
    """Rejected run configuration."""


@dataclass(frozen=True)
class SegTrainConfig:
    steps: int = 2000
    step_size: float = 0.05
    momentum: float = 0.9
    batch_size: int = 2
    eval_every: int = 100
    target_map50: float = 0.8
    early_stop: bool = True
    lambda_cls: float = 2.0
    lambda_focal: float = 5.0
    lambda_dice: float = 5.0
    no_object_weight: float = 0.1

    def loss_weights(self) -> LossWeights:
        return LossWeights(classification=self.lambda_cls, focal=self.lambda_focal,
                           dice=self.lambda_dice, no_object=self.no_object_weight)


@dataclass(frozen=True)
class QATrainConfig:
    steps: int = 3000
    step_size: float = 0.1
    momentum: float = 0.9
    batch_size: int = 1
    eval_every: int = 150
    target_ra: float = 0.9
    early_stop: bool = True
    ablation_steps: int = 300


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    qa: QAConfig = field(default_factory=QAConfig)
    seg_train: SegTrainConfig = field(default_factory=SegTrainConfig)
    qa_train: QATrainConfig = field(default_factory=QATrainConfig)


_SECTIONS = {
    "synth": SynthConfig,
    "encoder": EncoderConfig,
    "attention": AttentionConfig,
    "qa": QAConfig,
    "seg_train": SegTrainConfig,
    "qa_train": QATrainConfig,
}
_TUPLE_FIELDS = {"stage_depths", "question_templates", "palette", "chart_kinds"}


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise RunConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise RunConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        if key == "count_ranges" and isinstance(value, dict):
            value = {k: tuple(v) for k, v in value.items()}
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise RunConfigError(f"invalid {section!r} section: {err}") from err


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise RunConfigError("run config must be a JSON object")
    known = {"seed", "threads", *_SECTIONS}
    unknown = set(data) - known
    if unknown:
        raise RunConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "seed" in data:
        cfg.seed = int(data["seed"])
    if "threads" in data:
        cfg.threads = int(data["threads"])
        if cfg.threads < 1:
            raise RunConfigError("threads must be >= 1")
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, data[name], name))
    return cfg


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise RunConfigError(f"config file is not valid JSON: {err}") from err
    return from_dict(data)


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "threads": cfg.threads}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    return out


def echo(cfg: RunConfig, out_dir) -> None:
    """Write the fully resolved configuration next to the run artifacts."""
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "resolved_config.json").write_text(
        json.dumps(to_dict(cfg), sort_keys=True, indent=1), encoding="utf-8")
