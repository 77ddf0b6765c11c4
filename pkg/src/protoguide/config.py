"""Run configuration: one JSON file drives every pipeline stage.

The mode switch (baseline vs prototype-guided) is the only lever that may
differ between the two runs of an experiment; it changes the conditioning
table's source and frozen flag and nothing else. Everything downstream of
the config is derived, so the two modes share hyperparameters by
construction. Unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .denoiser import DenoiserConfig
from .fileio import read_json

MODE_BASELINE = "baseline_cfg"
MODE_PROTOTYPE = "prototype_guided"

DEFAULT_CRITERIA = [
    "cell size",
    "nucleus shape & size",
    "nucleus-to-cytoplasm ratio",
    "cytoplasm color and consistency",
    "chromatin pattern",
    "inclusions",
    "granules",
]

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_run_config",
    "MODE_BASELINE",
    "MODE_PROTOTYPE",
]


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


def _strict(cls, section: str, doc: dict):
    known = {f.name for f in fields(cls)}
    # "lambda" is a reserved word; the JSON key maps onto the lam field.
    aliases = {"lambda": "lam"} if "lam" in known else {}
    kwargs = {}
    for key, value in doc.items():
        name = aliases.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from exc


@dataclass(frozen=True)
class RunSection:
    run_id: str
    output_root: str = "out"
    seed: int = 0
    mode: str = MODE_PROTOTYPE

    def __post_init__(self) -> None:
        if self.mode not in (MODE_BASELINE, MODE_PROTOTYPE):
            raise ValueError(f"mode must be {MODE_BASELINE} or {MODE_PROTOTYPE}")
        if not self.run_id:
            raise ValueError("run_id must be non-empty")


@dataclass(frozen=True)
class DataSection:
    root: str
    per_class_n: int = 100
    holdout_per_class: int = 50
    encoder: str = "pixel_projection"
    embed_dim: int = 768
    image_size: int = 64
    source_tag: str = ""


@dataclass(frozen=True)
class PrototypeSection:
    gamma: float = 1.0
    lam: float = 0.01
    prototypes_per_class: int = 1
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int | None = None


@dataclass(frozen=True)
class DenoiserSection:
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 8)
    resnet_blocks_per_level: int = 2
    dropout: float = 0.1
    time_dim: int = 256
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 1500
    batch_size: int = 16
    timesteps: int = 1000
    uncond_prob: float = 0.1
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 500
    threads: int = 1


@dataclass(frozen=True)
class SamplerSection:
    method: str = "ddim"
    num_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.0
    per_class: int = 100
    batch_size: int = 16
    clip_denoised: bool = True


@dataclass(frozen=True)
class EvalSection:
    preset: str = "small_cnn_desk"
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 32


@dataclass(frozen=True)
class AnnotationSection:
    criteria: tuple = tuple(DEFAULT_CRITERIA)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection
    data: DataSection
    prototypes: PrototypeSection = field(default_factory=PrototypeSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    annotations: AnnotationSection = field(default_factory=AnnotationSection)

    @property
    def run_dir(self) -> Path:
        root = os.environ.get("PROTOGUIDE_OUT", self.run.output_root)
        return Path(root) / self.run.run_id

    @property
    def mode_dir(self) -> Path:
        return self.run_dir / self.run.mode

    def encoder_dim(self) -> int:
        return 3 if self.data.encoder == "mean_pixel" else self.data.embed_dim

    def denoiser_config(self) -> DenoiserConfig:
        """Shared architecture for both modes; input and condition sizes are
        derived from the data section so the two runs cannot drift apart."""
        d = self.denoiser
        try:
            return DenoiserConfig(
                input_size=self.data.image_size,
                base_channels=d.base_channels,
                channel_multipliers=tuple(d.channel_multipliers),
                resnet_blocks_per_level=d.resnet_blocks_per_level,
                dropout=d.dropout,
                time_dim=d.time_dim,
                cond_dim=self.encoder_dim(),
                learning_rate=d.learning_rate,
                weight_decay=d.weight_decay,
                epochs=d.epochs,
                batch_size=d.batch_size,
                timesteps=d.timesteps,
                uncond_prob=d.uncond_prob,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self) -> dict:
        doc = asdict(self)
        doc["resolved"] = {
            "run_dir": str(self.run_dir),
            "mode_dir": str(self.mode_dir),
            "cond_dim": self.encoder_dim(),
        }
        return doc


_SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "prototypes": PrototypeSection,
    "denoiser": DenoiserSection,
    "sampler": SamplerSection,
    "eval": EvalSection,
    "annotations": AnnotationSection,
}


def load_run_config(path, seed: int | None = None,
                    mode: str | None = None) -> RunConfig:
    """Parse and validate a config file, applying CLI overrides."""
    try:
        doc = read_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for required in ("run", "data"):
        if required not in doc:
            raise ConfigError(f"missing required section {required!r}")

    run_doc = dict(doc["run"])
    if seed is not None:
        run_doc["seed"] = seed
    if mode is not None:
        run_doc["mode"] = mode

    parsed = {"run": _strict(RunSection, "run", run_doc)}
    for name, cls in _SECTIONS.items():
        if name == "run":
            continue
        if name in doc:
            section_doc = doc[name]
            if not isinstance(section_doc, dict):
                raise ConfigError(f"section {name!r} must be a JSON object")
            parsed[name] = _strict(cls, name, section_doc)
    config = RunConfig(**parsed)
    config.denoiser_config()  # surface shape inconsistencies at load time
    return config
