"""Pipeline configuration: TOML in, canonical JSON digest out."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# Paper-scale cluster counts, kept only as presets.
PAPER_K_COARSE = 7
PAPER_K_FINE = 466


class ConfigError(ValueError):
    pass


@dataclass
class PotentialSection:
    kind: str = "QuarticOscillator"
    beta: float = 0.005
    a: float = 1.0
    cap_strength: float = 0.5
    cap_fraction: float = 0.1


@dataclass
class GridSection:
    n_points: int = 256
    x_min: float = -12.0
    x_max: float = 12.0
    n_time_steps: int = 2048


@dataclass
class ResonanceSection:
    target_amplitude: float = 3.0
    window: float = 8.0
    island_diameter_fraction: float = 0.3
    island_pad: float = 0.2
    n_periods: int = 40
    n_time_steps: int = 256
    section_seeds: int = 24


@dataclass
class SweepSection:
    omega_multipliers: list[float] = field(default_factory=lambda: [0.95, 1.0, 1.05, 1.10, 1.15])
    omega_values: list[float] = field(default_factory=list)
    omega_range: list[float] = field(default_factory=list)      # [first, last, step]
    F_values: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.03])
    F_st_values: list[float] = field(default_factory=lambda: [0.0, 0.002, 0.004, 0.006])
    n_states_per_point: int = 10
    phases: list[str] = field(default_factory=lambda: ["0", "T4", "T2"])
    spaces: list[str] = field(default_factory=lambda: ["CS", "PS"])


@dataclass
class HusimiSection:
    pad: float = 0.25
    resolution: list[int] = field(default_factory=lambda: [150, 150])
    sigma: float = 1.0


@dataclass
class AugmentationSection:
    p_rotation: float = 0.5
    p_scale: float = 0.5
    p_skew: float = 0.5
    p_contrast: float = 0.5
    p_saturation: float = 0.5
    p_grayscale: float = 0.2
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rotation_max_deg: float = 15.0
    scale_range: list[float] = field(default_factory=lambda: [0.85, 1.15])
    skew_max: float = 0.15
    contrast_range: list[float] = field(default_factory=lambda: [0.7, 1.3])
    saturation_range: list[float] = field(default_factory=lambda: [0.5, 1.5])


@dataclass
class TrainingSection:
    embedding_dim: int = 5
    learning_rate: float = 1e-3
    entropy_weight: float = 1.0
    batch_size: int = 256
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    holdout_fraction: float = 0.0
    max_train_images: int = 0


@dataclass
class ClusteringSection:
    k_min: int = 2
    k_max: int = 40
    n_restarts: int = 10
    tol: float = 1e-8
    max_iter: int = 500
    k: int = 0


@dataclass
class ReportSection:
    coherence_threshold: float = 0.8
    mass_threshold: float = 0.5
    dispersion_threshold: float = 1.0


_SECTIONS = {
    "potential": PotentialSection,
    "grid": GridSection,
    "resonance": ResonanceSection,
    "sweep": SweepSection,
    "husimi": HusimiSection,
    "augmentation": AugmentationSection,
    "training": TrainingSection,
    "clustering": ClusteringSection,
    "report": ReportSection,
}

# Sections each stage depends on, upstream stages included.
STAGE_SECTIONS = {
    "poincare": ["potential", "resonance"],
    "generate": ["potential", "grid", "resonance", "sweep", "husimi"],
    "train": ["potential", "grid", "resonance", "sweep", "husimi", "augmentation", "training", "seed"],
    "embed": ["potential", "grid", "resonance", "sweep", "husimi", "augmentation", "training", "seed"],
    "cluster": ["potential", "grid", "resonance", "sweep", "husimi", "augmentation", "training",
                "clustering", "seed"],
    "report": ["potential", "grid", "resonance", "sweep", "husimi", "augmentation", "training",
               "clustering", "report", "seed"],
}


@dataclass
class PipelineConfig:
    seed: int = 0
    output_root: str = "atlas_out"
    potential: PotentialSection = field(default_factory=PotentialSection)
    grid: GridSection = field(default_factory=GridSection)
    resonance: ResonanceSection = field(default_factory=ResonanceSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    husimi: HusimiSection = field(default_factory=HusimiSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    report: ReportSection = field(default_factory=ReportSection)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        data = dict(data)
        kwargs: dict[str, Any] = {}
        for name in ("seed", "output_root"):
            if name in data:
                kwargs[name] = data.pop(name)
        for name, section_cls in _SECTIONS.items():
            raw = data.pop(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name for f in fields(section_cls)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = section_cls(**raw)
        if data:
            raise ConfigError(f"unknown top-level keys: {sorted(data)}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        sw = self.sweep
        if not (sw.omega_values or sw.omega_range or sw.omega_multipliers):
            raise ConfigError("sweep needs omega_values, omega_range or omega_multipliers")
        if sw.omega_range and (len(sw.omega_range) != 3 or sw.omega_range[2] <= 0
                               or sw.omega_range[1] < sw.omega_range[0]):
            raise ConfigError("omega_range must be [first, last, step] with step > 0")
        if not sw.F_values or not sw.F_st_values:
            raise ConfigError("sweep lists must be non-empty")
        if sw.n_states_per_point < 1:
            raise ConfigError("n_states_per_point must be >= 1")
        if not set(sw.phases) <= {"0", "T4", "T2"} or not sw.phases:
            raise ConfigError("phases must be a non-empty subset of 0, T4, T2")
        if not set(sw.spaces) <= {"CS", "PS"} or not sw.spaces:
            raise ConfigError("spaces must be a non-empty subset of CS, PS")
        tr = self.training
        if tr.learning_rate <= 0 or tr.batch_size < 2 or tr.embedding_dim < 2 or tr.entropy_weight < 0:
            raise ConfigError("training: need learning_rate > 0, batch_size >= 2, "
                              "embedding_dim >= 2, entropy_weight >= 0")
        cl = self.clustering
        if cl.k_min < 2 or cl.k_max < cl.k_min:
            raise ConfigError("clustering: need 2 <= k_min <= k_max")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def canonical(self, sections: list[str] | None = None) -> str:
        d = self.to_dict()
        d.pop("output_root")
        if sections is not None:
            d = {k: v for k, v in d.items() if k in sections}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self, stage: str | None = None) -> str:
        sections = None if stage is None else STAGE_SECTIONS[stage]
        return hashlib.sha256(self.canonical(sections).encode()).hexdigest()[:16]

    def sub_seed(self, stream: str) -> int:
        """Independent seed for one RNG stream, derived from the global seed."""
        h = hashlib.sha256(f"{self.seed}:{stream}".encode()).digest()
        return int.from_bytes(h[:8], "little")

    def out_root(self) -> Path:
        return Path(os.environ.get("ATLAS_OUT", self.output_root))

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)
