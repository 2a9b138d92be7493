"""Pipeline configuration loaded from a TOML document.

Example::

    seed = 0

    [features]
    kind = "melspec"
    sample_rate = 48000
    hop_length = 512

    [asr]
    epochs = 30
    batch_size = 64

    [duration]
    epochs = 100

    [align]
    policy = "pda_then_viterbi"

    [paths]
    corpus_dir = "corpus"
    workspace_dir = "workspace"

The top-level ``seed`` is applied to every training stage.
"""

from __future__ import annotations

import os
import tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from duration_aligner.acoustic import TrainConfig
from duration_aligner.constants import ALIGNMENT_POLICIES, WORKSPACE_ENV_VAR, WORKSPACE_SUBDIRS
from duration_aligner.duration import DurationTrainConfig
from duration_aligner.errors import ConfigurationError
from duration_aligner.features import FeatureConfig

_TABLES = ("features", "asr", "duration", "align", "paths")
_FEATURE_KINDS = ("melspec", "mfcc", "latent")


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: Path | None = None
    workspace_dir: Path | None = None

    def to_dict(self) -> dict[str, str]:
        return {
            name: str(value)
            for name, value in (
                ("corpus_dir", self.corpus_dir),
                ("workspace_dir", self.workspace_dir),
            )
            if value is not None
        }


@dataclass(frozen=True)
class PipelineConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    feature_kind: str = "melspec"
    asr: TrainConfig = field(default_factory=TrainConfig)
    duration: DurationTrainConfig = field(default_factory=DurationTrainConfig)
    align_policy: str = "pda_then_viterbi"
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.feature_kind not in _FEATURE_KINDS:
            raise ConfigurationError(
                f"Unknown feature kind {self.feature_kind!r}; expected one of {_FEATURE_KINDS}"
            )
        if self.align_policy not in ALIGNMENT_POLICIES:
            raise ConfigurationError(
                f"Unknown alignment policy {self.align_policy!r}; expected one of "
                f"{ALIGNMENT_POLICIES}"
            )
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        object.__setattr__(self, "asr", replace(self.asr, seed=self.seed))
        object.__setattr__(self, "duration", replace(self.duration, seed=self.seed))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> PipelineConfig:
        """Build a config from parsed TOML; relative paths resolve against ``base_dir``."""
        unknown = set(data) - set(_TABLES) - {"seed"}
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {sorted(unknown)}")
        for table in _TABLES:
            if table in data and not isinstance(data[table], Mapping):
                raise ConfigurationError(f"[{table}] must be a table")

        features = dict(data.get("features", {}))
        feature_kind = features.pop("kind", "melspec")
        align = dict(data.get("align", {}))
        policy = align.pop("policy", "pda_then_viterbi")
        if align:
            raise ConfigurationError(f"Unknown [align] keys: {sorted(align)}")
        paths = dict(data.get("paths", {}))
        unknown_paths = set(paths) - {"corpus_dir", "workspace_dir"}
        if unknown_paths:
            raise ConfigurationError(f"Unknown [paths] keys: {sorted(unknown_paths)}")
        for stage in ("asr", "duration"):
            if "seed" in data.get(stage, {}):
                raise ConfigurationError(
                    f"Set the seed at the top level, not in [{stage}]; it applies to every stage"
                )

        def _path(value: Any) -> Path | None:
            if value is None:
                return None
            path = Path(value)
            return path if path.is_absolute() or base_dir is None else base_dir / path

        try:
            return cls(
                features=FeatureConfig.from_dict(features),
                feature_kind=feature_kind,
                asr=TrainConfig.from_dict(data.get("asr", {})),
                duration=DurationTrainConfig.from_dict(data.get("duration", {})),
                align_policy=policy,
                paths=PathsConfig(
                    corpus_dir=_path(paths.get("corpus_dir")),
                    workspace_dir=_path(paths.get("workspace_dir")),
                ),
                seed=int(data.get("seed", 0)),
            )
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid config value: {e}") from e

    def to_dict(self) -> dict[str, Any]:
        asr = self.asr.to_dict()
        duration = self.duration.to_dict()
        asr.pop("seed")
        duration.pop("seed")
        return {
            "seed": self.seed,
            "features": {"kind": self.feature_kind, **self.features.to_dict()},
            "asr": asr,
            "duration": duration,
            "align": {"policy": self.align_policy},
            "paths": self.paths.to_dict(),
        }

    def with_overrides(self, **overrides: Any) -> PipelineConfig:
        """Copy with command-line overrides applied; ``None`` values are ignored."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        asr_overrides = {
            k.removeprefix("asr_"): overrides.pop(k)
            for k in list(overrides)
            if k.startswith("asr_")
        }
        duration_overrides = {
            k.removeprefix("duration_"): overrides.pop(k)
            for k in list(overrides)
            if k.startswith("duration_")
        }
        try:
            config = replace(self, **overrides)
            if asr_overrides:
                config = replace(config, asr=replace(config.asr, **asr_overrides))
            if duration_overrides:
                config = replace(config, duration=replace(config.duration, **duration_overrides))
        except TypeError as e:
            raise ConfigurationError(f"Invalid override: {e}") from e
        return config

    def validate_paths(self) -> None:
        corpus_dir = self.paths.corpus_dir
        if corpus_dir is not None and not corpus_dir.is_dir():
            raise ConfigurationError(f"Corpus directory {corpus_dir} does not exist")


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a TOML pipeline config; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigurationError(f"Config file {path} does not exist") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid TOML: {e}") from e
    config = PipelineConfig.from_dict(data, base_dir=path.parent)
    config.validate_paths()
    return config


def resolve_workspace(explicit: str | Path | None, config: PipelineConfig) -> Path:
    """Workspace directory: the explicit flag, then $ALIGNER_WORKSPACE, then the config."""
    if explicit is not None:
        workspace = Path(explicit)
    elif os.environ.get(WORKSPACE_ENV_VAR):
        workspace = Path(os.environ[WORKSPACE_ENV_VAR])
    elif config.paths.workspace_dir is not None:
        workspace = config.paths.workspace_dir
    else:
        workspace = Path("workspace")
    for name in WORKSPACE_SUBDIRS:
        (workspace / name).mkdir(parents=True, exist_ok=True)
    return workspace
