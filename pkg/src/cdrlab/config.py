"""Experiment configuration: dataclass sections, JSON loading, overrides, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_ENV_VAR = "CDR_CONFIG"


class ConfigError(ValueError):
    pass


def _check_range(name: str, lo: float, hi: float, positive: bool = True, allow_equal: bool = True) -> None:
    if not (lo <= hi if allow_equal else lo < hi):
        raise ConfigError(f"{name}: invalid range ({lo}, {hi})")
    if positive and lo <= 0:
        raise ConfigError(f"{name}: range must be positive, got ({lo}, {hi})")


@dataclass
class SceneConfig:
    """Physical scene parameters for one paradigm.

    Sizes are disc radii / square half-extents in meters. Body 0 uses
    ``agent_size_range`` when set (controlled paradigm).
    """

    n_bodies: int = 2
    frame_half_extent: float = 1.0
    size_range: tuple[float, float] = (0.12, 0.25)
    agent_size_range: tuple[float, float] | None = None
    mass_range: tuple[float, float] = (0.5, 2.0)
    shapes: tuple[str, ...] = ("disc", "square")
    drag: float = 0.2
    restitution: float = 0.9
    impulse_range: tuple[float, float] = (20.0, 60.0)
    action_range: tuple[float, float] = (0.0, 0.0)
    dt: float = 1.0 / 30.0
    substeps: int = 4
    episode_length: int = 30
    max_placement_attempts: int = 1000

    def validate(self) -> None:
        if not 2 <= self.n_bodies <= 4:
            raise ConfigError(f"scene.n_bodies must be in [2, 4], got {self.n_bodies}")
        if self.frame_half_extent <= 0:
            raise ConfigError("scene.frame_half_extent must be positive")
        _check_range("scene.size_range", *self.size_range)
        if self.agent_size_range is not None:
            _check_range("scene.agent_size_range", *self.agent_size_range)
        _check_range("scene.mass_range", *self.mass_range)
        _check_range("scene.impulse_range", *self.impulse_range, positive=False)
        _check_range("scene.action_range", *self.action_range, positive=False)
        if self.impulse_range[0] < 0 or self.action_range[0] < 0:
            raise ConfigError("scene force magnitudes must be non-negative")
        if not self.shapes or any(s not in ("disc", "square") for s in self.shapes):
            raise ConfigError(f"scene.shapes must be a non-empty subset of disc/square, got {self.shapes}")
        if self.drag < 0 or self.drag * self.dt / self.substeps >= 1:
            raise ConfigError("scene.drag must satisfy 0 <= drag * substep_dt < 1")
        if not 0 <= self.restitution <= 1:
            raise ConfigError("scene.restitution must lie in [0, 1]")
        if self.dt <= 0 or self.substeps < 1:
            raise ConfigError("scene.dt and scene.substeps must be positive")
        if self.episode_length < 2:
            raise ConfigError("scene.episode_length must be >= 2")
        largest = max(self.size_range[1], (self.agent_size_range or self.size_range)[1]) * 2**0.5
        if largest >= self.frame_half_extent:
            raise ConfigError("scene: bodies do not fit in the frame")


def uncontrolled_scene() -> SceneConfig:
    return SceneConfig()


def controlled_scene() -> SceneConfig:
    # quasi-static pushing: drag removes ~5/6 of the velocity every substep.
    # One agent and one larger object; a full push moves the agent ~6 px at 32x32.
    return SceneConfig(
        n_bodies=2,
        size_range=(0.25, 0.3),
        agent_size_range=(0.15, 0.2),
        mass_range=(1.0, 1.0),
        drag=100.0,
        restitution=0.2,
        impulse_range=(0.0, 0.0),
        action_range=(0.0, 7200.0),
        episode_length=15,
    )


@dataclass
class ScenesConfig:
    uncontrolled: SceneConfig = field(default_factory=uncontrolled_scene)
    controlled: SceneConfig = field(default_factory=controlled_scene)

    def for_paradigm(self, paradigm: str) -> SceneConfig:
        if paradigm == "uncontrolled":
            return self.uncontrolled
        if paradigm == "controlled":
            return self.controlled
        raise ConfigError(f"unknown paradigm {paradigm!r}")


@dataclass
class RenderConfig:
    resolution: int = 32
    holdout_families: int = 2
    split_seed: int = 7
    light_range: tuple[float, float] = (0.5, 1.5)
    noise_std_range: tuple[float, float] = (0.0, 0.05)
    # background palettes are drawn with reduced spread so bodies stay findable
    background_contrast: float = 0.3

    def domain_kwargs(self) -> dict:
        """Keyword arguments for ``renderer.sample_domain``."""
        return dict(light_range=self.light_range, noise_std_range=self.noise_std_range,
                    background_contrast=self.background_contrast)

    def validate(self) -> None:
        if self.resolution not in (16, 32, 64):
            raise ConfigError(f"renderer.resolution must be 16, 32 or 64, got {self.resolution}")
        if not 0 <= self.holdout_families < 8:
            raise ConfigError("renderer.holdout_families must be in [0, 8)")
        lo, hi = self.light_range
        if not 0.5 <= lo <= hi <= 1.5:
            raise ConfigError("renderer.light_range must lie within [0.5, 1.5]")
        lo, hi = self.noise_std_range
        if not 0 <= lo <= hi <= 0.05:
            raise ConfigError("renderer.noise_std_range must lie within [0, 0.05]")
        if not 0 < self.background_contrast <= 1:
            raise ConfigError("renderer.background_contrast must lie in (0, 1]")


@dataclass
class DataConfig:
    uncontrolled_episodes: int = 2000
    controlled_episodes: int = 2000
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.uncontrolled_episodes < 1 or self.controlled_episodes < 1:
            raise ConfigError("data episode counts must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("data.val_fraction must be in (0, 1)")


@dataclass
class ModelConfig:
    latent_dim: int = 8
    conv_channels: tuple[int, int] = (8, 16)
    encoder_hidden: int = 64
    action_hidden: int = 64
    action_code: int = 16
    trunk_hidden: int = 64
    gru_hidden: int = 32
    horizons: int = 6
    context: int = 4

    def validate(self) -> None:
        for name in ("latent_dim", "encoder_hidden", "action_hidden", "action_code",
                     "trunk_hidden", "gru_hidden", "horizons", "context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")


LOSS_VARIANTS = ("cdr", "naive", "same_domain")
SIMILARITY_KINDS = ("dotexp", "bilinear", "negl2", "cosine")


@dataclass
class TrainConfig:
    paradigm: str = "controlled"
    loss: str = "cdr"
    similarity: str | None = None
    batch_size: int = 64
    epochs: int = 30
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    seed: int = 0
    within_sequence_negatives: bool = True
    # training items get freshly drawn domains instead of the episode's stored pair
    resample_domains: bool = True

    def validate(self) -> None:
        if self.paradigm not in ("controlled", "uncontrolled"):
            raise ConfigError(f"training.paradigm must be controlled or uncontrolled, got {self.paradigm!r}")
        if self.loss not in LOSS_VARIANTS:
            raise ConfigError(f"training.loss must be one of {LOSS_VARIANTS}, got {self.loss!r}")
        if self.similarity is not None and self.similarity not in SIMILARITY_KINDS:
            raise ConfigError(f"training.similarity must be one of {SIMILARITY_KINDS}")
        if self.paradigm == "uncontrolled" and self.loss == "same_domain":
            raise ConfigError("training: same_domain loss is unavailable for the uncontrolled paradigm")
        for name in ("batch_size", "epochs", "lr", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"training.{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("training: Adam betas must lie in (0, 1) and eps > 0")

    @property
    def similarity_kind(self) -> str:
        if self.similarity is not None:
            return self.similarity
        # controlled models are planned with in L2, so they are trained with it
        return "negl2" if self.paradigm == "controlled" else "bilinear"


@dataclass
class EvalConfig:
    pool_size: int = 2000
    n_queries: int = 200
    n_pairs: int = 200
    seed: int = 1000003

    def validate(self) -> None:
        if self.pool_size < 1 or self.n_queries < 1 or self.n_pairs < 1:
            raise ConfigError("evaluation sizes must be positive")


@dataclass
class PlanConfig:
    candidates: int = 1000
    max_steps: int = 10
    goal_tolerance: float = 0.05
    goal_steps: int = 10
    episodes: int = 20
    distance: str = "negl2"
    seed: int = 2000003

    def validate(self) -> None:
        if min(self.candidates, self.max_steps, self.goal_steps, self.episodes) < 1:
            raise ConfigError("planning counts must be positive")
        if self.goal_tolerance <= 0:
            raise ConfigError("planning.goal_tolerance must be positive")
        if self.distance not in ("negl2", "sqeuclidean", "euclidean", "cosine"):
            raise ConfigError(f"planning.distance {self.distance!r} not supported")


@dataclass
class Prop1Config:
    trials: int = 10
    n_samples: int = 4000
    x_dim: int = 3
    e_dim: int = 3
    feature_dim: int = 8
    out_dim: int = 4
    activation: str = "tanh"
    loss: str = "mse"
    steps: int = 1500
    lr: float = 0.02
    noise_std: float = 0.02
    dep_strength: float = 1.0
    seed: int = 31337

    def validate(self) -> None:
        if self.activation not in ("identity", "tanh"):
            raise ConfigError("prop1.activation must be identity or tanh")
        if self.loss not in ("mse", "infonce"):
            raise ConfigError("prop1.loss must be mse or infonce")
        if min(self.trials, self.n_samples, self.x_dim, self.e_dim, self.feature_dim,
               self.out_dim, self.steps) < 1:
            raise ConfigError("prop1 sizes must be positive")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    scene: ScenesConfig = field(default_factory=ScenesConfig)
    renderer: RenderConfig = field(default_factory=RenderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    planning: PlanConfig = field(default_factory=PlanConfig)
    prop1: Prop1Config = field(default_factory=Prop1Config)

    def validate(self) -> "ExperimentConfig":
        self.scene.uncontrolled.validate()
        self.scene.controlled.validate()
        if self.scene.controlled.agent_size_range is None:
            raise ConfigError("scene.controlled.agent_size_range is required")
        self.renderer.validate()
        self.data.validate()
        self.model.validate()
        self.training.validate()
        self.evaluation.validate()
        self.planning.validate()
        self.prop1.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> bytes:
        """SHA-256 over the canonical JSON form of the whole config."""
        return _digest(self.to_dict())

    def data_hash(self) -> bytes:
        """Hash of the sections that determine generated episodes and renders.

        Episode counts are left out: episode ``i`` is the same whatever the
        total, and the count is stored in the dataset file itself.
        """
        d = self.to_dict()
        return _digest({"seed": d["seed"], "scene": d["scene"], "renderer": d["renderer"]})

    def model_hash(self) -> bytes:
        """Hash of everything that determines a trained checkpoint."""
        d = self.to_dict()
        keys = ("seed", "scene", "renderer", "data", "model", "training")
        return _digest({k: d[k] for k in keys})


def _digest(obj: Any) -> bytes:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).digest()


def _build(cls: type, raw: Any, path: str) -> Any:
    if not dataclasses.is_dataclass(cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, sub)
        else:
            kwargs[name] = _coerce(current, value, sub)
    return cls(**kwargs)


def _coerce(current: Any, value: Any, path: str) -> Any:
    if isinstance(current, tuple) or (current is None and isinstance(value, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, int) and not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer")
    return value


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "").validate()


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Load a JSON config file (or defaults) and apply ``key.path=value`` overrides.

    When ``path`` is None the ``CDR_CONFIG`` environment variable is consulted;
    if that is unset as well the built-in defaults are used.
    """
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    raw: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw = json.loads(p.read_text())
    merged = _merge(ExperimentConfig().to_dict(), raw)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        _set_path(merged, key.strip().split("."), _parse_value(value.strip()))
    return config_from_dict(merged)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(d: dict, keys: list[str], value: Any) -> None:
    for k in keys[:-1]:
        if k not in d or not isinstance(d[k], dict):
            raise ConfigError(f"override: unknown section {'.'.join(keys)}")
        d = d[k]
    if keys[-1] not in d:
        raise ConfigError(f"override: unknown key {'.'.join(keys)}")
    d[keys[-1]] = value


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
