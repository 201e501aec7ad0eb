"""Run configuration: one frozen dataclass tree, loadable from JSON.

Defaults reproduce the published hyperparameters (64-d goal space, 128-d
content, 8 heads, Adam at 1e-5). :func:`small_config` is the reduced preset
the experiment scripts use so a full run fits on a laptop CPU.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataio import SynthConfig
from .goal_embed import ReconTrainConfig
from .nncore import AdamConfig
from .page_encoder import EstimatorConfig
from .session_model import ModelConfig
from .tasks import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    taxonomy: str = ""  # JSON path; empty means a generated taxonomy of the size below
    n_categories: int = 4
    leaves_per_category: int = 5
    synth: SynthConfig = field(default_factory=SynthConfig)
    recon: ReconTrainConfig = field(default_factory=ReconTrainConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rec_train: TrainConfig = field(default_factory=TrainConfig)
    rev_train: TrainConfig = field(default_factory=TrainConfig)
    min_page_count: int = 10
    min_session_len: int = 10
    p_pop: int = 10
    k_cand: int = 50_000
    revisit_threshold: float = 0.5

    def __post_init__(self):
        if self.n_categories < 1 or self.leaves_per_category < 1:
            raise ConfigError("taxonomy size must be positive")
        if self.p_pop < 0 or self.k_cand < 1:
            raise ConfigError("p_pop must be >= 0 and k_cand >= 1")
        if not 0.0 < self.revisit_threshold < 1.0:
            raise ConfigError("revisit_threshold must lie in (0, 1)")

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with ``seed`` pushed into every seeded component."""
        return replace(
            self,
            seed=seed,
            synth=replace(self.synth, seed=seed),
            recon=replace(self.recon, seed=seed),
            estimator=replace(self.estimator, seed=seed),
            model=replace(self.model, seed=seed),
            rec_train=replace(self.rec_train, seed=seed),
            rev_train=replace(self.rev_train, seed=seed),
        )

    def with_mode(self, mode: str) -> "RunConfig":
        try:
            return replace(self, model=replace(self.model, mode=mode))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def small_config(seed: int = 0) -> RunConfig:
    """Reduced dimensions and faster optimizers for CPU experiments."""
    fast = AdamConfig(lr=3e-3)
    cfg = RunConfig(
        recon=ReconTrainConfig(dim=16),
        estimator=EstimatorConfig(d_h=16, d_c=32, host_buckets=1024, content_buckets=4096,
                                  epochs=5, adam=fast),
        model=ModelConfig(d_h=16, d_c=32, d_V=32, hidden=64, heads=4,
                          host_buckets=1024, content_buckets=4096),
        rec_train=TrainConfig(epochs=5, adam=fast),
        rev_train=TrainConfig(epochs=20, adam=fast),
    )
    return cfg.with_seed(seed)


PRESETS = {"large": lambda seed=0: RunConfig().with_seed(seed), "small": small_config}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{where}.{key}" if where else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``data`` on ``base`` (default: full-size defaults); unknown keys are errors."""
    merged = _merge(RunConfig().to_dict() if base is None else base.to_dict(), data, "")
    return _build(RunConfig, merged, "")


def _merge(base: dict, over: dict, where: str) -> dict:
    if not isinstance(over, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"{where or 'config'}: unknown key {k!r}")
        if isinstance(base[k], dict):
            out[k] = _merge(base[k], v, f"{where}.{k}" if where else k)
        else:
            out[k] = v
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, base)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
