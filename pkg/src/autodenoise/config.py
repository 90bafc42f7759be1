"""Run configuration: a JSON file plus command-line overrides (flags win)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .engine import DenoiseConfig

METHODS = ("autodenoise", "tce", "rce", "random", "none")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # data
    dataset: str | None = None
    schema: str | None = None
    split_dir: str | None = None
    n_users: int = 500
    n_items: int = 200
    n_interactions: int = 20000
    teacher_rank: int = 8
    synth_seed: int = 0
    split_seed: int = 0
    flip_rate: float = 0.0
    noise_seed: int = 0
    # model
    model: str = "deepfm"
    batch_size: int = 256
    embed_dim: int = 16
    model_lr: float = 1e-3
    optimizer: str = "adam"
    max_train_epochs: int = 30
    patience: int = 3
    # denoising
    method: str = "autodenoise"
    warmup_epochs: int = 4
    epochs: int = 50
    epsilon: float = 0.98
    policy_lr: float = 1e-4
    selection_mode: str = "topk"
    mc_samples: int = 1
    reward_scope: str = "all"
    reward_baseline: str = "none"
    warmup_passes: int = 1
    fixed_env_init: bool = True
    policy_sees_label: bool = True
    policy_batchnorm: bool = True
    policy_dropout: float = 0.2
    select_prior: float = 0.5
    seed: int = 0
    # baselines
    tce_max_drop: float = 0.2
    tce_anneal_steps: int = 1000
    rce_gamma: float = 0.25
    random_drop_rate: float = 0.2
    # output
    plots: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("method", self.method in METHODS, f"must be one of {METHODS}"),
            ("model", self.model in ("fm", "deepfm"), "must be 'fm' or 'deepfm'"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("embed_dim", self.embed_dim >= 1, "must be >= 1"),
            ("epsilon", 0.0 < self.epsilon <= 1.0, "must be in (0, 1]"),
            ("warmup_epochs", self.warmup_epochs >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("flip_rate", 0.0 <= self.flip_rate <= 1.0, "must be in [0, 1]"),
            ("policy_lr", self.policy_lr > 0, "must be positive"),
            ("model_lr", self.model_lr > 0, "must be positive"),
            ("selection_mode", self.selection_mode in ("topk", "individual"), "must be 'topk' or 'individual'"),
            ("optimizer", self.optimizer in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
            ("max_train_epochs", self.max_train_epochs >= 1, "must be >= 1"),
            ("patience", self.patience >= 1, "must be >= 1"),
            ("tce_max_drop", 0.0 <= self.tce_max_drop < 1.0, "must be in [0, 1)"),
            ("tce_anneal_steps", self.tce_anneal_steps >= 1, "must be >= 1"),
            ("rce_gamma", self.rce_gamma >= 0, "must be >= 0"),
            ("random_drop_rate", 0.0 <= self.random_drop_rate <= 1.0, "must be in [0, 1]"),
            ("select_prior", 0.0 < self.select_prior < 1.0, "must be in (0, 1)"),
            ("policy_dropout", 0.0 <= self.policy_dropout < 1.0, "must be in [0, 1)"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, f"{msg}, got {getattr(self, key)!r}")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for raw_key, value in d.items():
            key = raw_key.replace("-", "_")
            if key not in known:
                raise ConfigError(raw_key, "unknown key")
            kwargs[key] = _coerce(key, known[key], value)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("?", str(exc)) from exc

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(str(path), "top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def override(self, **changes) -> RunConfig:
        merged = self.to_dict()
        merged.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(merged)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def denoise_config(self) -> DenoiseConfig:
        return DenoiseConfig(
            warmup_epochs=self.warmup_epochs,
            epochs=self.epochs,
            epsilon=self.epsilon,
            selection_mode=self.selection_mode,
            policy_lr=self.policy_lr,
            model_lr=self.model_lr,
            optimizer=self.optimizer,
            mc_samples=self.mc_samples,
            reward_scope=self.reward_scope,
            reward_baseline=self.reward_baseline,
            warmup_passes=self.warmup_passes,
            fixed_env_init=self.fixed_env_init,
            max_epochs=self.max_train_epochs,
            patience=self.patience,
            policy_embed_dim=self.embed_dim,
            policy_dropout=self.policy_dropout,
            policy_batchnorm=self.policy_batchnorm,
            policy_sees_label=self.policy_sees_label,
            select_prior=self.select_prior,
            seed=self.seed,
        )


def _coerce(key: str, f: dataclasses.Field, value):
    """Accept strings from ``--set key=value`` for typed fields."""
    default = f.default if f.default is not dataclasses.MISSING else None
    if not isinstance(value, str) or isinstance(default, str) or default is None and key in ("dataset", "schema", "split_dir"):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r}") from None
    return value
