"""Flat ``section.key = value`` run configuration with typed defaults.

Every key the pipeline understands is listed in ``DEFAULTS``; anything else in a
config file is rejected so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .catalog import FULL_SCALE_POSITIVES, CatalogConfig
from .layers import BackboneConfig, LRNConfig
from .models import MatchingConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed line, unknown key or a value of the wrong type."""


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _arch(s: str) -> str:
    if s.lower() not in ("a", "b", "c"):
        raise ValueError(f"arch must be a, b or c, got {s!r}")
    return s.lower()


def _mode(s: str) -> str:
    if s not in ("whole", "partial", "direct"):
        raise ValueError(f"mode must be whole, partial or direct, got {s!r}")
    return s


def _split(s: str) -> str:
    if s not in ("train", "val", "test"):
        raise ValueError(f"split must be train, val or test, got {s!r}")
    return s


# key -> (default text, parser); order is the order of the resolved-config copy
DEFAULTS: dict[str, tuple[str, object]] = {
    "seed": ("0", int),
    "run.dir": ("runs", str),
    "data.n_users": ("8", int),
    "data.items_per_category": ("300", int),
    "data.n_attributes": ("8", int),
    "data.image_size": ("32", int),
    "data.positives": ("40,10,14", _ints),
    "data.neutral_ratio": ("6", int),
    "data.candidate_multiplier": ("50", int),
    "data.shared_taste": ("0.5", float),
    "data.spectral_bound": ("1.0", float),
    "data.noise_fraction": ("0.1", float),
    "data.render_seed": ("7", int),
    "model.arch": ("c", _arch),
    "model.feature_dim": ("64", int),
    "model.widths": ("16,32,64", _ints),
    "model.lrn_size": ("5", int),
    "model.lrn_alpha": ("0.0001", float),
    "model.lrn_beta": ("0.75", float),
    "model.lrn_k": ("1.0", float),
    "model.hidden_multiplier_b": ("4", int),
    "model.hidden_multiplier_c": ("2", int),
    "model.init_std": ("0.01", float),
    "model.matching_lrn": ("true", _bool),
    "train.batch_size": ("30", int),
    "train.epochs": ("18", int),
    "train.base_lr": ("0.001", float),
    "train.fresh_lr_multiplier": ("100", float),
    "train.finetune_lr_drop": ("3", float),
    "train.momentum": ("0.9", float),
    "train.weight_decay": ("0.002", float),
    "train.neutrals_per_positive": ("6", int),
    "train.pretrain_epochs": ("15", int),
    "train.pretrain_lr": ("0.1", float),
    "train.mode": ("whole", _mode),
    "eval.split": ("test", _split),
    "eval.k": ("10", int),
}


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.values = {}
        for key, (default, parse) in DEFAULTS.items():
            text = self.raw.get(key, default)
            try:
                self.values[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}") from None
        for key in self.raw:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            raw = parse_text(p.read_text(), str(p))
        for k, v in (overrides or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            raw[k] = str(v)
        return cls(raw)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, **kw) -> "RunConfig":
        """Copy with some keys replaced; keyword names use ``__`` for the dot."""
        raw = dict(self.raw)
        for k, v in kw.items():
            raw[k.replace("__", ".")] = v if isinstance(v, str) else _text(v)
        return RunConfig(raw)

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_text(self.values[k])}\n" for k in DEFAULTS)

    # -- component configs ------------------------------------------------------

    def catalog(self) -> CatalogConfig:
        v = self.values
        return CatalogConfig(
            n_users=v["data.n_users"], items_per_category=v["data.items_per_category"],
            n_attributes=v["data.n_attributes"], image_size=v["data.image_size"],
            positives=v["data.positives"], neutral_ratio=v["data.neutral_ratio"],
            candidate_multiplier=v["data.candidate_multiplier"], shared_taste=v["data.shared_taste"],
            spectral_bound=v["data.spectral_bound"], noise_fraction=v["data.noise_fraction"],
            render_seed=v["data.render_seed"])

    def backbone(self) -> BackboneConfig:
        v = self.values
        lrn = LRNConfig(v["model.lrn_size"], v["model.lrn_alpha"], v["model.lrn_beta"], v["model.lrn_k"])
        return BackboneConfig(image_size=v["data.image_size"], feature_dim=v["model.feature_dim"],
                              widths=v["model.widths"], lrn=lrn)

    def matching(self) -> MatchingConfig:
        v = self.values
        return MatchingConfig(v["model.hidden_multiplier_b"], v["model.hidden_multiplier_c"],
                              v["model.init_std"], v["model.matching_lrn"])

    def train(self, mode: str | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["train.batch_size"], epochs=v["train.epochs"], base_lr=v["train.base_lr"],
            fresh_lr_multiplier=v["train.fresh_lr_multiplier"], finetune_lr_drop=v["train.finetune_lr_drop"],
            momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
            neutrals_per_positive=v["train.neutrals_per_positive"],
            seed=v["seed"], mode=mode or v["train.mode"], pretrain_epochs=v["train.pretrain_epochs"],
            pretrain_lr=v["train.pretrain_lr"])


def _text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


PAPER_SCALE = {"data.positives": ",".join(map(str, FULL_SCALE_POSITIVES))}
