"""Flat ``key = value`` config files with ``include`` and shipped presets."""

from __future__ import annotations

import ast
from importlib import resources
from pathlib import Path

from .corpus import build_corpus
from .distill import DistillConfig, StudentConfig
from .model import ModelConfig
from .objectives import LossWeights, NoiseConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


PRESET_DIR = "presets"
MAX_INCLUDE_DEPTH = 16

GRAMMAR_KEYS = ("grammar.number_lexicon", "grammar.entity_lexicon", "grammar.connective_pairs")


def preset_names() -> list[str]:
    root = resources.files("sentvec").joinpath(PRESET_DIR)
    return sorted(p.name[: -len(".conf")] for p in root.iterdir() if p.name.endswith(".conf"))


def _preset_text(name: str) -> str:
    f = resources.files("sentvec").joinpath(PRESET_DIR, f"{name}.conf")
    if not f.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return f.read_text()


def _value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    if raw.lower() in ("none", "null"):
        return None
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config(text: str, base_dir: Path | None = None, _depth: int = 0, origin: str = "<text>") -> dict:
    """Parse ``key = value`` lines; ``include = NAME`` pulls in a preset or a
    file (relative to ``base_dir``) whose values later lines override."""
    if _depth > MAX_INCLUDE_DEPTH:
        raise ConfigError(f"{origin}: include depth exceeds {MAX_INCLUDE_DEPTH}")
    out: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{n}: empty key")
        if key == "include":
            out.update(load_source(raw, base_dir, _depth + 1))
        else:
            out[key] = _value(raw)
    return out


def load_source(name: str, base_dir: Path | None = None, _depth: int = 0) -> dict:
    """A config file path, or a preset name."""
    path = Path(name)
    if base_dir is not None and not path.is_absolute():
        cand = base_dir / path
        if cand.is_file():
            path = cand
    if path.is_file():
        return parse_config(path.read_text(), path.parent, _depth, str(path))
    return parse_config(_preset_text(name), None, _depth, f"preset:{name}")


def load_config(path_or_preset: str | None, overrides: dict | None = None) -> dict:
    cfg = load_source(path_or_preset) if path_or_preset else load_source("defaults")
    cfg.update(overrides or {})
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def _require(cfg: dict, keys) -> None:
    for k in keys:
        if k not in cfg:
            raise ConfigError(f"missing required config key {k!r}", key=k)


def _build(cls, kwargs: dict, prefix: str):
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid {prefix} settings: {e}") from None
    except ValueError as e:
        raise ConfigError(f"invalid {prefix} settings: {e}") from None


def corpus_settings(cfg: dict) -> dict:
    _require(cfg, GRAMMAR_KEYS)
    c = _section(cfg, "corpus")
    g = _section(cfg, "grammar")
    seed = cfg.get("seed", 0) if "seed" not in c else c.pop("seed")
    return {"seed": int(seed), **c, **g}


def build_corpus_from_config(cfg: dict):
    s = corpus_settings(cfg)
    try:
        return build_corpus(**s)
    except TypeError as e:
        raise ConfigError(f"invalid corpus settings: {e}") from None


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return _build(ModelConfig, {"vocab_size": vocab_size, **_section(cfg, "model")}, "model")


def train_config(cfg: dict, section: str = "train") -> TrainConfig:
    t = _section(cfg, section)
    weights = _build(LossWeights, _section(cfg, "loss"), "loss")
    noise = _build(NoiseConfig, {"seed": cfg.get("seed", 0), **_section(cfg, "noise")}, "noise")
    t.setdefault("seed", cfg.get("seed", 0))
    return _build(TrainConfig, {**t, "weights": weights, "noise": noise}, section)


def finetune_config(cfg: dict) -> TrainConfig:
    t = train_config(cfg, "finetune")
    t.freeze_encoder = True
    return t


def distill_configs(cfg: dict, n_frames: int) -> tuple[StudentConfig, DistillConfig]:
    s = _build(StudentConfig, {"n_frames": n_frames, **_section(cfg, "student")}, "student")
    d = _section(cfg, "distill")
    render = _section(cfg, "render")
    d.setdefault("seed", cfg.get("seed", 0))
    if render:
        d["render"] = {**DistillConfig().render, **render}
    dc = _build(DistillConfig, d, "distill")
    return s, dc


def to_text(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]!r}\n" for k in sorted(cfg))
