"""Experiment configuration: one YAML file plus dotted ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ihr.errors import InvalidConfig
from ihr.harness import TrainerConfig
from ihr.merge import STRATEGIES, MergeConfig
from ihr.tasks import StreamConfig

OUTPUT_ENV = "IHR_OUTPUT_DIR"
DEFAULT_TAUS = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0)


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    memory_size: int = 200
    sweep_taus: list = field(default_factory=lambda: list(DEFAULT_TAUS))
    output_dir: str | None = None

    def stream_for(self, seed):
        return dataclasses.replace(self.stream, root_seed=int(seed))

    def to_dict(self):
        return {
            "seeds": list(self.seeds),
            "strategies": list(self.strategies),
            "output_dir": self.output_dir,
            "stream": _plain(dataclasses.asdict(self.stream)),
            "trainer": _plain(dataclasses.asdict(self.trainer)),
            "merge": _plain(dataclasses.asdict(self.merge)),
            "er": {"memory_size": self.memory_size},
            "sweep": {"taus": list(self.sweep_taus)},
        }


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_SECTIONS = {"stream": StreamConfig, "trainer": TrainerConfig, "merge": MergeConfig}
_TOP = {"seeds", "strategies", "output_dir", "er", "sweep", *_SECTIONS}


def parse_override(item):
    """``"merge.tau=0.5"`` -> ``(["merge", "tau"], 0.5)``; the value is read as YAML."""
    if "=" not in item:
        raise InvalidConfig(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise InvalidConfig(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"cannot parse value for {key}: {exc}") from None
    return path, value


def _apply(raw, path, value):
    node = raw
    for p in path[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InvalidConfig(f"override {'.'.join(path)} descends into a non-section")
    node[path[-1]] = value


def _build(cls, section, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidConfig(f"section {section} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(f"unknown key {section}.{unknown[0]}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kw)
    except InvalidConfig as exc:
        raise InvalidConfig(f"{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{section}: {exc}") from None


def build_config(raw: dict):
    unknown = sorted(set(raw) - _TOP)
    if unknown:
        raise InvalidConfig(f"unknown key {unknown[0]}")
    if "root_seed" in (raw.get("stream") or {}):
        raise InvalidConfig("stream.root_seed is set per run from `seeds`")
    cfg = ExperimentConfig(
        stream=_build(StreamConfig, "stream", raw.get("stream")),
        trainer=_build(TrainerConfig, "trainer", raw.get("trainer")),
        merge=_build(MergeConfig, "merge", raw.get("merge")),
    )
    if "seeds" in raw:
        seeds = raw["seeds"]
        seeds = [seeds] if isinstance(seeds, int) else seeds
        if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise InvalidConfig("seeds must be a non-empty list of nonnegative integers")
        cfg.seeds = list(seeds)
    if "strategies" in raw:
        bad = [s for s in raw["strategies"] or [] if s not in STRATEGIES]
        if bad or not raw["strategies"]:
            raise InvalidConfig(f"strategies: unknown or empty entry {bad[:1]}")
        cfg.strategies = list(raw["strategies"])
    er = raw.get("er") or {}
    if set(er) - {"memory_size"}:
        raise InvalidConfig(f"unknown key er.{sorted(set(er) - {'memory_size'})[0]}")
    if "memory_size" in er:
        if not isinstance(er["memory_size"], int) or er["memory_size"] < 1:
            raise InvalidConfig("er.memory_size must be a positive integer")
        cfg.memory_size = er["memory_size"]
    sweep = raw.get("sweep") or {}
    if set(sweep) - {"taus"}:
        raise InvalidConfig(f"unknown key sweep.{sorted(set(sweep) - {'taus'})[0]}")
    if "taus" in sweep:
        taus = sweep["taus"]
        if not isinstance(taus, list) or not taus:
            raise InvalidConfig("sweep.taus must be a non-empty list")
        try:
            cfg.sweep_taus = [float(x) for x in taus]
        except (TypeError, ValueError):
            raise InvalidConfig("sweep.taus must be numbers") from None
    cfg.output_dir = raw.get("output_dir")
    return cfg


def load_config(path=None, overrides=()):
    """Read ``path`` (or start from defaults), apply overrides, validate."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidConfig(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"cannot parse {p}: {exc}") from None
        if not isinstance(raw, dict):
            raise InvalidConfig(f"{p} must hold a mapping at top level")
    for item in overrides:
        _apply(raw, *parse_override(item))
    return build_config(raw)


def resolve_output_dir(cli_out, cfg: ExperimentConfig):
    return Path(cli_out or os.environ.get(OUTPUT_ENV) or cfg.output_dir or "results")
