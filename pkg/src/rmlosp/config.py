"""YAML experiment configs: strict parsing with positioned errors, and serialisation."""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

import yaml

from .experiments import ExperimentConfig, preset, PRESETS

CONFIG_DIR = Path(__file__).with_name("configs")
# keys a config file must spell out even though the dataclass has defaults
FILE_REQUIRED = ("dt", "seed")


class ConfigError(ValueError):
    pass


def _where(node) -> str:
    return f"line {node.start_mark.line + 1}"


def _convert(node, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if isinstance(node, yaml.ScalarNode) and node.tag == "tag:yaml.org,2002:null":
            if type(None) in args:
                return None
        inner = [a for a in args if a is not type(None)]
        return _convert(node, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{path}: expected a table at {_where(node)}")
        return _build_dataclass(node, tp, path)
    if origin is dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{path}: expected a table at {_where(node)}")
        kt, vt = args
        return {_convert(k, kt, path): _convert(v, vt, f"{path}.{k.value}") for k, v in node.value}
    if origin is list:
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{path}: expected a list at {_where(node)}")
        return [_convert(v, args[0], f"{path}[{i}]") for i, v in enumerate(node.value)]
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{path}: expected a {tp.__name__} at {_where(node)}")
    value = yaml.safe_load(node.value) if node.style is None else node.value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {node.value!r} at {_where(node)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {node.value!r} at {_where(node)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {node.value!r} at {_where(node)}")
        return float(value)
    if tp is str:
        return str(node.value)
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build_dataclass(node, cls, path: str):
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for knode, vnode in node.value:
        key = knode.value
        if key not in fields:
            raise ConfigError(f"unknown key {path + '.' if path else ''}{key} at {_where(knode)}")
        kwargs[key] = _convert(vnode, hints[key], f"{path + '.' if path else ''}{key}")
    for name, f in fields.items():
        no_default = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if name not in kwargs and (no_default or (cls is ExperimentConfig and name in FILE_REQUIRED)):
            raise ConfigError(f"missing required key {path + '.' if path else ''}{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if root is None:
        raise ConfigError("empty config")
    cfg = _build_dataclass(root, ExperimentConfig, "")
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def serialize(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None, width=100)


def load(spec: str) -> ExperimentConfig:
    """A preset name or a path to a YAML config."""
    if spec in PRESETS:
        return preset(spec)
    if Path(spec).suffix in (".yaml", ".yml") or Path(spec).exists():
        return parse_config(spec)
    raise ConfigError(f"unknown preset {spec!r}; choose from {', '.join(PRESETS)} or pass a config file")


_HEADER = """\
# {name}: shipped preset, regenerate with `rmlosp dump-presets`.
# Model values (truth, initial estimates, sensor and target layouts) follow the
# published experiment where it states them; layouts it leaves unspecified and
# every step-size constant are implementer choices.
"""


def write_preset_files(directory=CONFIG_DIR) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name in PRESETS:
        p = directory / f"{name}.yaml"
        p.write_text(_HEADER.format(name=name) + serialize(preset(name)))
        out.append(p)
    return out
