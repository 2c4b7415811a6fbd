"""Strict YAML run configuration.

Top-level keys: ``seed``, ``out``, ``task``, ``model``, ``optim``,
``gradcheck``. Every mapping is checked against the fields of the dataclass
it populates; unknown or duplicated keys are errors reported with their line.
``model.n_objects`` and ``model.d_in`` default to the values implied by the
task.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import CoRelNetConfig, ModelSpec, PrediNetConfig, RelConvBlockConfig, TransformerConfig
from .tasks import CARD_DIM, RELGAMES
from .training import OptimConfig

RELGAMES_ALL = "relgames_all"
TASK_NAMES = ("set", *RELGAMES, "match_to_sample", RELGAMES_ALL)


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, line and key path."""


@dataclass
class SizesConfig:
    train: int = 1000
    val: int = 200
    test: int = 200


@dataclass
class TaskConfig:
    name: str = "set"
    n: int = 5
    sigma: float = 0.0
    split_seed: int | None = None
    sizes: SizesConfig = field(default_factory=SizesConfig)
    vocab: str = "pentominoes"
    test_vocab: str | None = None
    vocab_size: int = 32
    dim: int = 16

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASK_NAMES}")
        if isinstance(self.sizes, dict):
            self.sizes = SizesConfig(**self.sizes)

    @property
    def n_objects(self) -> int:
        return self.n if self.name == "set" else 9

    @property
    def d_in(self) -> int:
        return CARD_DIM if self.name == "set" else self.dim


@dataclass
class GradcheckConfig:
    h: float = 1e-5
    tol: float = 1e-4
    components: list[str] | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    task: TaskConfig | None = None
    model: ModelSpec | None = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    gradcheck: GradcheckConfig | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    (RunConfig, "task"): TaskConfig,
    (RunConfig, "model"): ModelSpec,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "gradcheck"): GradcheckConfig,
    (TaskConfig, "sizes"): SizesConfig,
    (ModelSpec, "corelnet"): CoRelNetConfig,
    (ModelSpec, "predinet"): PrediNetConfig,
    (ModelSpec, "transformer"): TransformerConfig,
}
_LISTS = {(ModelSpec, "blocks"): RelConvBlockConfig}


def _where(source: str, node: yaml.Node) -> str:
    return f"{source}:{node.start_mark.line + 1}"


def _check(node: yaml.Node, cls: type, source: str, path: str) -> None:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{_where(source, node)}: {path or 'top level'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    seen = set()
    for key_node, value_node in node.value:
        key = key_node.value
        here = f"{path}.{key}" if path else key
        if key in seen:
            raise ConfigError(f"{_where(source, key_node)}: duplicate key {here!r}")
        seen.add(key)
        if key not in names:
            raise ConfigError(f"{_where(source, key_node)}: unknown key {here!r} "
                              f"(allowed: {', '.join(sorted(names))})")
        if (cls, key) in _NESTED and not (isinstance(value_node, yaml.ScalarNode) and value_node.tag.endswith(":null")):
            _check(value_node, _NESTED[(cls, key)], source, here)
        elif (cls, key) in _LISTS:
            if not isinstance(value_node, yaml.SequenceNode):
                raise ConfigError(f"{_where(source, value_node)}: {here} must be a list")
            for i, item in enumerate(value_node.value):
                _check(item, _LISTS[(cls, key)], source, f"{here}[{i}]")


def _build(cls: type, data: dict, path: str):
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for key, value in data.items():
        here = f"{path}.{key}" if path else key
        if (cls, key) in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[(cls, key)], value, here)
        elif (cls, key) in _LISTS:
            value = [_build(_LISTS[(cls, key)], v, f"{here}[{i}]") for i, v in enumerate(value)]
        else:
            _check_scalar_type(hints.get(key), value, here)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _check_scalar_type(hint, value, path: str) -> None:
    if hint is None or value is None:
        return
    is_union = typing.get_origin(hint) in (typing.Union, types.UnionType)
    allowed = [a for a in typing.get_args(hint) if a is not type(None)] if is_union else [hint]
    for a in allowed:
        origin = typing.get_origin(a) or a
        if origin is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return
        if origin is int and isinstance(value, int) and not isinstance(value, bool):
            return
        if origin in (str, bool, list, dict) and isinstance(value, origin):
            return
        if origin not in (int, float, str, bool, list, dict):
            return
    names = "/".join(getattr(typing.get_origin(a) or a, "__name__", str(a)) for a in allowed)
    raise ConfigError(f"{path}: expected {names}, got {type(value).__name__} {value!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from exc
    if node is None:
        return RunConfig()
    _check(node, RunConfig, source, "")
    model = data.get("model")
    task = data.get("task")
    if isinstance(model, dict):
        try:
            probe = TaskConfig(**task) if isinstance(task, dict) else None
        except (TypeError, ValueError):
            probe = None  # reported with its path by _build below
        if probe is not None:
            model.setdefault("n_objects", probe.n_objects)
            model.setdefault("d_in", probe.d_in)
        missing = [k for k in ("kind", "n_objects", "d_in") if k not in model]
        if missing:
            raise ConfigError(f"{source}: model is missing {', '.join(missing)} (and no task implies them)")
    try:
        return _build(RunConfig, data, "")
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


def bundled_config_path(name: str) -> Path:
    """Path of a reference config shipped inside the package (``name`` without ``.yaml``)."""
    path = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return path
