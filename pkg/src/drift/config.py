"""Run configuration: loading, overrides, validation and the resolved snapshot.

A run config is a nested document (YAML or JSON; JSON is the reference
serialization) with four sections::

    session:  strategy, epochs/iterations, schedule, optimizer, gate, eval, seed
    env:      PointReach2D parameters
    net:      channels, horizon, obs_horizon, ... (block mode follows the strategy)
    output:   dir, run_id, save_every

Only ``session.strategy`` is required. Problems are reported as
``ConfigError`` with ``file:line:`` prefixes where the offending key can be
located; the CLI maps them to exit code 2.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from pathlib import Path
from typing import Any, Optional

import yaml

from .diffusion import NetConfig
from .harness import MODE_TABLE, ConfigError, PointReach2D, SessionConfig

SECTIONS = ("session", "env", "net", "output")
SEED_ENV = "DRIFT_SEED"
# net fields fixed by the environment or managed by the session
_NET_RESERVED = {"action_dim", "obs_dim", "rank", "lora_alpha"}
_OUTPUT_DEFAULTS = {"dir": "runs", "run_id": None, "save_every": 0}


class _Locator:
    """Maps dotted key paths to source line numbers using the YAML node tree."""

    def __init__(self, text: str = "", source: str = "<config>"):
        self.source = source
        self.lines: dict[str, int] = {}
        if text:
            try:
                self._walk(yaml.compose(text), "")
            except yaml.YAMLError:
                pass

    def _walk(self, node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{path}.{k.value}" if path else str(k.value)
                self.lines[key] = k.start_mark.line + 1
                self._walk(v, key)

    def where(self, path: str) -> str:
        while path:
            if path in self.lines:
                return f"{self.source}:{self.lines[path]}: "
            path = path.rpartition(".")[0]
        return f"{self.source}: "


def parse_text(text: str, source: str = "<config>") -> tuple[dict, _Locator]:
    """Parse JSON (when ``source`` ends in .json) or YAML text into a dict."""
    if source.endswith(".json"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    else:
        try:
            doc = yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            pos = f"{mark.line + 1}:{mark.column + 1}" if mark else "?"
            raise ConfigError(f"{source}:{pos}: invalid YAML: {exc.problem or exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping of sections, got {type(doc).__name__}")
    return doc, _Locator(text, source)


def load_document(path) -> tuple[dict, _Locator]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_text(text, str(path))


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {item!r}: cannot parse value: {exc}") from exc
        *parents, leaf = key.split(".")
        node = doc
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {item!r}: {p} is not a section")
        node[leaf] = value
    return doc


def _check_type(value, tp, path: str, loc: _Locator) -> Any:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check_type(value, args[0], path, loc)
    bad = False
    if tp is bool:
        bad = not isinstance(value, bool)
    elif tp is int:
        bad = isinstance(value, bool) or not isinstance(value, int)
    elif tp is float:
        bad = isinstance(value, bool) or not isinstance(value, (int, float))
        value = value if bad else float(value)
    elif tp is str:
        bad = not isinstance(value, str)
    elif tp is tuple:
        bad = not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = value if bad else tuple(value)
    if bad:
        name = getattr(tp, "__name__", str(tp))
        raise ConfigError(f"{loc.where(path)}{path}: expected {name}, got {value!r}")
    return value


def _typed_fields(cls, section: dict, prefix: str, loc: _Locator, skip=()) -> dict:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init} - set(skip)
    out = {}
    for key, value in section.items():
        path = f"{prefix}.{key}"
        if key not in names:
            raise ConfigError(f"{loc.where(path)}unknown key {path!r}")
        tp = hints.get(key, object)
        out[key] = value if tp is object else _check_type(value, tp, path, loc)
    return out


@dataclasses.dataclass
class RunConfig:
    session: SessionConfig
    env: dict
    net: dict
    output: dict

    def to_dict(self) -> dict:
        """Fully resolved, JSON-serializable form; loading it reproduces this config."""
        net = dict(self.net)
        if "channels" in net:
            net["channels"] = list(net["channels"])
        return {
            "session": dataclasses.asdict(self.session),
            "env": dict(self.env),
            "net": net,
            "output": dict(self.output),
        }

    @property
    def run_id(self) -> str:
        rid = self.output.get("run_id")
        return rid if rid else f"{self.session.strategy}_s{self.session.seed}"


def build_run_config(doc: dict, loc: Optional[_Locator] = None, env_seed: Optional[str] = None) -> RunConfig:
    loc = loc or _Locator()
    for key in doc:
        if key not in SECTIONS:
            raise ConfigError(f"{loc.where(key)}unknown section {key!r}; expected {', '.join(SECTIONS)}")
    for key in SECTIONS:
        if key in doc and doc[key] is not None and not isinstance(doc[key], dict):
            raise ConfigError(f"{loc.where(key)}section {key!r} must be a mapping")
    session = dict(doc.get("session") or {})
    if "strategy" not in session:
        raise ConfigError(f"{loc.where('session')}missing required field 'session.strategy'")
    if env_seed is not None:
        try:
            session["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from exc
    sess_kw = _typed_fields(SessionConfig, session, "session", loc)
    gt = sess_kw.get("gate_threshold", "auto")
    if not (gt == "auto" or (isinstance(gt, (int, float)) and not isinstance(gt, bool))):
        raise ConfigError(f"{loc.where('session.gate_threshold')}session.gate_threshold: expected a number or 'auto'")
    try:
        cfg = SessionConfig(**sess_kw)
    except ConfigError as exc:
        field = next((f for f in sess_kw if f in str(exc)), "strategy")
        raise ConfigError(f"{loc.where('session.' + field)}{exc}") from exc

    env = dict(doc.get("env") or {})
    env_names = set(PointReach2D().params())
    for key, value in env.items():
        if key not in env_names:
            raise ConfigError(f"{loc.where('env.' + key)}unknown key 'env.{key}'")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{loc.where('env.' + key)}env.{key}: expected a number, got {value!r}")
    if "max_steps" in env and not isinstance(env["max_steps"], int):
        raise ConfigError(f"{loc.where('env.max_steps')}env.max_steps: expected int")

    net = dict(doc.get("net") or {})
    mode = net.pop("mode", None)
    if mode is not None:
        allowed = {m for m, _ in MODE_TABLE[cfg.strategy]}
        if cfg.strategy == "drift_rm":
            allowed.add("plain")
        if mode not in allowed:
            raise ConfigError(f"{loc.where('net.mode')}net.mode {mode!r} is inconsistent with strategy "
                              f"{cfg.strategy!r} (uses {sorted(allowed)})")
    net_kw = _typed_fields(NetConfig, net, "net", loc, skip=_NET_RESERVED | {"mode"})

    output = dict(_OUTPUT_DEFAULTS)
    for key, value in (doc.get("output") or {}).items():
        if key not in _OUTPUT_DEFAULTS:
            raise ConfigError(f"{loc.where('output.' + key)}unknown key 'output.{key}'")
        output[key] = value
    return RunConfig(cfg, env, net_kw, output)


def load_run_config(path=None, overrides=(), environ=None) -> RunConfig:
    """Load, override (``--set``), apply ``DRIFT_SEED``, validate."""
    environ = os.environ if environ is None else environ
    if path is None:
        doc, loc = {}, _Locator()
    else:
        doc, loc = load_document(path)
    doc = apply_overrides(doc, overrides)
    return build_run_config(doc, loc, environ.get(SEED_ENV))


def write_snapshot(run: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
