"""DRFT checkpoint files: a JSON header with a named-array manifest, then raw arrays.

Layout (all integers little-endian)::

    b"DRFT"             4 bytes magic
    version             u32
    header_len          u64
    header              header_len bytes of UTF-8 JSON (sorted keys, compact)
    payload             arrays back to back, each starting at a multiple of 8

The header holds ``config_hash``, ``config``, ``manifest`` (one entry per
array: name, dtype ``f32``/``f64``, shape, byte offset into the payload and
byte length) and ``meta`` (anything else JSON can carry exactly: counters,
logs, generator states). Writing is a pure function of the checkpoint
contents, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"DRFT"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    exit_code = 1


class CheckpointVersionError(CheckpointError):
    exit_code = 3


class CheckpointCorruptError(CheckpointError):
    exit_code = 4

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{message}" + (f" (field: {field})" if field else ""))
        self.field = field


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _pad8(n: int) -> int:
    return (-n) % 8


def encode(ckpt: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"array {name!r} has dtype {arr.dtype}; only float32/float64 are stored")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw + b"\0" * _pad8(len(raw)))
        offset += len(raw) + _pad8(len(raw))
    header = {"config_hash": ckpt.config_hash, "config": ckpt.config, "manifest": manifest, "meta": ckpt.meta}
    hb = canonical_json(header).encode()
    return _PREFIX.pack(MAGIC, ckpt.version, len(hb)) + hb + b"".join(chunks)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = encode(ckpt)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def decode(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointCorruptError(f"file is {len(data)} bytes, shorter than the fixed prefix", "prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"bad magic {magic!r}", "magic")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise CheckpointCorruptError(f"header length {hlen} runs past end of file", "header_len")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"header is not valid JSON: {exc}", "header") from exc
    for key in ("config_hash", "config", "manifest", "meta"):
        if key not in header:
            raise CheckpointCorruptError("missing header entry", key)
    payload = memoryview(data)[start + hlen :]
    arrays = {}
    spans = []
    for i, ent in enumerate(header["manifest"]):
        where = f"manifest[{i}]"
        try:
            name, code, shape = ent["name"], ent["dtype"], tuple(ent["shape"])
            off, nbytes = int(ent["offset"]), int(ent["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointCorruptError(f"malformed manifest entry: {exc}", where) from exc
        if code not in _DTYPES:
            raise CheckpointCorruptError(f"unknown dtype {code!r}", f"{where}.dtype")
        if any((not isinstance(s, int)) or s < 0 for s in shape):
            raise CheckpointCorruptError(f"bad shape {list(shape)}", f"{where}.shape")
        expect = math.prod(shape) * _DTYPES[code].itemsize
        if nbytes != expect:
            raise CheckpointCorruptError(f"nbytes {nbytes} != {expect} for shape {list(shape)}", f"{where}.nbytes")
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointCorruptError(f"array {name!r} [{off}, {off + nbytes}) outside payload of {len(payload)} bytes",
                                         f"{where}.offset")
        if name in arrays:
            raise CheckpointCorruptError(f"duplicate array name {name!r}", f"{where}.name")
        spans.append((off, off + nbytes, where))
        arrays[name] = np.frombuffer(payload[off : off + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
    spans.sort()
    for (a0, a1, _), (b0, b1, w) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointCorruptError("overlapping arrays", f"{w}.offset")
    ckpt = Checkpoint(header["config"], arrays, header["meta"], version)
    if ckpt.config_hash != header["config_hash"]:
        raise CheckpointCorruptError("config hash does not match config", "config_hash")
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


def _dataset_arrays(prefix: str, ds) -> dict:
    trajs = ds.trajectories
    if not trajs:
        return {f"{prefix}/lengths": np.zeros(0)}
    return {
        f"{prefix}/obs": np.concatenate([t.observations for t in trajs]),
        f"{prefix}/act": np.concatenate([t.actions for t in trajs]),
        f"{prefix}/mask": np.concatenate([t.expert_label_mask for t in trajs]).astype(np.float64),
        f"{prefix}/lengths": np.array([len(t) for t in trajs], dtype=np.float64),
        f"{prefix}/success": np.array([t.success for t in trajs], dtype=np.float64),
    }


def _dataset_from(prefix: str, arrays: dict, obs_horizon: int, horizon: int):
    from .harness import Dataset, Trajectory

    ds = Dataset(obs_horizon=obs_horizon, horizon=horizon)
    lengths = arrays[f"{prefix}/lengths"].astype(np.int64)
    if lengths.size == 0:
        return ds
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    for k in range(len(lengths)):
        a, b = bounds[k], bounds[k + 1]
        ds.append(Trajectory(arrays[f"{prefix}/obs"][a:b], arrays[f"{prefix}/act"][a:b],
                             arrays[f"{prefix}/mask"][a:b] > 0.5, bool(arrays[f"{prefix}/success"][k] > 0.5)))
    return ds


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def session_config(session) -> dict:
    net_kw = dict(session.net_kw)
    if "channels" in net_kw:
        net_kw["channels"] = list(net_kw["channels"])
    return {
        "kind": "session",
        "session": asdict(session.cfg),
        "env": dict(session.env_params),
        "net": net_kw,
        "run_id": session.run_id,
        "eval_seed_base": session.eval_seed_base,
    }


def session_checkpoint(session) -> Checkpoint:
    from .harness import trainable_parameters

    net = session.policy.net
    arrays = {f"param/{k}": p.data for k, p in net.parameters().items()}
    opt = session.trainer.opt
    live = trainable_parameters(session.policy)
    arrays.update({f"adam/{k}": v for k, v in opt.state_arrays(live).items()})
    arrays.update(_dataset_arrays("data/base", session.d_base))
    arrays.update(_dataset_arrays("data/online", session.dataset))
    meta = {
        "layers": {path: {"kind": slot.layer.kind, "alpha": getattr(slot.layer, "alpha", None)}
                   for path, slot in _slot_paths(net)},
        "net_mode": net.mode,
        "adam_steps": opt.state_steps(live),
        "rng": {
            "train": _rng_state(session.train_rng),
            "rollout": _rng_state(session.rollout_rng),
            "adapter": _rng_state(session.adapter_rng),
        },
        "counters": {
            "stage": session.stage,
            "epoch": session.epoch,
            "iteration": session.iteration,
            "rank": session.rank,
            "pending_eval": session.pending_eval,
            "threshold": session.threshold,
        },
        "epochs": [asdict(r) for r in session.epochs],
        "checkpoints": [asdict(r) for r in session.checkpoints],
        "mode_log": [list(x) for x in session.mode_log],
    }
    return Checkpoint(session_config(session), arrays, meta)


def save_session(path, session) -> None:
    save_checkpoint(path, session_checkpoint(session))


def _session_args(config: dict):
    from .harness import SessionConfig

    net_kw = dict(config.get("net", {}))
    if "channels" in net_kw:
        net_kw["channels"] = tuple(net_kw["channels"])
    return SessionConfig(**config["session"]), dict(config.get("env", {})), net_kw


def _slot_paths(net):
    """(attribute path, slot) for every conv slot, in module-tree order."""
    from .diffusion import ConvSlot, Module

    out = []

    def walk(value, path):
        if isinstance(value, ConvSlot):
            out.append((path, value))
        elif isinstance(value, Module):
            for name, v in vars(value).items():
                if not name.startswith("_"):
                    walk(v, f"{path}.{name}" if path else name)
        elif isinstance(value, (list, tuple)):
            for i, v in enumerate(value):
                walk(v, f"{path}.{i}")

    walk(net, "")
    return out


def _rebuild_layer(slot, path: str, info: dict, A: dict):
    from .lowrank import FactoredConv, FactoredMatrix, LoraConv, PlainConv

    def arr(k):
        key = f"param/{path}.layer.{k}"
        if key not in A:
            raise CheckpointCorruptError(f"missing array {key!r}", "manifest")
        return A[key]

    g = slot.geom
    kind = info.get("kind")
    if kind == "plain":
        return PlainConv(g, arr("weight"), arr("bias"))
    if kind == "factored":
        # the frozen product is recomputed from the stored f32 factors, exactly as at partition time
        fm = FactoredMatrix(arr("u_train"), arr("s_train"), arr("v_train"), arr("u_frozen"), arr("s_frozen"),
                            arr("v_frozen"))
        return FactoredConv(g, fm, arr("bias"))
    if kind == "lora":
        return LoraConv(g, arr("w_conv"), arr("bias"), arr("w_down"), arr("w_up"), info["alpha"])
    raise CheckpointCorruptError(f"unknown layer kind {kind!r} for slot {path!r}", "meta.layers")


def restore_session(ckpt: Checkpoint):
    """Rebuild a ``DaggerSession`` exactly as it was when the checkpoint was taken."""
    from .harness import CheckpointRecord, DaggerSession, EpochRecord, ExpertGate, trainable_parameters

    if ckpt.config.get("kind") != "session":
        raise CheckpointCorruptError("not a session checkpoint", "config.kind")
    try:
        cfg, env_params, net_kw = _session_args(ckpt.config)
    except (KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"unusable session config: {exc}", "config.session") from exc
    session = DaggerSession(cfg, env_params, net_kw, ckpt.config.get("run_id", "run"),
                            ckpt.config.get("eval_seed_base", 1_000_000))
    A = ckpt.arrays
    meta = ckpt.meta
    net = session.policy.net
    try:
        layers = meta["layers"]
        for path, slot in _slot_paths(net):
            if path not in layers:
                raise CheckpointCorruptError(f"no layer record for slot {path!r}", "meta.layers")
            slot.layer = _rebuild_layer(slot, path, layers[path], A)
        net.mode = meta["net_mode"]
        for k, p in net.parameters().items():
            key = f"param/{k}"
            if key not in A:
                raise CheckpointCorruptError(f"missing parameter {k!r}", "manifest")
            if A[key].shape != p.data.shape or A[key].dtype != p.data.dtype:
                raise CheckpointCorruptError(
                    f"parameter {k!r} stored as {A[key].dtype}{list(A[key].shape)}, "
                    f"net expects {p.data.dtype}{list(p.data.shape)}", "manifest")
            p.data[...] = A[key]
            p.version += 1
        adam_arrays = {k[len("adam/"):]: v for k, v in A.items() if k.startswith("adam/")}
        session.trainer.opt.load_state(trainable_parameters(session.policy), adam_arrays, meta["adam_steps"])
        session.train_rng.bit_generator.state = meta["rng"]["train"]
        session.rollout_rng.bit_generator.state = meta["rng"]["rollout"]
        session.adapter_rng.bit_generator.state = meta["rng"]["adapter"]
        oh, h = session.d_base.obs_horizon, session.d_base.horizon
        session.d_base = _dataset_from("data/base", A, oh, h)
        session.dataset = _dataset_from("data/online", A, oh, h)
        c = meta["counters"]
        session.stage = c["stage"]
        session.epoch = c["epoch"]
        session.iteration = c["iteration"]
        session.rank = c["rank"]
        session.pending_eval = c["pending_eval"]
        session.threshold = c["threshold"]
        session.gate = ExpertGate(session.threshold)
        session.epochs = [EpochRecord(**r) for r in meta["epochs"]]
        session.checkpoints = [CheckpointRecord(**r) for r in meta["checkpoints"]]
        session.mode_log = [tuple(x) for x in meta["mode_log"]]
    except KeyError as exc:
        raise CheckpointCorruptError(f"missing entry {exc}", f"meta.{exc.args[0]}") from exc
    return session


def load_session(path):
    return restore_session(load_checkpoint(path))


# ---------------------------------------------------------------------------
# expert "checkpoints" (so the CLI can evaluate the scripted expert)
# ---------------------------------------------------------------------------


def expert_checkpoint(env_params: dict, gain: float = 1.0) -> Checkpoint:
    return Checkpoint({"kind": "expert", "env": dict(env_params), "gain": gain}, {}, {})
