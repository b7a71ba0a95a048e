"""Binary checkpoint format, validation errors and bitwise session resume."""

import json
import struct

import numpy as np
import pytest

from drift.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    CheckpointCorruptError,
    CheckpointVersionError,
    config_hash,
    decode,
    encode,
    load_checkpoint,
    load_session,
    restore_session,
    save_checkpoint,
    save_session,
    session_checkpoint,
)
from drift.harness import DaggerSession, SessionConfig

SMALL_NET = dict(channels=(8, 16), groups=4)


def small_cfg(**kw):
    base = dict(offline_epochs=3, online_iters=3, offline_rollouts=3, diffusion_steps=5, eval_rollouts=3,
                eval_every=1, r_min=2, lr=1e-3, seed=4)
    base.update(kw)
    return SessionConfig(**base)


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"kind": "test", "x": [1, 2]},
                      {"b": rng.standard_normal((3, 5)).astype(np.float32), "a": rng.standard_normal(7),
                       "empty": np.zeros((0, 4))},
                      {"note": "hi", "n": 3})


def rewrite_header(data: bytes, edit) -> bytes:
    _, version, hlen = struct.unpack_from("<4sIQ", data)
    header = json.loads(data[16:16 + hlen])
    edit(header)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<4sIQ", MAGIC, version, len(hb)) + hb + data[16 + hlen:]


def test_roundtrip_bitwise(tmp_path):
    ck = sample_ckpt()
    path = tmp_path / "a.drft"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.config == ck.config and back.meta == ck.meta
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype and np.array_equal(back.arrays[k], v)
    assert encode(back) == path.read_bytes()


def test_layout():
    data = encode(sample_ckpt())
    magic, version, hlen = struct.unpack_from("<4sIQ", data)
    assert magic == MAGIC and version == FORMAT_VERSION
    header = json.loads(data[16:16 + hlen])
    assert [e["name"] for e in header["manifest"]] == ["a", "b", "empty"]
    assert all(e["offset"] % 8 == 0 for e in header["manifest"])
    assert header["config_hash"] == config_hash({"kind": "test", "x": [1, 2]})


def test_rejects_other_dtypes():
    with pytest.raises(TypeError):
        encode(Checkpoint({}, {"i": np.arange(3)}))


def test_version_error():
    data = bytearray(encode(sample_ckpt()))
    struct.pack_into("<I", data, 4, FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError) as ei:
        decode(bytes(data))
    assert ei.value.exit_code == 3


@pytest.mark.parametrize("cut", [0, 5, 20, -1, -8])
def test_truncated(cut):
    data = encode(sample_ckpt())
    with pytest.raises(CheckpointCorruptError) as ei:
        decode(data[:cut])
    assert ei.value.exit_code == 4 and ei.value.field


def test_bad_magic():
    data = b"XXXX" + encode(sample_ckpt())[4:]
    with pytest.raises(CheckpointCorruptError, match="magic"):
        decode(data)


@pytest.mark.parametrize("edit,field", [
    (lambda h: h["manifest"][0].update(dtype="i8"), "manifest[0].dtype"),
    (lambda h: h["manifest"][0].update(shape=[-1]), "manifest[0].shape"),
    (lambda h: h["manifest"][0].update(nbytes=8), "manifest[0].nbytes"),
    (lambda h: h["manifest"][1].update(offset=0), "manifest[1].offset"),
    (lambda h: h["manifest"][1].update(offset=10 ** 9), "manifest[1].offset"),
    (lambda h: h["manifest"][1].update(name="a"), "manifest[1].name"),
    (lambda h: h["manifest"][0].pop("offset"), "manifest[0]"),
    (lambda h: h.pop("meta"), "meta"),
    (lambda h: h["config"].update(x=[9]), "config_hash"),
])
def test_corrupt_manifest_names_field(edit, field):
    data = rewrite_header(encode(sample_ckpt()), edit)
    with pytest.raises(CheckpointCorruptError) as ei:
        decode(data)
    assert ei.value.field == field


def test_garbage_header():
    data = bytearray(encode(sample_ckpt()))
    data[17] = 0xFF
    with pytest.raises(CheckpointCorruptError) as ei:
        decode(bytes(data))
    assert ei.value.field == "header"


# --------------------------------------------------------------------------- sessions


def params_equal(a, b):
    pa, pb = a.policy.parameters(), b.policy.parameters()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


@pytest.mark.parametrize("strategy", ["drift_rm", "drift_lora_sched", "mplo", "fpmo", "hg_full", "bc"])
def test_resume_bitwise(tmp_path, strategy):
    cfg = small_cfg(strategy=strategy)
    full = DaggerSession(cfg, net_kw=SMALL_NET).run()
    for stop in (3, 7):
        part = DaggerSession(cfg, net_kw=SMALL_NET)
        for _ in range(stop):
            part.advance()
        path = tmp_path / f"{strategy}_{stop}.drft"
        save_session(path, part)
        resumed = load_session(path)
        save_session(tmp_path / "again.drft", resumed)
        assert (tmp_path / "again.drft").read_bytes() == path.read_bytes()
        resumed.run()
        assert params_equal(full, resumed), (strategy, stop)
        assert [(c.sr, c.nel) for c in full.checkpoints] == [(c.sr, c.nel) for c in resumed.checkpoints]
        assert [(e.loss, e.rank, e.nel) for e in full.epochs] == [(e.loss, e.rank, e.nel) for e in resumed.epochs]


def test_restore_rejects_foreign_kind():
    with pytest.raises(CheckpointCorruptError):
        restore_session(Checkpoint({"kind": "expert"}))


def test_restore_missing_param_is_corrupt():
    s = DaggerSession(small_cfg(), net_kw=SMALL_NET)
    ck = session_checkpoint(s)
    victim = next(k for k in ck.arrays if k.startswith("param/"))
    del ck.arrays[victim]
    with pytest.raises(CheckpointCorruptError):
        restore_session(ck)
    ck = session_checkpoint(s)
    del ck.meta["counters"]
    with pytest.raises(CheckpointCorruptError):
        restore_session(ck)
