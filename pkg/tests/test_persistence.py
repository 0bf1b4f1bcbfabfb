import struct

import numpy as np
import pytest

from adapter_uda import tensor as T
from adapter_uda.errors import ChecksumError, ContractError, FingerprintMismatch, SchemaError
from adapter_uda.model import Group, ModelConfig, init_model
from adapter_uda.persistence import (
    MAGIC,
    Scope,
    backbone_fingerprint,
    checkpoint_bytes,
    crc64,
    load_adapter_bundle,
    load_checkpoint,
    parse_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

CFG = ModelConfig(layers=2, hidden=16, heads=2, ffn_dim=32, adapter_dim=4, vocab_size=50, max_len=16)


def _trained_like(seed=0, backbone_seed=0):
    p = init_model(CFG, seed, backbone_seed=backbone_seed)
    rng = np.random.default_rng(seed + 100)
    for n in p.names([Group.ADAPTER, Group.TASK_HEAD, Group.MLM_HEAD]):
        p[n].data = (p[n].data + rng.normal(0, 0.1, size=p[n].shape)).astype(p[n].dtype)
    return p


def test_crc64_check_value():
    # CRC-64/WE catalogue check value
    assert crc64(b"123456789") == 0x62EC59E3F1A4F00A


def test_full_round_trip_bitwise(tmp_path):
    p = _trained_like()
    save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert list(q) == list(p)
    assert q.config == p.config
    for n in p:
        assert q[n].data.dtype == p[n].data.dtype
        assert q[n].data.tobytes() == p[n].data.tobytes()
        assert q.groups[n] is p.groups[n]


def test_double_precision_round_trip(tmp_path):
    with T.precision("double"):
        p = init_model(CFG, 1)
    save_checkpoint(p, tmp_path / "d.ckpt")
    q = load_checkpoint(tmp_path / "d.ckpt")
    assert all(q[n].dtype == np.float64 and np.array_equal(q[n].data, p[n].data) for n in p)


def test_deterministic_bytes(tmp_path):
    p = _trained_like()
    assert checkpoint_bytes(p) == checkpoint_bytes(p.copy())
    save_checkpoint(p, tmp_path / "a")
    save_checkpoint(p, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_header_layout(tmp_path):
    raw = checkpoint_bytes(_trained_like(), meta={"note": "x"})
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<H", raw, 4)[0] == 1
    (hlen,) = struct.unpack_from("<I", raw, 6)
    header = raw[10:10 + hlen].decode("utf-8")
    assert '"scope":"FULL"' in header and '"note":"x"' in header
    assert struct.unpack("<Q", raw[-8:])[0] == crc64(raw[:-8])


def test_corruption_detected_before_parsing(tmp_path):
    raw = bytearray(checkpoint_bytes(_trained_like()))
    raw[len(raw) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        parse_checkpoint(bytes(raw))
    with pytest.raises(SchemaError):
        parse_checkpoint(b"NOPE" + bytes(raw[4:]))
    bad_version = bytes(raw[:4]) + struct.pack("<H", 9) + bytes(raw[6:])
    with pytest.raises(SchemaError, match="version"):
        parse_checkpoint(bad_version)


def test_bundle_excludes_frozen_and_is_small(tmp_path):
    p = _trained_like()
    full = save_checkpoint(p, tmp_path / "full")
    small = save_checkpoint(p, tmp_path / "bundle", Scope.ADAPTER_ONLY)
    ck = read_checkpoint(tmp_path / "bundle")
    assert ck.scope is Scope.ADAPTER_ONLY
    assert all(g in (Group.ADAPTER, Group.TASK_HEAD) for g, _ in ck.tensors.values())
    assert ck.fingerprint == backbone_fingerprint(p)
    assert small < full
    save_checkpoint(p, tmp_path / "b2", Scope.ADAPTER_ONLY, include_mlm_head=True)
    assert any(g is Group.MLM_HEAD for g, _ in read_checkpoint(tmp_path / "b2").tensors.values())


def test_bundle_hot_swap_and_idempotent(tmp_path):
    p = _trained_like(seed=3, backbone_seed=0)
    save_checkpoint(p, tmp_path / "b", Scope.ADAPTER_ONLY, include_mlm_head=True)
    fresh = init_model(CFG, 11, backbone_seed=0)
    merged = load_adapter_bundle(fresh, tmp_path / "b")
    assert all(np.array_equal(merged[n].data, p[n].data) for n in p)
    assert fresh.group_bytes(Group.ADAPTER) != merged.group_bytes(Group.ADAPTER)  # input untouched
    twice = load_adapter_bundle(merged, tmp_path / "b")
    assert all(np.array_equal(twice[n].data, merged[n].data) for n in p)


def test_fingerprint_mismatch_names_both(tmp_path):
    p = _trained_like(backbone_seed=0)
    save_checkpoint(p, tmp_path / "b", Scope.ADAPTER_ONLY)
    other = init_model(CFG, 0, backbone_seed=1)
    with pytest.raises(FingerprintMismatch) as exc:
        load_adapter_bundle(other, tmp_path / "b")
    assert backbone_fingerprint(p) in str(exc.value) and backbone_fingerprint(other) in str(exc.value)


def test_fingerprint_depends_only_on_frozen_and_config():
    a = init_model(CFG, 0, backbone_seed=5)
    b = init_model(CFG, 9, backbone_seed=5)
    assert backbone_fingerprint(a) == backbone_fingerprint(b)
    assert len(backbone_fingerprint(a)) == 16
    a["layer0.ffn.in.bias"].data[0] += 1
    assert backbone_fingerprint(a) != backbone_fingerprint(b)


def test_schema_errors(tmp_path):
    p = _trained_like()
    save_checkpoint(p, tmp_path / "b", Scope.ADAPTER_ONLY)
    save_checkpoint(p, tmp_path / "f")
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "b")
    with pytest.raises(SchemaError):
        load_adapter_bundle(p, tmp_path / "f")
    # a model without the bundle's task head fails the name check
    q = p.copy()
    del q.tensors["cls.out.bias"], q.groups["cls.out.bias"]
    save_checkpoint(q, tmp_path / "partial", Scope.ADAPTER_ONLY)
    with pytest.raises(SchemaError, match="missing"):
        load_adapter_bundle(p, tmp_path / "partial")


def test_adapter_only_needs_adapters(tmp_path):
    p = init_model(CFG.replace(adapters_enabled=False), 0)
    with pytest.raises(ContractError):
        save_checkpoint(p, tmp_path / "x", Scope.ADAPTER_ONLY)


def test_bundle_under_five_percent_at_default_size(tmp_path):
    p = init_model(ModelConfig(), 0)
    full = save_checkpoint(p, tmp_path / "full")
    small = save_checkpoint(p, tmp_path / "bundle", Scope.ADAPTER_ONLY)
    assert small / full < 0.05
