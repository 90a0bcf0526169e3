import json
import struct

import numpy as np
import pytest
import torch

from dualkan.checkpoint import (Checkpoint, CorruptionError, FormatError, MigrationError,
                                decode_checkpoint, encode_checkpoint, load_checkpoint,
                                restore_state, save_checkpoint, state_checkpoint)
from dualkan.config import (ConfigError, RunConfig, apply_setting, config_from_dict, dump_config,
                            parse_config, to_dict)
from dualkan.ssl import bank_enqueue, build_state
from dualkan.trainer import tensor_hash

SMALL = dict(encoder_stages=((4, 2), (6, 2)), embed_dim=5, hidden=4, bank_capacity=16)


def _ckpt():
    sections = {"a": np.arange(6, dtype="<f4").reshape(2, 3), "b": np.array([1.5], dtype="<f4")}
    return Checkpoint('{"x":1}', sections, step=7, bank_cursor=3, bank_filled=9)


def test_encode_decode_round_trip():
    back = decode_checkpoint(encode_checkpoint(_ckpt()))
    assert back.config == '{"x":1}' and (back.step, back.bank_cursor, back.bank_filled) == (7, 3, 9)
    assert np.array_equal(back.sections["a"], _ckpt().sections["a"])


def test_layout_header():
    data = encode_checkpoint(_ckpt())
    assert data[:4] == b"KAND" and struct.unpack("<I", data[4:8])[0] == 1


def test_truncated_file_is_corruption():
    data = encode_checkpoint(_ckpt())
    for cut in (len(data) - 1, len(data) // 2, 12):
        with pytest.raises(CorruptionError):
            decode_checkpoint(data[:cut])


def test_flipped_byte_is_corruption():
    data = bytearray(encode_checkpoint(_ckpt()))
    data[20] ^= 0xFF
    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(data))


def test_bad_magic_is_format_error():
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + encode_checkpoint(_ckpt())[4:])


def test_version_bump_is_migration_error():
    data = bytearray(encode_checkpoint(_ckpt()))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(MigrationError) as e:
        decode_checkpoint(bytes(data))
    assert (e.value.found, e.value.expected) == (2, 1)
    assert "2" in str(e.value) and "1" in str(e.value)


def test_state_round_trip_is_bitwise(tmp_path):
    state = build_state(**SMALL, seed=3)
    bank_enqueue(state.bank, torch.randn(5, 5))
    state.step = 11
    path = str(tmp_path / "s.kand")
    save_checkpoint(state_checkpoint(state, "{}"), path)
    fresh = build_state(**SMALL, seed=99)
    restore_state(load_checkpoint(path), fresh)
    assert tensor_hash(fresh.named_tensors()) == tensor_hash(state.named_tensors())
    assert torch.equal(fresh.bank.storage, state.bank.storage)
    assert (fresh.bank.cursor, fresh.bank.filled, fresh.step) == (5, 5, 11)


def test_restore_rejects_other_architecture(tmp_path):
    state = build_state(**SMALL)
    other = build_state(**dict(SMALL, embed_dim=6))
    with pytest.raises(FormatError):
        restore_state(decode_checkpoint(encode_checkpoint(state_checkpoint(state, "{}"))), other)


def test_default_config_is_valid():
    cfg = RunConfig().validate()
    assert cfg.encoder_stages() == [(16, 2), (32, 2), (32, 2)]
    assert cfg.head_hidden(32) == 65


def test_parse_config_sections():
    cfg = parse_config("""
[run]
seed = 4
[data]
classes = 3
[model.kan]
grid = 7
base_term = false
[model.placement]
student = mlp
[train]
epochs = 2
""")
    assert cfg.seed == 4 and cfg.data.classes == 3
    assert cfg.model.kan.grid == 7 and cfg.model.kan.base_term is False
    assert cfg.model.placement.student == "mlp" and cfg.train.epochs == 2


@pytest.mark.parametrize("text", [
    "[data]\nnope = 1\n",
    "[nosuch]\nx = 1\n",
    "[train]\nepochs = many\n",
    "[model.placement]\nstudent = transformer\n",
    "[model]\nencoder_stages = 16-2\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dict_round_trip():
    cfg = RunConfig()
    apply_setting(cfg, "model.bank.capacity", "64")
    back = config_from_dict(json.loads(dump_config(cfg)))
    assert to_dict(back) == to_dict(cfg)
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"bogus": 1}})


def test_shared_temperature_flag():
    cfg = RunConfig()
    assert cfg.taus() == (cfg.model.temperatures.student, cfg.model.temperatures.teacher)
    apply_setting(cfg, "model.temperatures.shared", "0.2")
    assert cfg.taus() == (0.2, 0.2)
