import struct

import numpy as np
import pytest

from ragscope.model import ModelConfig, init_weights, tensor_shapes
from ragscope.serialization import MAGIC, WeightsFormatError, load_weights, save_weights


def test_round_trip_is_exact(tmp_path, small_weights):
    p = tmp_path / "w.bin"
    save_weights(small_weights, p, config_path=tmp_path / "c.json")
    back = load_weights(p)
    assert back.config == small_weights.config
    assert back.allclose(small_weights)
    assert ModelConfig.from_json((tmp_path / "c.json").read_text()) == small_weights.config


def test_saving_is_byte_stable(tmp_path, small_config):
    save_weights(init_weights(small_config, 1), tmp_path / "a.bin")
    save_weights(init_weights(small_config, 1), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_layout(tmp_path, small_weights):
    p = tmp_path / "w.bin"
    save_weights(small_weights, p)
    data = p.read_bytes()
    assert data[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", data[8:16])
    n = sum(int(np.prod(s)) for s in tensor_shapes(small_weights.config).values())
    assert len(data) == 16 + hlen + 4 * n


def test_bad_files(tmp_path, small_weights):
    (tmp_path / "x.bin").write_bytes(b"garbage!" + b"\0" * 16)
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "x.bin")
    p = tmp_path / "w.bin"
    save_weights(small_weights, p)
    (tmp_path / "t.bin").write_bytes(p.read_bytes()[:-8])
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "t.bin")
