import struct

import numpy as np
import pytest

from mmfusion.checkpoint import decode_params, encode_params, load_checkpoint, save_checkpoint
from mmfusion.errors import FormatError
from mmfusion.model import ModelConfig, init_params, params_to_arrays


def sample_params():
    rng = np.random.default_rng(3)
    return {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "a.b": np.zeros(4, np.float32),
        "scalar": np.array(1.5, np.float32),
        "ünïcode": rng.standard_normal((2, 1, 2)).astype(np.float32),
    }


class TestCheckpointFormat:
    def test_round_trip_values(self):
        params = sample_params()
        back = decode_params(encode_params(params))
        assert list(back) == list(params)
        for k in params:
            assert back[k].shape == params[k].shape
            np.testing.assert_array_equal(back[k], params[k])

    def test_save_load_save_identical_bytes(self, tmp_path):
        arrays = params_to_arrays(init_params(ModelConfig(), seed=5))
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(arrays, first)
        save_checkpoint(load_checkpoint(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_header_layout(self):
        buf = encode_params({"x": np.ones((2, 3), np.float32)})
        magic, version, count = struct.unpack_from("<4sHI", buf, 0)
        assert (magic, version, count) == (b"MMFC", 1, 1)
        assert len(buf) == 10 + 2 + 1 + 1 + 8 + 24

    def test_bad_magic(self):
        buf = bytearray(encode_params(sample_params()))
        buf[0:4] = b"XXXX"
        with pytest.raises(FormatError, match="offset 0"):
            decode_params(bytes(buf))

    def test_truncated(self):
        buf = encode_params(sample_params())
        with pytest.raises(FormatError, match="offset"):
            decode_params(buf[:-3])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_params(encode_params(sample_params()) + b"\0")
