import numpy as np
import pytest

from daq8.errors import CheckpointError
from daq8.utils_checkpoints import (
    CHECKPOINT_NAME,
    decode_arrays,
    decode_container,
    encode_arrays,
    encode_container,
    get_checkpoint_file,
    read_container,
    require_section,
    write_container,
)


def test_checkpoint_file_in_run_dir(tmp_path):
    path = get_checkpoint_file(tmp_path / "run")
    assert path.name == CHECKPOINT_NAME
    assert path.parent.is_dir()


def test_write_then_read(tmp_path):
    sections = {"model/v1": b"\x00\x01", "rng/v1": b"", "config/v1": b"{}"}
    path = tmp_path / CHECKPOINT_NAME
    write_container(path, sections)
    assert read_container(path) == sections
    assert not (tmp_path / (CHECKPOINT_NAME + ".tmp")).exists()


def test_encoding_is_order_independent():
    a = encode_container({"a/v1": b"1", "b/v1": b"2"})
    b = encode_container({"b/v1": b"2", "a/v1": b"1"})
    assert a == b


def test_checksum_mismatch():
    blob = bytearray(encode_container({"model/v1": b"abcdef"}))
    blob[-6] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_container(bytes(blob))


def test_bad_magic():
    blob = b"XXXXXXXX" + encode_container({})[8:]
    with pytest.raises(CheckpointError, match="magic"):
        decode_container(blob)


def test_truncated():
    with pytest.raises(CheckpointError):
        decode_container(b"DAQ8")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "absent.daq8")


def test_require_section_names_present_version():
    with pytest.raises(CheckpointError, match="model/v2"):
        require_section({"model/v2": b""}, "model/v1")
    with pytest.raises(CheckpointError, match="missing"):
        require_section({}, "model/v1")


def test_arrays_keep_shape_and_values():
    arrays = {"conv0.weight": np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2),
              "linear0.bias": np.array([0.5, -1.5], dtype=np.float32)}
    back = decode_arrays(encode_arrays(arrays))
    assert back.keys() == arrays.keys()
    for name, arr in arrays.items():
        assert np.array_equal(back[name], arr)


def test_truncated_arrays():
    payload = encode_arrays({"w": np.ones(10, dtype=np.float32)})
    with pytest.raises(CheckpointError):
        decode_arrays(payload[:-4])
