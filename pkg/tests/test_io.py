import struct

import numpy as np
import pytest

from stkron.errors import (BadMagicError, DimOverflowError, FormatError, TruncatedPayloadError,
                           VersionError)
from stkron.io import (FrameTensor, decode_pgm, decode_tensor, encode_pgm, encode_tensor, read_bundle,
                       read_tensor, write_bundle, write_tensor)


def test_tensor_round_trip_is_bit_identical(tmp_path):
    data = np.random.default_rng(0).standard_normal((6, 4, 4))
    write_tensor(FrameTensor(data), tmp_path / "t.sten")
    back = read_tensor(tmp_path / "t.sten")
    assert back.data.tobytes() == data.tobytes()
    assert (back.frames, back.height, back.width) == (6, 4, 4)


def test_tensor_header_layout():
    t = FrameTensor(np.arange(12.0).reshape(2, 2, 3))
    buf = encode_tensor(t)
    assert buf[:4] == b"STEN" and buf[4] == 1 and buf[5] == 3
    assert struct.unpack("<3Q", buf[6:30]) == (2, 3, 2)
    assert np.frombuffer(buf[30:], "<f8").tolist() == list(range(12))


def test_two_dim_tensor_is_one_frame():
    buf = b"STEN\x01\x02" + struct.pack("<2Q", 2, 2) + np.ones(4, "<f8").tobytes()
    assert decode_tensor(buf).data.shape == (1, 2, 2)


@pytest.mark.parametrize("mutate, err", [
    (lambda b: b"XXXX" + b[4:], BadMagicError),
    (lambda b: b[:4] + b"\x07" + b[5:], VersionError),
    (lambda b: b[:-3], TruncatedPayloadError),
    (lambda b: b[:12], TruncatedPayloadError),
    (lambda b: b[:6] + struct.pack("<3Q", 1 << 20, 1 << 20, 1 << 20) + b[30:], DimOverflowError),
])
def test_corrupt_tensors_raise_distinct_errors(mutate, err):
    buf = encode_tensor(FrameTensor(np.zeros((2, 2, 2))))
    with pytest.raises(err):
        decode_tensor(mutate(buf))


def test_pgm_scaling_and_directory(tmp_path):
    img = decode_pgm(b"P5\n2 1\n255\n" + bytes([255, 0]))
    assert img.tolist() == [[1.0, 0.0]]
    assert decode_pgm(b"P2\n# c\n2 1\n255\n0 255\n").tolist() == [[0.0, 1.0]]
    for k in range(3):
        (tmp_path / f"f{k}.pgm").write_bytes(encode_pgm(np.full((3, 4), k / 2)))
    t = read_tensor(tmp_path)
    assert t.data.shape == (3, 3, 4)
    np.testing.assert_allclose(t.data[:, 0, 0], [0.0, 128 / 255, 1.0])
    with pytest.raises(TruncatedPayloadError):
        decode_pgm(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(BadMagicError):
        decode_pgm(b"P6\n1 1\n255\n\x00")


def test_bundle_round_trip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2, 3])}
    write_bundle(tmp_path / "m.stkb", {"kind": "x", "n": 2}, arrays)
    manifest, back = read_bundle(tmp_path / "m.stkb")
    assert manifest["kind"] == "x" and manifest["n"] == 2
    np.testing.assert_array_equal(back["a"], arrays["a"])
    np.testing.assert_array_equal(back["b"], arrays["b"])


def test_bundle_corruption(tmp_path):
    p = tmp_path / "m.stkb"
    write_bundle(p, {"kind": "x"}, {"a": np.ones(4)})
    buf = p.read_bytes()
    p.write_bytes(buf[:-8])
    with pytest.raises(TruncatedPayloadError):
        read_bundle(p)
    p.write_bytes(b"STKB 9" + buf[6:])
    with pytest.raises(VersionError):
        read_bundle(p)
    p.write_bytes(b"nope")
    with pytest.raises(FormatError):
        read_bundle(p)
