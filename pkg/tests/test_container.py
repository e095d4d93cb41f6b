import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clustercodec import container as ct
from clustercodec.errors import DecodeError, WeightsError
from clustercodec.transform import SMALL_CONFIG, ArchConfig


def _sample(rng, with_coeffs=True, raw=False):
    codes = raw_c = None
    if with_coeffs:
        if raw:
            raw_c = rng.standard_normal((8, 2)).astype(np.float32)
        else:
            codes = rng.integers(0, 16, size=(8, 2)).astype(np.uint8)
    groups = [rng.bytes(rng.integers(5, 40)) for _ in range(3)]
    return ct.Container(30, 50, 32, 64, "ab" * 8, codes, raw_c,
                        rng.bytes(20), groups)


def test_pack_unpack_codes_roundtrip():
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 16, size=(7, 3)).astype(np.uint8)
    raw = ct.pack_codes(codes)
    assert len(raw) == (7 * 3 + 1) // 2
    np.testing.assert_array_equal(ct.unpack_codes(raw, 7, 3), codes)


@pytest.mark.parametrize("with_coeffs,raw", [(True, False), (True, True), (False, False)])
def test_container_roundtrip(with_coeffs, raw):
    c = _sample(np.random.default_rng(1), with_coeffs, raw)
    back = ct.read_container(ct.write_container(c))
    assert (back.orig_h, back.orig_w) == (c.orig_h, c.orig_w)
    assert (back.padded_h, back.padded_w) == (c.padded_h, c.padded_w)
    assert back.config_digest == c.config_digest
    assert back.z_stream == c.z_stream
    assert back.group_streams == c.group_streams
    if c.coeff_codes is not None:
        np.testing.assert_array_equal(back.coeff_codes, c.coeff_codes)
    if c.raw_coeffs is not None:
        np.testing.assert_array_equal(back.raw_coeffs, c.raw_coeffs)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(2, 5000), w=st.integers(2, 5000),
       ngroups=st.integers(0, 10), data=st.data())
def test_container_header_roundtrip_randomized(h, w, ngroups, data):
    ph = -(-h // 16) * 16
    pw = -(-w // 16) * 16
    groups = [data.draw(st.binary(max_size=30)) for _ in range(ngroups)]
    c = ct.Container(h, w, ph, pw, "00" * 8, None, None, b"z", groups)
    back = ct.read_container(ct.write_container(c))
    assert (back.orig_h, back.orig_w, back.padded_h, back.padded_w) == (h, w, ph, pw)
    assert back.group_streams == groups


def test_bit_flip_anywhere_is_detected():
    blob = bytearray(ct.write_container(_sample(np.random.default_rng(2))))
    for pos in range(6, len(blob)):  # past magic/version: CRC territory
        flipped = bytearray(blob)
        flipped[pos] ^= 0x40
        with pytest.raises(DecodeError):
            ct.read_container(bytes(flipped))


def test_truncation_every_length_is_detected():
    blob = ct.write_container(_sample(np.random.default_rng(3)))
    for n in range(len(blob)):
        with pytest.raises(DecodeError):
            ct.read_container(blob[:n])


def test_trailing_garbage_rejected():
    blob = ct.write_container(_sample(np.random.default_rng(4)))
    with pytest.raises(DecodeError):
        ct.read_container(blob + b"xx")


def test_bad_magic_and_version():
    blob = ct.write_container(_sample(np.random.default_rng(5)))
    with pytest.raises(DecodeError, match="magic"):
        ct.read_container(b"XXXX" + blob[4:])
    with pytest.raises(DecodeError):
        ct.read_container(blob[:4] + b"\x63\x00" + blob[6:])


def test_decode_error_carries_offset():
    try:
        ct.read_container(b"CL")
    except DecodeError as exc:
        assert exc.offset == 0
    else:
        pytest.fail("expected DecodeError")


def test_weights_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    tensors = {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "b.kernel": rng.standard_normal((2, 2, 3, 3)).astype(np.float64),
    }
    path = str(tmp_path / "m.w")
    ct.save_weights(path, SMALL_CONFIG, tensors)
    cfg, back = ct.load_weights(path)
    assert cfg == SMALL_CONFIG
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].dtype == tensors[k].dtype


def test_weights_corruption_detected(tmp_path):
    path = str(tmp_path / "m.w")
    ct.save_weights(path, ArchConfig(), {"x": np.ones(4, dtype=np.float32)})
    blob = bytearray(open(path, "rb").read())
    blob[len(blob) // 2] ^= 1
    open(path, "wb").write(bytes(blob))
    with pytest.raises(WeightsError, match="checksum"):
        ct.load_weights(path)


def test_weights_missing_file():
    with pytest.raises(WeightsError):
        ct.load_weights("/nonexistent/weights.w")
