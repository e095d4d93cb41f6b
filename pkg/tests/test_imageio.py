import numpy as np
import pytest

from clustercodec.errors import ImageIOError
from clustercodec.imageio import psnr, read_image, write_image


def test_ppm_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(3, 13, 17)).astype(np.float64) / 255.0
    path = str(tmp_path / "x.ppm")
    write_image(path, img)
    back = read_image(path)
    np.testing.assert_array_equal(back, img)


def test_ppm_comments_and_whitespace(tmp_path):
    path = str(tmp_path / "c.ppm")
    with open(path, "wb") as fh:
        fh.write(b"P6 # a comment\n# another\n2 1\n255\n" + bytes(6))
    img = read_image(path)
    assert img.shape == (3, 1, 2)


def test_ppm_errors(tmp_path):
    cases = {
        "bad_magic.ppm": b"P5\n2 2\n255\n" + bytes(12),
        "short.ppm": b"P6\n4 4\n255\n" + bytes(5),
        "maxval.ppm": b"P6\n2 2\n65535\n" + bytes(24),
        "garbage.ppm": b"P6\nxx yy\n255\n",
    }
    for name, blob in cases.items():
        path = str(tmp_path / name)
        with open(path, "wb") as fh:
            fh.write(blob)
        with pytest.raises(ImageIOError):
            read_image(path)


def test_missing_file():
    with pytest.raises(ImageIOError):
        read_image("/nonexistent/img.ppm")


def test_write_clips_out_of_range(tmp_path):
    img = np.full((3, 2, 2), 1.7)
    path = str(tmp_path / "hi.ppm")
    write_image(path, img)
    np.testing.assert_array_equal(read_image(path), np.ones((3, 2, 2)))


def test_write_rejects_bad_shape(tmp_path):
    with pytest.raises(ImageIOError):
        write_image(str(tmp_path / "bad.ppm"), np.zeros((2, 4, 4)))


def test_png_roundtrip_via_pillow(tmp_path):
    pytest.importorskip("PIL")
    img = np.random.default_rng(1).integers(0, 256, size=(3, 8, 8)) / 255.0
    path = str(tmp_path / "x.png")
    write_image(path, img)
    np.testing.assert_array_equal(read_image(path), img)


def test_psnr():
    a = np.zeros((3, 4, 4))
    assert psnr(a, a) == float("inf")
    b = np.full_like(a, 0.1)
    np.testing.assert_allclose(psnr(a, b), 20.0, atol=1e-9)
