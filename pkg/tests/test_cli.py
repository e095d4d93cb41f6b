import os

import numpy as np
import pytest

from clustercodec import cli
from clustercodec.codec import CodecModel
from clustercodec.imageio import read_image, write_image
from clustercodec.transform import TOY_CONFIG


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("w") / "toy.w")
    CodecModel(TOY_CONFIG, seed=0).save(path)
    return path


@pytest.fixture(scope="module")
def image(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("img") / "x.ppm")
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:40, 0:40] / 39.0
    img = np.clip(np.stack([xx, yy, xx * yy]) + 0.05 * rng.standard_normal((3, 40, 40)), 0, 1)
    write_image(path, img)
    return path


def test_encode_decode_cycle(tmp_path, weights, image, capsys):
    bitstream = str(tmp_path / "x.bin")
    out = str(tmp_path / "x_dec.ppm")
    assert cli.main(["encode", image, "-o", bitstream, "-w", weights]) == cli.EXIT_OK
    report = capsys.readouterr().out
    assert "bpp" in report and "psnr" in report
    assert cli.main(["decode", bitstream, "-o", out, "-w", weights]) == cli.EXIT_OK
    assert read_image(out).shape == (3, 40, 40)


def test_encode_flags(tmp_path, weights, image):
    plain = str(tmp_path / "p.bin")
    nofilter = str(tmp_path / "n.bin")
    raw = str(tmp_path / "r.bin")
    assert cli.main(["encode", image, "-o", plain, "-w", weights, "-q", "5"]) == 0
    assert cli.main(["encode", image, "-o", nofilter, "-w", weights, "--no-pqf"]) == 0
    assert cli.main(["encode", image, "-o", raw, "-w", weights, "--raw-coeffs"]) == 0
    assert os.path.getsize(nofilter) < os.path.getsize(plain) < os.path.getsize(raw)


def test_usage_errors(weights):
    assert cli.main(["encode"]) == cli.EXIT_USAGE
    assert cli.main(["encode", "x.ppm", "-o", "y", "-w", weights, "-q", "9"]) == cli.EXIT_USAGE
    assert cli.main(["no-such-command"]) == cli.EXIT_USAGE


def test_io_errors(tmp_path, weights):
    assert cli.main(["encode", "/nonexistent.ppm", "-o", str(tmp_path / "o"),
                     "-w", weights]) == cli.EXIT_IO
    assert cli.main(["stats", "-w", "/nonexistent.w"]) == cli.EXIT_IO


def test_corrupt_stream_exit_code(tmp_path, weights, image):
    bitstream = str(tmp_path / "x.bin")
    cli.main(["encode", image, "-o", bitstream, "-w", weights])
    blob = bytearray(open(bitstream, "rb").read())
    blob[len(blob) // 2] ^= 1
    open(bitstream, "wb").write(bytes(blob))
    assert cli.main(["decode", bitstream, "-o", str(tmp_path / "y.ppm"),
                     "-w", weights]) == cli.EXIT_CORRUPT


def test_stats_command(weights, capsys):
    assert cli.main(["stats", "-w", weights]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "parameters" in out and "macs per pixel" in out


def test_selftest_pass_and_fault(capsys):
    assert cli.main(["selftest"]) == cli.EXIT_OK
    assert "all checks passed" in capsys.readouterr().out
    assert cli.main(["selftest", "--fault", "freq-table"]) == cli.EXIT_SELFTEST
    assert "FAIL range-coder-roundtrip" in capsys.readouterr().out


def test_train_toy_writes_weights_and_figures(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    rng = np.random.default_rng(1)
    yy, xx = np.mgrid[0:48, 0:48] / 47.0
    for i in range(8):
        img = np.clip(np.stack([xx, yy, 0.5 + 0.3 * np.sin(4 * xx + i)])
                      + 0.05 * rng.standard_normal((3, 48, 48)), 0, 1)
        write_image(str(corpus / f"{i}.ppm"), img)
    wpath = str(tmp_path / "toy.w")
    assert cli.main(["train-toy", str(corpus), "-o", wpath,
                     "--steps", "2", "--seed", "3"]) == cli.EXIT_OK
    assert os.path.exists(wpath)
    assert os.path.exists(str(tmp_path / "toy_loss_curve.csv"))
    assert os.path.exists(str(tmp_path / "toy_loss_curve.png"))
    csv_text = open(str(tmp_path / "toy_loss_curve.csv")).read()
    assert csv_text.startswith("step,loss,smoothed")
    assert len(csv_text.strip().splitlines()) == 3
    # produced weights load and drive the codec
    model = CodecModel.load(wpath)
    assert model.cfg == TOY_CONFIG


def test_train_toy_needs_enough_images(tmp_path):
    corpus = tmp_path / "few"
    corpus.mkdir()
    write_image(str(corpus / "only.ppm"), np.zeros((3, 16, 16)))
    assert cli.main(["train-toy", str(corpus), "-o", str(tmp_path / "w")]) == cli.EXIT_USAGE
