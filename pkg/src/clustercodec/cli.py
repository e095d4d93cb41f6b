"""Command-line codec.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 corrupt stream,
4 self-test failure.
"""

from __future__ import annotations

import csv
import os
import sys

import click
import numpy as np

from .codec import (LAMBDA_PRESETS, CodecModel, decode_array, encode_array,
                    model_stats, train_toy)
from .errors import CodecError, DecodeError, ImageIOError, SelftestFailure, WeightsError
from .imageio import psnr, read_image, write_image
from .transform import TOY_CONFIG

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CORRUPT = 3
EXIT_SELFTEST = 4


@click.group()
def cli():
    """Learned image codec with clustering transforms and guided filtering."""


@cli.command("encode")
@click.argument("input_path", metavar="<in>")
@click.option("-o", "output_path", required=True, help="Output bitstream file.")
@click.option("-w", "weights_path", required=True, help="Model weights file.")
@click.option("-q", "quality", type=click.IntRange(1, 6), default=3, show_default=True,
              help="Quality preset; informational, the operating point is baked "
                   "into the weights.")
@click.option("--no-pqf", is_flag=True, help="Disable the latent filtering stage.")
@click.option("--raw-coeffs", is_flag=True,
              help="Signal filter coefficients as float32 instead of 4-bit codes.")
def encode_cmd(input_path, output_path, weights_path, quality, no_pqf, raw_coeffs):
    """Compress an image (PPM canonical, PNG via Pillow) to a bitstream."""
    model = CodecModel.load(weights_path)
    img = read_image(input_path)
    blob, report = encode_array(img, model, use_pqf=not no_pqf, raw_coeffs=raw_coeffs)
    with open(output_path, "wb") as fh:
        fh.write(blob)
    click.echo(f"quality preset   q{quality} (lambda {LAMBDA_PRESETS[quality]})")
    for line in report.lines():
        click.echo(line)


@cli.command("decode")
@click.argument("input_path", metavar="<in>")
@click.option("-o", "output_path", required=True, help="Output image file.")
@click.option("-w", "weights_path", required=True, help="Model weights file.")
def decode_cmd(input_path, output_path, weights_path):
    """Decompress a bitstream back to an image."""
    model = CodecModel.load(weights_path)
    try:
        with open(input_path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ImageIOError(f"{input_path}: {exc}") from exc
    img = decode_array(blob, model)
    write_image(output_path, img)
    click.echo(f"decoded {img.shape[2]}x{img.shape[1]} -> {output_path}")


@cli.command("train-toy")
@click.argument("corpus_dir", metavar="<dir>")
@click.option("-o", "weights_path", required=True, help="Output weights file.")
@click.option("--lambda", "lam", type=float, default=LAMBDA_PRESETS[1],
              show_default=True, help="Rate-distortion trade-off.")
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_toy_cmd(corpus_dir, weights_path, lam, steps, seed):
    """Optimize toy-scale weights on a directory of images.

    Writes the weights file plus loss_curve.csv and loss_curve.png next to it.
    """
    try:
        names = sorted(os.listdir(corpus_dir))
    except OSError as exc:
        raise ImageIOError(f"{corpus_dir}: {exc}") from exc
    images = []
    for name in names:
        path = os.path.join(corpus_dir, name)
        if os.path.isfile(path):
            try:
                images.append(read_image(path))
            except ImageIOError:
                continue
    if len(images) < 8:
        raise click.UsageError(f"{corpus_dir}: need at least 8 readable images, "
                               f"found {len(images)}")

    model = CodecModel(TOY_CONFIG, seed=seed)
    result = train_toy(model, images, lam, steps=steps, seed=seed)
    model.save(weights_path)

    base = os.path.splitext(weights_path)[0]
    csv_path = base + "_loss_curve.csv"
    png_path = base + "_loss_curve.png"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "smoothed"])
        for i, (raw, sm) in enumerate(zip(result.losses, result.smoothed)):
            writer.writerow([i, f"{raw:.6f}", f"{sm:.6f}"])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(result.losses, label="loss", alpha=0.4)
    ax.plot(result.smoothed, label="smoothed")
    ax.set_xlabel("step")
    ax.set_ylabel("rate-distortion loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)

    status = "aborted (non-finite loss)" if result.aborted else "finished"
    click.echo(f"{status} after {len(result.losses)} steps in {result.seconds:.1f}s")
    if result.smoothed:
        click.echo(f"smoothed loss   {result.smoothed[0]:.4f} -> {result.smoothed[-1]:.4f} "
                   f"({100 * result.improvement:.1f}% drop)")
    click.echo(f"weights         {weights_path}")
    click.echo(f"loss curve      {csv_path}, {png_path}")


@cli.command("stats")
@click.option("-w", "weights_path", required=True, help="Model weights file.")
def stats_cmd(weights_path):
    """Report parameter count and an analytic MACs-per-pixel estimate."""
    model = CodecModel.load(weights_path)
    st = model_stats(model)
    click.echo(f"parameters      {st['parameters']}")
    click.echo(f"macs (ref {st['reference_hw'][1]}x{st['reference_hw'][0]})  "
               f"{st['macs_estimate']}")
    click.echo(f"macs per pixel  {st['macs_per_pixel']:.1f}")


def _selftest_checks(fault: str | None):
    """Yield (name, callable) pairs; a fault name sabotages the matching check."""
    from . import engine as eg
    from .checks import check_gradients
    from .pqf import candidate_matrix, solve_coefficients
    from .rangecoder import FreqTable, RangeDecoder, RangeEncoder, TOTAL

    def coder_roundtrip():
        rng = np.random.default_rng(0)
        freqs = rng.integers(1, 50, size=16)
        freqs[0] += TOTAL - freqs.sum()
        if fault == "freq-table":
            freqs = freqs.copy()
            freqs[1] += 7  # frequencies no longer sum to the coder total
            table = FreqTable.__new__(FreqTable)
            table.s_min, table.freqs = 0, freqs
            table.cum = np.concatenate([[0], np.cumsum(freqs)])
        else:
            table = FreqTable(0, freqs)
        symbols = rng.integers(0, 16, size=2000)
        enc = RangeEncoder()
        for s in symbols:
            cum, f = table.entry(int(s))
            enc.encode(cum, f, TOTAL)
        dec = RangeDecoder(enc.finish())
        out = [dec.decode_symbol(table) for _ in symbols]
        if not np.array_equal(out, symbols):
            raise SelftestFailure("range coder round trip mismatch")

    def gradient_check():
        rng = np.random.default_rng(1)
        w = eg.parameter(rng.standard_normal((4, 4)), dtype=np.float64)
        x = rng.standard_normal((8, 4))

        def loss_fn():
            return eg.sum_(eg.square(eg.tanh(eg.matmul(eg.constant(x), w))))

        check_gradients(loss_fn, [w], rel_tol=1e-4)

    def ls_oracle():
        rng = np.random.default_rng(2)
        c = rng.standard_normal((64, 2))
        eps = rng.standard_normal(64)
        res = solve_coefficients(c, eps, ridge=0.0)
        grad = c.T @ (eps - c @ res.coeffs)
        if np.abs(grad).max() > 1e-6:
            raise SelftestFailure("least-squares solution is not a stationary point")

    def shuffle_inverse():
        rng = np.random.default_rng(3)
        x = eg.constant(rng.standard_normal((8, 6, 6)))
        back = eg.pixel_unshuffle(eg.pixel_shuffle(x, 2), 2)
        if not np.array_equal(back.data, x.data):
            raise SelftestFailure("pixel shuffle/unshuffle is not an inverse pair")

    def codec_roundtrip():
        from .codec import CodecModel, decode_array, encode_array
        from .transform import TOY_CONFIG
        model = CodecModel(TOY_CONFIG, seed=0)
        img = np.random.default_rng(4).uniform(0, 1, size=(3, 32, 32))
        blob, _ = encode_array(img, model)
        rec = decode_array(blob, model)
        if rec.shape != img.shape:
            raise SelftestFailure("codec round trip changed image dimensions")

    yield "range-coder-roundtrip", coder_roundtrip
    yield "gradient-check", gradient_check
    yield "least-squares-oracle", ls_oracle
    yield "shuffle-inverse", shuffle_inverse
    yield "codec-roundtrip", codec_roundtrip


@cli.command("selftest")
@click.option("--fault", default=None,
              help="Inject a fault into the named check (e.g. freq-table).")
def selftest_cmd(fault):
    """Run the invariant battery and print per-check status."""
    failed = 0
    for name, check in _selftest_checks(fault):
        try:
            check()
        except Exception as exc:
            failed += 1
            click.echo(f"FAIL {name}: {exc}")
        else:
            click.echo(f"ok   {name}")
    if failed:
        raise SelftestFailure(f"{failed} self-test check(s) failed")
    click.echo("all checks passed")


def main(argv=None):
    try:
        return cli.main(args=argv, standalone_mode=False) or EXIT_OK
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except DecodeError as exc:
        click.echo(f"corrupt stream: {exc}", err=True)
        return EXIT_CORRUPT
    except SelftestFailure as exc:
        click.echo(f"selftest: {exc}", err=True)
        return EXIT_SELFTEST
    except (ImageIOError, WeightsError, OSError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return EXIT_IO
    except CodecError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
