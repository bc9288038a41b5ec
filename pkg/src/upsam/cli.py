"""Command-line entry point.

Subcommands::

    sharpen      fuse an LR MSI with a PAN
    degrade      reduce an MSI/PAN pair to the lower scale (Wald)
    evaluate     reduced-resolution metrics, or label agreement with --labels
    evaluate-fr  no-reference metrics (D_lambda, D_S, QNR)
    toy          build the three-signature toy scene and run the attention study
    attention    dump the attention maps and the MSIM of an image

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run emits a
JSON report (``schema: 1``) to ``--report`` or to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import attnet, fusion, metrics, protocol, synth
from .attnet import NetworkConfig
from .raster import RasterImage, export_preview, load_raster, save_raster

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SCHEMA = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_network_flags(p, default_maps: int = 10):
    d = NetworkConfig(bands=1)
    p.add_argument("--maps", type=int, default=default_maps, help=f"attention maps c (default {default_maps})")
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help=f"sparsity weight (default {d.lam})")
    p.add_argument("--iters", type=int, default=d.iterations, help=f"training iterations (default {d.iterations})")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help=f"pixels per batch (default {d.batch_size})")
    p.add_argument("--lr", type=float, default=d.learning_rate, help=f"Adam step size (default {d.learning_rate})")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--report", type=Path, default=None, help="write the JSON report here (default stdout)")
    p.add_argument("--timings", action="store_true", help="include wall times in the report")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="upsam", description="Unsupervised attention-based pansharpening.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sharpen", help="fuse an LR MSI with a PAN")
    p.add_argument("--msi", required=True, type=Path, help="LR MSI raster")
    p.add_argument("--pan", required=True, type=Path, help="PAN raster")
    p.add_argument("--out", required=True, type=Path, help="fused raster")
    p.add_argument("--factor", type=int, default=None, help="resize factor (default: PAN/MSI size ratio)")
    p.add_argument("--injection", choices=fusion.INJECTION_MODES, default="msim",
                   help="per-region (msim) or global gains (default msim)")
    p.add_argument("--inject-domain", choices=fusion.INJECTION_DOMAINS, default="maps",
                   help="inject into attention maps or bands (default maps)")
    p.add_argument("--upsample", choices=protocol.UPSAMPLE_KERNELS, default="bicubic",
                   help="interpolation kernel (default bicubic)")
    p.add_argument("--model", type=Path, default=None, help="use a saved model instead of training")
    p.add_argument("--save-model", type=Path, default=None, help="save the trained model here")
    p.add_argument("--preview", type=Path, default=None, help="also write an RGB PNG of bands 0,1,2")
    _add_network_flags(p)
    _add_common(p)

    p = sub.add_parser("degrade", help="reduce an MSI/PAN pair by the resize factor")
    p.add_argument("--msi", required=True, type=Path)
    p.add_argument("--pan", required=True, type=Path)
    p.add_argument("--out-msi", required=True, type=Path)
    p.add_argument("--out-pan", required=True, type=Path)
    p.add_argument("--factor", type=int, default=4, help="resize factor (default 4)")
    p.add_argument("--nyquist-gain", type=float, nargs="+", default=[0.29],
                   help="MTF gain at Nyquist, one value or one per band (default 0.29)")
    p.add_argument("--taps", type=int, default=41, help="filter length (default 41)")
    p.add_argument("--config", type=Path, default=None, help="DegradeConfig JSON; overrides the flags above")
    _add_common(p)

    p = sub.add_parser("evaluate", help="full-reference metrics")
    p.add_argument("--ref", required=True, type=Path)
    p.add_argument("--test", required=True, type=Path)
    p.add_argument("--factor", type=int, default=4, help="resize factor for ERGAS (default 4)")
    p.add_argument("--block", type=int, default=32, help="Q2^n block size (default 32)")
    p.add_argument("--labels", action="store_true",
                   help="treat both rasters as label maps and report best-permutation agreement")
    _add_common(p)

    p = sub.add_parser("evaluate-fr", help="no-reference metrics")
    p.add_argument("--fused", required=True, type=Path)
    p.add_argument("--msi", required=True, type=Path, help="LR MSI")
    p.add_argument("--pan", required=True, type=Path, help="PAN")
    p.add_argument("--pan-lr", type=Path, default=None, help="LR PAN (default: PAN filtered and decimated)")
    p.add_argument("--block", type=int, default=32, help="UIQI block size (default 32)")
    _add_common(p)

    p = sub.add_parser("toy", help="three-signature toy scene and attention study")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--size", type=int, default=synth.TOY_SIZE, help=f"image side (default {synth.TOY_SIZE})")
    p.add_argument("--snr", type=float, default=synth.TOY_SNR_DB, help=f"noise SNR in dB (default {synth.TOY_SNR_DB:g})")
    p.add_argument("--no-train", action="store_true", help="write the fixture and k-means labels only")
    _add_network_flags(p, default_maps=4)
    _add_common(p)

    p = sub.add_parser("attention", help="dump attention maps and MSIM")
    p.add_argument("--msi", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--model", type=Path, default=None, help="saved model (default: train on the image)")
    _add_network_flags(p)
    _add_common(p)
    return parser


def _network(args, bands: int) -> NetworkConfig:
    return NetworkConfig(bands=bands, pieces2=args.maps, lam=args.lam, iterations=args.iters,
                         batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)


def _emit(report: dict, path: Path | None):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _finish(args, report: dict, timings: dict | None = None) -> dict:
    report = {"schema": SCHEMA, "command": args.command, **report}
    if args.timings and timings is not None:
        report["timings_s"] = timings
    return report


def _check_model(model, bands):
    if model.config.bands != bands:
        raise ValueError(f"model expects {model.config.bands} bands, image has {bands}")


def cmd_sharpen(args) -> dict:
    msi = load_raster(args.msi)
    pan = load_raster(args.pan)
    if pan.bands != 1:
        raise ValueError(f"PAN must have one band, got {pan.bands}")
    r = args.factor if args.factor is not None else pan.height // msi.height
    if (pan.height, pan.width) != (r * msi.height, r * msi.width):
        raise ValueError(f"PAN {pan.height}x{pan.width} is not {r}x the MSI {msi.height}x{msi.width}")
    model = None
    if args.model is not None:
        model = attnet.TrainedModel.load(args.model)
        _check_model(model, msi.bands)
    cfg = fusion.FusionConfig(injection=args.injection, domain=args.inject_domain,
                              upsample_kernel=args.upsample, network=_network(args, msi.bands),
                              seed=args.seed)
    res = fusion.pansharpen(msi.data, pan.data, r, cfg, model=model)
    out = RasterImage(res.fused, msi.band_names,
                      pan.resolution_m if pan.resolution_m is not None else None)
    save_raster(out, args.out)
    if args.save_model is not None:
        res.model.save(args.save_model)
    if args.preview is not None:
        export_preview(out, (0, 1, 2) if out.bands >= 3 else (0, 0, 0), args.preview)
    rep = res.report()
    rep.pop("schema")
    rep.update({"factor": r, "output": str(args.out)})
    return _finish(args, rep, res.timings)


def cmd_degrade(args) -> dict:
    msi = load_raster(args.msi)
    pan = load_raster(args.pan)
    if args.config is not None:
        cfg = protocol.DegradeConfig.from_dict(json.loads(args.config.read_text()))
    else:
        gains = args.nyquist_gain[0] if len(args.nyquist_gain) == 1 else list(args.nyquist_gain)
        cfg = protocol.DegradeConfig(factor=args.factor, nyquist_gain=gains, taps=args.taps)
    res = protocol.wald_reduce(msi.data, pan.data, cfg)
    save_raster(RasterImage(res.msi, msi.band_names), args.out_msi)
    save_raster(RasterImage(res.pan), args.out_pan)
    g = cfg.band_gains(msi.bands)
    return _finish(args, {
        "factor": cfg.factor,
        "nyquist_gains": [float(x) for x in g],
        "taps": cfg.taps,
        "msi_shape": list(res.msi.shape),
        "pan_shape": list(res.pan.shape),
        "outputs": [str(args.out_msi), str(args.out_pan)],
    })


def cmd_evaluate(args) -> dict:
    ref = load_raster(args.ref)
    test = load_raster(args.test)
    if args.labels:
        truth = np.rint(ref.data[0]).astype(int)
        pred = np.rint(test.data[0]).astype(int)
        return _finish(args, {"label_agreement": synth.label_agreement(pred, truth)})
    rep = metrics.reduced_resolution(ref.data, test.data, args.factor, args.block, args.block)
    return _finish(args, {"metrics": rep.to_dict()})


def cmd_evaluate_fr(args) -> dict:
    fused = load_raster(args.fused)
    msi = load_raster(args.msi)
    pan = load_raster(args.pan)
    r = pan.height // msi.height
    if args.pan_lr is not None:
        pan_lr = load_raster(args.pan_lr).data
    else:
        pan_lr = protocol.downsample_pan(pan.data, protocol.DegradeConfig(factor=r))
    block = min(args.block, msi.height, msi.width)
    rep = metrics.full_resolution(fused.data, msi.data, pan.data, pan_lr, block, block)
    return _finish(args, {"metrics": rep.to_dict()})


def _save_with_preview(data, base: Path, written: list):
    save_raster(RasterImage(data), base)
    img = np.asarray(data)
    idx = (0, 1, 2) if img.ndim == 3 and img.shape[0] >= 3 else (0, 0, 0)
    export_preview(img, idx, base.with_name(base.name + ".png"))
    written.append(base.name)


def cmd_toy(args) -> dict:
    toy = synth.gen_toy(args.seed, args.snr, args.size)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    km = synth.kmeans_labels(toy.msi, toy.signatures.shape[0], args.seed)
    _save_with_preview(toy.msi, out / "msi", written)
    _save_with_preview(toy.abundances, out / "abundances", written)
    _save_with_preview(toy.labels[None].astype(float), out / "labels", written)
    _save_with_preview(km[None].astype(float), out / "kmeans_labels", written)
    rep = {
        "seed": args.seed,
        "size": args.size,
        "snr_db": args.snr,
        "measured_snr_db": synth.measured_snr_db(toy.clean, toy.msi),
        "kmeans_agreement": synth.label_agreement(km, toy.labels),
    }
    if not args.no_train:
        model = attnet.train(toy.msi, _network(args, toy.msi.shape[0]))
        stack = attnet.encode_image(model, toy.msi)
        msim = fusion.compute_msim(stack)
        _save_with_preview(stack, out / "attention", written)
        _save_with_preview(msim[None].astype(float), out / "msim", written)
        model.save(out / "model")
        rep.update({
            "msim_agreement": synth.label_agreement(msim, toy.labels),
            "msim_counts": np.bincount(msim.ravel(), minlength=model.maps).tolist(),
            "network": model.config.to_dict(),
            "loss_curve": model.history,
        })
    rep["outputs"] = written
    return _finish(args, rep)


def cmd_attention(args) -> dict:
    msi = load_raster(args.msi)
    if args.model is not None:
        model = attnet.TrainedModel.load(args.model)
        _check_model(model, msi.bands)
    else:
        model = attnet.train(msi.data, _network(args, msi.bands))
    stack = attnet.encode_image(model, msi.data)
    msim = fusion.compute_msim(stack)
    args.out.mkdir(parents=True, exist_ok=True)
    save_raster(RasterImage(stack), args.out / "attention")
    save_raster(RasterImage(msim[None].astype(float)), args.out / "msim")
    return _finish(args, {
        "maps": model.maps,
        "msim_counts": np.bincount(msim.ravel(), minlength=model.maps).tolist(),
        "loss_curve": model.history,
        "outputs": ["attention", "msim"],
    })


COMMANDS = {
    "sharpen": cmd_sharpen,
    "degrade": cmd_degrade,
    "evaluate": cmd_evaluate,
    "evaluate-fr": cmd_evaluate_fr,
    "toy": cmd_toy,
    "attention": cmd_attention,
}


def _thread_limit():
    raw = os.environ.get("UPSAM_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"UPSAM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"UPSAM_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "maps"):
            try:
                _network(args, 1)
            except ValueError as exc:
                parser.error(str(exc))
        limit = _thread_limit()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        with limit:
            report = COMMANDS[args.command](args)
        _emit(report, args.report)
    except Exception as exc:
        print(f"upsam {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
