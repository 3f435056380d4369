"""Command-line surface for the coded light-field pipeline.

Subcommands: simulate | train | reconstruct | refocus | epi | eval |
gradcheck. Exit codes: 0 success, 1 usage error, 2 I/O or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import networks, training, verify
from .coded import CodedImage, capture, gen_mask, load_mask, save_mask
from .errors import FormatError, NumericError
from .lightfield import (
    LightField,
    load_lightfield,
    read_lf4_array,
    save_lightfield,
    write_lf4_array,
)
from .warping import DisparityMap, gradient_energy, refocus
from .lightfield import epi as epi_slice


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; the documented exit-code
    mapping reserves 2 for I/O, so usage errors are rethrown and mapped
    to 1 in main()."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=96)


_GLOBAL_DEFAULTS = {"seed": 0, "config": None, "set": [], "precision": None, "threads": None}


def _add_globals(parser) -> None:
    """Global flags, accepted both before and after the subcommand.
    SUPPRESS defaults keep a subparser from clobbering values given at
    the top level; main() fills in the real defaults afterwards."""
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="root seed for seeded commands (default 0)")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                   help="training config file")
    g.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    g.add_argument("--precision", choices=["f32", "f64"], default=argparse.SUPPRESS,
                   help="numeric precision override")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="limit BLAS thread count")


def build_parser() -> Parser:
    p = Parser(prog="codedlf", description=__doc__.splitlines()[0],
               formatter_class=_formatter)
    _add_globals(p)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="capture a light field through a coded mask",
                         formatter_class=_formatter)
    _add_globals(sim)
    sim.add_argument("--lf", type=Path, required=True, help=".lf4 file or view-grid directory")
    sim.add_argument("--out", type=Path, required=True, help="output directory")
    sim.add_argument("--mask", type=Path, default=None, help="existing .mask file to reuse")
    sim.add_argument("--mask-seed", type=int, default=None, help="mask seed (default: --seed)")
    sim.add_argument("--mask-tile", type=int, default=15, help="mask tile extent")
    sim.add_argument("--mask-shift", type=int, default=1, help="mask shift per angular step")

    tr = sub.add_parser("train", help="run the staged training recipe",
                        formatter_class=_formatter)
    tr.add_argument("--preset", choices=["toy", "reference"], default="toy",
                    help="base recipe when no --config file is given")
    tr.add_argument("--stage", action="append", choices=list(training.STAGES),
                    default=None, help="run only these stages (repeatable, in order)")
    tr.add_argument("--out", type=Path, required=True, help="checkpoint/report directory")
    tr.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    _add_globals(tr)

    rec = sub.add_parser("reconstruct", help="full pipeline inference from a coded image",
                         formatter_class=_formatter)
    rec.add_argument("--coded", type=Path, required=True, help="coded image sidecar (.lf4)")
    rec.add_argument("--checkpoint", type=Path, required=True)
    rec.add_argument("--out", type=Path, required=True, help="output directory")
    rec.add_argument("--preset", choices=["toy", "reference"], default="toy",
                     help="network preset when no --config is given")
    _add_globals(rec)

    rf = sub.add_parser("refocus", help="shift-and-add refocusing of a light field",
                        formatter_class=_formatter)
    rf.add_argument("--lf", type=Path, required=True)
    rf.add_argument("--disparity", type=float, required=True,
                    help="refocus plane in pixels per angular step")
    rf.add_argument("--out", type=Path, required=True, help="output PNG")
    rf.add_argument("--raw", type=Path, default=None, help="also write float32 .lf4")
    _add_globals(rf)

    ep = sub.add_parser("epi", help="extract an epipolar-plane image",
                        formatter_class=_formatter)
    ep.add_argument("--lf", type=Path, required=True)
    ep.add_argument("--axis", choices=["horizontal", "vertical"], default="horizontal")
    ep.add_argument("--index", type=int, required=True, help="row (horizontal) or column (vertical)")
    ep.add_argument("--out", type=Path, required=True, help="output PNG")
    ep.add_argument("--repeat", type=int, default=8,
                    help="repeat each angular row this many times for visibility")
    _add_globals(ep)

    ev = sub.add_parser("eval", help="per-view PSNR/SSIM table of two light fields",
                        formatter_class=_formatter)
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--gt", type=Path, required=True)
    ev.add_argument("--records", type=Path, default=None, help="also write JSONL records")
    _add_globals(ev)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and network",
                        formatter_class=_formatter)
    gc.add_argument("--tolerance", type=float, default=verify.DEFAULT_TOLERANCE)
    gc.add_argument("--probes", type=int, default=6, help="probed elements per network tensor")
    _add_globals(gc)
    return p


# ---------------------------------------------------------------------------
# helpers


def _load_lf_auto(path: Path) -> LightField:
    if path.is_dir():
        return load_lightfield(path, layout="view_grid_images")
    return load_lightfield(path, layout="packed_binary")


def _save_png(img: np.ndarray, path: Path) -> None:
    """Write (C,H,W) [0,1] as an 8-bit PNG."""
    from PIL import Image

    quant = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    if quant.shape[0] == 1:
        Image.fromarray(quant[0]).save(path)
    else:
        Image.fromarray(quant.transpose(1, 2, 0)).save(path)


def _train_config(args) -> training.TrainConfig:
    if args.config is not None:
        config = training.load_config(args.config)
    elif getattr(args, "preset", "toy") == "reference":
        config = training.TrainConfig()
    else:
        config = training.toy_train_config()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides.setdefault("seed", str(args.seed))
    if args.precision is not None:
        overrides.setdefault("precision", args.precision)
    try:
        return training.apply_overrides(config, overrides)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    lf = _load_lf_auto(args.lf)
    if args.mask is not None:
        mask = load_mask(args.mask)
    else:
        seed = args.mask_seed if args.mask_seed is not None else args.seed
        mask = gen_mask(seed, args.mask_tile, args.mask_shift)
    dtype = np.float64 if args.precision == "f64" else np.float32
    coded = capture(lf, mask, dtype=dtype)
    args.out.mkdir(parents=True, exist_ok=True)
    write_lf4_array(coded.data.astype(np.float32), args.out / "coded.lf4")
    save_mask(mask, args.out / "mask.mask")
    # viewable 16-bit render, scaled by the view count so values fit [0,1]
    from PIL import Image

    scale = float(lf.grid_size ** 2)
    for c in range(coded.data.shape[0]):
        quant = np.round(np.clip(coded.data[c] / scale, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(quant).save(args.out / f"coded_c{c}.png")
    print(f"coded image {coded.data.shape} -> {args.out}/coded.lf4 (+ mask.mask, "
          f"{coded.data.shape[0]} x 16-bit png)")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    stages = args.stage if args.stage else None
    args.out.mkdir(parents=True, exist_ok=True)
    training.save_config(config, args.out / "config.txt")
    params, report, samples, mask = training.run_training(
        config, stages=stages, ckpt_dir=args.out,
        resume=str(args.resume) if args.resume else None,
    )
    report.to_jsonl(args.out / "report.jsonl")
    (args.out / "summary.txt").write_text(report.summary_text() + "\n")
    print(report.summary_text())
    print(f"checkpoints and report written to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    config = _train_config(args)
    params, scalars, _ = networks.load_checkpoint(args.checkpoint, config.network)
    raw = read_lf4_array(args.coded)
    if raw.shape[0] != 1 or raw.shape[1] != 1:
        raise FormatError(f"{args.coded}: expected a single-view coded sidecar")
    coded = raw[0, 0].astype(np.float64)
    mask_seed = networks.words_to_seed(scalars)
    mask = gen_mask(mask_seed, int(scalars["meta/mask_tile"]), int(scalars["meta/mask_shift"]))
    radius = int(scalars["meta/angular_radius"])
    lf, disp, center = training.reconstruct(coded, params, config.network, mask, radius)
    args.out.mkdir(parents=True, exist_ok=True)
    save_lightfield(lf, args.out / "reconstruction.lf4")
    write_lf4_array(disp.data.astype(np.float32)[None], args.out / "disparity.lf4")
    lo, hi = float(disp.data.min()), float(disp.data.max())
    span = hi - lo if hi > lo else 1.0
    _save_png(((disp.data - lo) / span)[None], args.out / "disparity.png")
    (args.out / "disparity.json").write_text(json.dumps({
        "min": lo, "max": hi,
        "convention": "brighter is closer (positive disparity is nearer than the focal plane)",
    }, indent=2) + "\n")
    _save_png(center, args.out / "center.png")
    print(f"reconstructed {lf.grid_size}x{lf.grid_size} views at "
          f"{lf.height}x{lf.width} -> {args.out}")
    return 0


def cmd_refocus(args) -> int:
    lf = _load_lf_auto(args.lf)
    img = refocus(lf, args.disparity)
    _save_png(img, args.out)
    if args.raw is not None:
        write_lf4_array(img.astype(np.float32), args.raw)
    print(f"refocused at d={args.disparity}: gradient energy {gradient_energy(img):.4f} -> {args.out}")
    return 0


def cmd_epi(args) -> int:
    lf = _load_lf_auto(args.lf)
    img = epi_slice(lf, args.axis, args.index)
    if args.repeat > 1:
        img = np.repeat(img, args.repeat, axis=1)
    _save_png(img, args.out)
    print(f"epi {args.axis}@{args.index}: {img.shape[1]}x{img.shape[2]} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = _load_lf_auto(args.pred)
    gt = _load_lf_auto(args.gt)
    table = training.evaluate(pred, gt)
    print(table.as_text())
    if args.records is not None:
        with open(args.records, "w") as fh:
            for rec in table.as_records():
                fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    results = verify.run_all(seed=args.seed, probes=args.probes)
    worst_name, worst = "", 0.0
    for name, err in sorted(results.items()):
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{status:4s} {name:20s} max rel err {err:.3e}")
        if err > worst:
            worst_name, worst = name, err
    if worst > args.tolerance:
        raise NumericError(
            f"gradient check failed: {worst_name} at {worst:.3e} > {args.tolerance:.1e}"
        )
    print(f"all gradients within {args.tolerance:.1e} (worst {worst:.3e})")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "refocus": cmd_refocus,
    "epi": cmd_epi,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for key, default in _GLOBAL_DEFAULTS.items():
            if not hasattr(args, key):
                setattr(args, key, default)
        if args.threads is not None:
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
