"""``overnet`` command line.

Exit codes: 0 ok, 1 gradient check failed, 2 usage/config error,
3 data or file error, 4 numeric abort during training, 5 scale above the
checkpoint's maximum.  Reports go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigurationError, NumericError, UsageError
from .imageops import DegradationSpec, degrade, png_read, png_write
from .metrics import ScaleSet, format_scale, parse_scale
from .model import param_count, super_resolve

EXIT_OK, EXIT_GRAD, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SCALE = 0, 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"overnet: {msg}", file=sys.stderr)


def _scale_arg(text: str) -> Fraction:
    try:
        s = parse_scale(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if s <= 1:
        raise argparse.ArgumentTypeError(f"scale must exceed 1, got {text}")
    return s


def _load(path) :
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .train import FULL_SCALE, TrainingAborted, build_train_config, config_items, read_config, train

    file_values = read_config(args.config) if args.config else {}
    flags: dict[str, str] = {}
    if args.full_scale:
        flags.update(FULL_SCALE)
    for key, val in (("seed", args.seed), ("total_iters", args.iters), ("batch_size", args.batch_size),
                     ("patch", args.patch)):
        if val is not None:
            flags[key] = str(val)
    merged = {**file_values, **flags}
    cfg = build_train_config(merged)
    for key, val in config_items(cfg).items():
        source = "flag" if key in flags else "file" if key in file_values else "default"
        print(f"# {key} = {val}  ({source})", file=sys.stderr)

    out = Path(args.out)
    print("step\tlr\tloss", flush=True)
    try:
        train(cfg, args.data, out=out, on_log=lambda s, lr, loss: print(f"{s}\t{lr:g}\t{loss:.6f}", flush=True))
    except TrainingAborted as exc:
        where = f"; state dumped to {exc.dump_path}" if exc.dump_path else ""
        raise CliError(EXIT_NUMERIC, f"{exc}{where}") from None
    print(f"# checkpoint written to {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sr


def cmd_sr(args) -> int:
    ckpt = _load(args.ckpt)
    if args.scale > ckpt.model.max_scale:
        raise CliError(EXIT_SCALE, f"scale {format_scale(args.scale)} exceeds checkpoint maximum x{ckpt.model.max_scale}")
    img = png_read(args.input)
    out = super_resolve(img, ckpt.params, ckpt.model, args.scale)
    png_write(args.out, out)
    print(f"{args.out}\t{out.shape[2]}x{out.shape[1]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _degradation(args, default_scale) -> DegradationSpec:
    kind = args.kind.upper()
    scale = args.degradation_scale
    if scale is None:
        scale = Fraction(3) if kind == "BD" else Fraction(default_scale)
    return DegradationSpec(kind=kind, scale=scale, blur_sigma=args.sigma, kernel_size=args.kernel,
                           noise_level=args.noise, bd_order=args.bd_order)


def cmd_eval(args) -> int:
    from .train import evaluate

    ckpt = _load(args.ckpt)
    scales = ScaleSet(args.scales) if args.scales else ScaleSet(range(2, ckpt.model.max_scale + 1))
    if scales[-1] > ckpt.model.max_scale:
        raise CliError(EXIT_SCALE, f"scale {format_scale(scales[-1])} exceeds checkpoint maximum x{ckpt.model.max_scale}")
    spec = _degradation(args, ckpt.model.max_scale)
    report = evaluate(ckpt, args.data, scales, spec, seed=args.seed, crop=not args.no_crop)
    if args.format == "records":
        print("\n".join(report.records()))
    else:
        print(report.table())
    if args.records:
        Path(args.records).write_text("\n".join(report.records()) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# degrade


def cmd_degrade(args) -> int:
    spec = _degradation(args, 4)
    src = Path(args.input)
    tag = f"{spec.kind}_x{format_scale(spec.scale)}"
    if src.is_dir():
        from .train import list_images

        out_dir = Path(args.out) if args.out else Path("cache") / tag
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(p, out_dir / p.name) for p in list_images(src)]
    else:
        if not args.out:
            raise UsageError("--out is required for a single input image")
        jobs = [(src, Path(args.out))]
    for i, (path, dest) in enumerate(jobs):
        if dest.resolve() == path.resolve():
            raise UsageError(f"refusing to overwrite source image {path}")
        lr = degrade(png_read(path), spec, rng_seed=[args.seed, i])
        png_write(dest, lr)
        print(f"{dest}\t{lr.shape[2]}x{lr.shape[1]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / inspect


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seeds, start=args.seed)
    worst = max(r.worst for r in results)
    for r in results:
        print(f"{r.name}\t{r.worst:.3e}\t{r.checked}\t{r.skipped}")
    print(f"worst\t{worst:.3e}")
    if worst > args.tol:
        _err(f"worst relative error {worst:.3e} exceeds {args.tol:g}")
        return EXIT_GRAD
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = _load(args.ckpt)
    sys.stdout.write(ckpt.model.to_text())
    print(f"param_count = {param_count(ckpt.model)}")
    print(f"stored_scalars = {ckpt.params.size()}")
    print(f"step_count = {ckpt.step_count}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_degradation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", default="BI", choices=["BI", "BD", "DN", "bi", "bd", "dn"])
    p.add_argument("--degradation-scale", "--scale", type=_scale_arg, default=None, dest="degradation_scale")
    p.add_argument("--noise", type=float, default=30.0, help="DN noise level on the 0-255 scale")
    p.add_argument("--sigma", type=float, default=1.6, help="BD blur standard deviation")
    p.add_argument("--kernel", type=int, default=7, help="BD blur kernel size")
    p.add_argument("--bd-order", default="down_blur", choices=["down_blur", "blur_down"])
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of HR PNGs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--full-scale", "--paper-scale", dest="full_scale", action="store_true",
                   help="full batch size, patch and LR schedule")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scale", type=_scale_arg, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM over a directory of HR PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", help='e.g. "2,3,4" or "1.1:4.0:0.1"')
    p.add_argument("--no-crop", action="store_true", help="do not crop borders before the metrics")
    p.add_argument("--format", choices=["table", "records"], default="table")
    p.add_argument("--records", help="also write name/scale/psnr/ssim records to this file")
    _add_degradation_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("degrade", help="write BI/BD/DN low-resolution versions")
    p.add_argument("--in", dest="input", required=True, help="PNG file or directory")
    p.add_argument("--out", help="output PNG (file input) or directory (default cache/<kind>_x<scale>)")
    _add_degradation_flags(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print a checkpoint's config and parameter count")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except ConfigurationError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except NumericError as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    except UsageError as exc:
        _err(str(exc))
        return EXIT_DATA if args.command in ("train", "eval", "degrade") else EXIT_CONFIG
    except OSError as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
