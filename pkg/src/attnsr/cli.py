"""Command-line entry point: ``attnsr {prepare,train,eval,sr,mask}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import imaging
from .checkpoint import Checkpoint, CheckpointError
from .models import AttnSRModel, predict
from .training import Trainer, evaluate, load_run_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("attnsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _print_config(command: str, **values) -> None:
    shown = {k: (str(v) if isinstance(v, Path) else v) for k, v in values.items()}
    print(json.dumps({"command": command, **shown}, sort_keys=True))


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def _read_input(path: str) -> np.ndarray:
    img = imaging.png_read(path)
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    hr_dir, out_dir, r = Path(args.hr_dir), Path(args.out_dir), args.scale
    _print_config("prepare", hr_dir=hr_dir, out_dir=out_dir, scale=r)
    if r not in (2, 3, 4):
        raise UsageError(f"scale must be 2, 3 or 4, got {r}")
    files = sorted(hr_dir.glob("*.png")) if hr_dir.is_dir() else []
    if not files:
        raise UsageError(f"{hr_dir}: no PNG images found")
    names = []
    for f in files:
        try:
            img = _read_input(f)
        except imaging.ImageIOError as exc:
            logger.warning("skipping %s", exc)
            continue
        hr, lr, ilr = imaging.degrade(img, r)
        imaging.png_write(out_dir / "HR" / f.name, hr)
        imaging.png_write(out_dir / f"LR_x{r}" / f.name, lr)
        imaging.png_write(out_dir / f"ILR_x{r}" / f.name, ilr)
        names.append(f"HR/{f.name}")
    if not names:
        print("error: every input image was unreadable", file=sys.stderr)
        return EXIT_RUNTIME
    imaging.write_manifest(out_dir / "manifest.txt", names)
    print(f"prepared {len(names)} image(s) -> {out_dir / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        mcfg, tcfg = load_run_config(args.config)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(args.out_dir)
    _print_config(
        "train", model=mcfg.to_dict(), train=tcfg.to_dict(), out_dir=out_dir,
        resume=args.resume, mask_snapshots=args.mask_snapshots, model_seed=args.model_seed,
    )
    model = AttnSRModel(mcfg, seed=args.model_seed)
    log_path = out_dir / "train.log"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a") as log_file:

        def log(line: str) -> None:
            print(line)
            log_file.write(line + "\n")
            log_file.flush()

        trainer = Trainer(tcfg, model, out_dir=out_dir, log=log, mask_snapshots=args.mask_snapshots)
        if args.resume:
            trainer.restore(_load_checkpoint(args.resume))
        ckpt = trainer.run()
    ckpt.save(out_dir / "best.ckpt")
    trainer.checkpoint().save(out_dir / "last.ckpt")
    print(f"best validation PSNR: {ckpt.best_psnr}")
    return EXIT_OK


def cmd_eval(args) -> int:
    r = args.scale
    _print_config("eval", ckpt=args.ckpt, bicubic=args.bicubic, manifest=args.manifest, scale=r, csv=args.csv)
    if not Path(args.manifest).is_file():
        raise UsageError(f"{args.manifest}: manifest not found")
    if args.bicubic:
        model = "bicubic"
    else:
        ckpt = _load_checkpoint(args.ckpt)
        if ckpt.model_config.scale != r:
            raise UsageError(f"--scale {r} does not match checkpoint scale {ckpt.model_config.scale}")
        model = ckpt.build_model().eval()
    report = evaluate(model, args.manifest, r)
    csv = report.to_csv()
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(csv)
    sys.stdout.write(csv)
    print(f"mean PSNR {report.mean_psnr:.2f} dB  mean SSIM {report.mean_ssim:.4f}  ({len(report.rows)} images)")
    if report.n_infinite:
        print(f"{report.n_infinite} image(s) reconstructed exactly (infinite PSNR, excluded from the mean)")
    return EXIT_RUNTIME if report.failures else EXIT_OK


def _run_model(ckpt_path: str, input_path: str):
    ckpt = _load_checkpoint(ckpt_path)
    model = ckpt.build_model().eval()
    r = ckpt.model_config.scale
    lr = _read_input(input_path)
    ilr = imaging.quantize(imaging.upscale(lr, r))
    return model, predict(model, lr[None].astype(np.float32), ilr[None].astype(np.float32), return_parts=True)


def cmd_sr(args) -> int:
    _print_config("sr", ckpt=args.ckpt, input=args.input, output=args.output)
    _, (hr, _, _) = _run_model(args.ckpt, args.input)
    imaging.png_write(args.output, hr[0].astype(np.float64))
    return EXIT_OK


def cmd_mask(args) -> int:
    _print_config("mask", ckpt=args.ckpt, input=args.input, mask_out=args.mask_out, residual_out=args.residual_out)
    _, (_, mask, residual) = _run_model(args.ckpt, args.input)
    imaging.png_write(args.mask_out, mask[0].astype(np.float64))
    if args.residual_out:
        masked = (residual[0] * mask[0]).astype(np.float64)
        lo, hi = float(masked.min()), float(masked.max())
        scaled = (masked - lo) / (hi - lo) if hi > lo else np.zeros_like(masked)
        imaging.png_write(args.residual_out, scaled)
        print(f"masked residual remapped from [{lo:.6g}, {hi:.6g}] to [0, 255]")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="attnsr", description="Attention-masked single-image super-resolution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="crop HR images and write LR/ILR trees plus a manifest")
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--scale", type=int, required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", default="runs/latest")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--mask-snapshots", type=int, default=0, metavar="N", help="write a mask PNG every N epochs")
    s.add_argument("--model-seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="Y-channel PSNR/SSIM over a manifest")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--bicubic", action="store_true")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scale", type=int, required=True)
    s.add_argument("--csv", help="write per-image rows here as well as to stdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sr", help="super-resolve one PNG")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("mask", help="export the attention mask and masked residual")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask-out", required=True)
    s.add_argument("--residual-out")
    s.set_defaults(func=cmd_mask)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
