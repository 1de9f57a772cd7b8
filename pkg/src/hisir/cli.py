"""``hisir`` command line: synth | train | infer | eval.

Every failure exits nonzero after printing one line to stderr of the form
``error: <category>: <detail>`` so scripts can switch on the category.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import imaging, nnet, pipeline
from .config import PRESETS, RunConfig, emit_config, load_config

log = logging.getLogger("hisir")

# exit codes per error category
EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "format": 5, "training": 6, "metric": 7, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named base configuration")
    p.add_argument("--threads", type=int, help="parallel patch workers (1 = bitwise deterministic)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hisir", description="Patch-based PCB anomaly localization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic board dataset")
    p.add_argument("out_dir")
    p.add_argument("--n-normal", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-good", type=int)
    _add_common(p)

    p = sub.add_parser("train", help="train on DATA_DIR/normal and write a checkpoint")
    p.add_argument("data_dir")
    p.add_argument("ckpt_out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    _add_common(p)

    p = sub.add_parser("infer", help="score one image")
    p.add_argument("image")
    p.add_argument("ckpt")
    p.add_argument("out_prefix")
    _add_common(p)

    p = sub.add_parser("eval", help="score the test split and write a report")
    p.add_argument("data_dir")
    p.add_argument("ckpt")
    p.add_argument("--report", default=None, help="report path stem (default DATA_DIR/report)")
    p.add_argument("--theta", type=float)
    p.add_argument("--sweep", action="store_true", help="also emit a (theta, precision, recall, fp_count) table")
    _add_common(p)
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise CliError("usage", f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    names = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in names and value is not None:
            overrides[key] = value
    try:
        return load_config(args.config, args.preset, overrides)
    except FileNotFoundError as e:
        raise CliError("io", str(e)) from e
    except (KeyError, ValueError, TypeError) as e:
        raise CliError("config", str(e).strip("'\"")) from e


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> None:
    out = pipeline.synthesize(args.out_dir, cfg)
    print(f"wrote {cfg.n_normal} normal, {cfg.n_test} test, {cfg.n_good} defect-free boards to {out}")


def _load_ckpt(path: str) -> nnet.ModelState:
    try:
        return nnet.load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError("io", str(e)) from e


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    normal = sorted((Path(args.data_dir) / "normal").glob("*.ppm"))
    if not normal:
        raise CliError("io", f"no training images under {args.data_dir}/normal")
    images = [imaging.read_image(p) for p in normal]
    state, hist = pipeline.train(images, cfg)
    nnet.save_checkpoint(state, args.ckpt_out)
    Path(args.ckpt_out + ".cfg").write_text(emit_config(cfg))
    for i, loss in enumerate(hist.epoch_loss, 1):
        print(f"epoch {i} loss {loss:.6f}")
    print(f"checkpoint {args.ckpt_out} after {state.step} steps")


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> None:
    state = _load_ckpt(args.ckpt)
    img = imaging.read_image(args.image)
    res = pipeline.infer_image(img, state, cfg)
    for path in pipeline.write_outputs(res, args.out_prefix):
        print(path)


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> None:
    from . import evalkit

    state = _load_ckpt(args.ckpt)
    maps = pipeline.score_suite(args.data_dir, state, cfg)
    report = pipeline.evaluate_maps(maps, cfg, sweep=args.sweep)
    stem = Path(args.report) if args.report else Path(args.data_dir) / "report"
    evalkit.write_report(report, stem)
    print(
        f"pixel_auroc {report.pixel_auroc:.4f} aupro {report.aupro:.4f} "
        f"precision {report.precision:.4f} recall {report.recall:.4f} "
        f"fp_defect_free {report.fp_count_defect_free} theta {report.theta}"
    )
    if args.sweep:
        print("theta precision recall fp_count fp_defect_free")
        for row in report.sweep:
            print(f"{row['theta']:.2f} {row['precision']:.4f} {row['recall']:.4f} {row['fp']} {row['fp_count_defect_free']}")
        best = pipeline.best_theta(report.sweep)
        print(f"best_theta {best['theta']:.2f} f1 {best['f1']:.4f}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def _categorize(exc: BaseException) -> str:
    from .evalkit import UndefinedMetricError

    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, (imaging.ImageFormatError, imaging.PayloadLengthError)):
        return "format"
    if isinstance(exc, nnet.TrainingError):
        return "training"
    if isinstance(exc, UndefinedMetricError):
        return "metric"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, ValueError):
        return "format"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # one-line diagnostics for every failure
        category = _categorize(exc)
        detail = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {detail}", file=sys.stderr)
        if category == "internal":
            log.debug("traceback", exc_info=True)
        return EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
