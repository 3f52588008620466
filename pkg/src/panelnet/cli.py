"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import erpt
from .errors import ConfigError, DataError, NumericError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("panelnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def cmd_render(args):
    from .synthetic import render_erp, sample_room

    if args.count < 1:
        raise ConfigError("--count must be at least 1")
    out = Path(args.out)

    def one(i):
        scene = sample_room(args.seed + i, furniture=args.furniture)
        erpt.save_sample(out, i, render_erp(scene, args.width, args.height))

    # validate once up front so configuration errors are reported cleanly
    sample_room(args.seed, furniture=args.furniture)
    render_erp(sample_room(args.seed), args.width, args.height)
    with ThreadPoolExecutor() as pool:
        list(pool.map(one, range(args.count)))
    print(f"wrote {args.count} scenes to {out}")


def cmd_train(args):
    from .metrics import format_rows
    from .train import load_config, train

    cfg = load_config(args.config, data=args.data, out=args.out)

    def progress(step, loss, row, elapsed):
        log.info("step %d loss %.5f %s (%.0f s)", step, loss,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)), elapsed)

    row = train(cfg, resume=args.resume, deterministic=args.deterministic, progress=progress)
    row = {k: v for k, v in row.items() if k not in ("stopped_early", "mean_depth")}
    sys.stdout.write(format_rows([row]))


def cmd_eval(args):
    from .metrics import format_rows
    from .train import evaluate

    task = {"seg": "segmentation"}.get(args.task, args.task)
    row = evaluate(args.checkpoint, args.data, task, merge=args.merge, inject_gt=args.inject_gt)
    print(f"merge={args.merge}", file=sys.stderr)
    sys.stdout.write(format_rows([row]))


def cmd_infer(args):
    from .train import load_checkpoint, predict

    state = load_checkpoint(args.checkpoint)
    rgb = erpt.read(args.input)
    cfg = state.model.cfg
    if rgb.shape != (3, cfg.height, cfg.width):
        raise DataError(f"input is {rgb.shape}, model expects (3, {cfg.height}, {cfg.width})")
    pred = predict(state.model, rgb.astype(np.float32), uniform=args.merge == "uniform")
    if "depth" in pred:
        arr = pred["depth"][None]
    elif "labels" in pred:
        arr = pred["labels"][None]
    else:
        arr = np.asarray(pred["boundary"], dtype=np.float32)[None, None]
        print(f"room_height {pred['room_height']:.6f}")
    erpt.write(args.out, arr)


def cmd_panelize(args):
    from .panels import PanelConfig, merge_panels, partition_erp

    img = erpt.read(args.input)
    cfg = PanelConfig(args.interval, args.stride, img.shape[2], img.shape[1])
    panels = partition_erp(img.astype(np.float32), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, p in enumerate(panels.panels):
        erpt.write(out / f"panel_{n:03d}.erpt", p.astype(img.dtype))
    merged = merge_panels(panels.panels, cfg=cfg, uniform=True)
    erpt.write(out / "reassembled.erpt", merged.astype(img.dtype))
    print(f"{cfg.num_panels} panels of {cfg.height}x{cfg.interval}, multiplicity {cfg.multiplicity}")


def cmd_gradcheck(args):
    from .checks import CHECKS, GROUPS, run_checks

    if args.module and args.module not in CHECKS and args.module not in GROUPS:
        raise ConfigError(f"unknown module {args.module!r}; choose a group {sorted(GROUPS)} "
                          f"or one of {sorted(CHECKS)}")
    failures = 0
    for name, report in run_checks(args.module, seeds=range(args.seeds)):
        status = "ok" if report.passed else "FAIL"
        failures += not report.passed
        print(f"{status:4s} {name:32s} max rel error {report.max_rel_error:.2e}")
    if failures:
        raise NumericError(f"{failures} gradient check(s) failed")


def build_parser():
    p = _Parser(prog="panelnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", help="render synthetic rooms")
    r.add_argument("--out", required=True)
    r.add_argument("--count", type=int, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--height", type=int, default=128)
    r.add_argument("--width", type=int, default=256)
    r.add_argument("--furniture", type=int, default=0)
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True, choices=("depth", "seg", "segmentation", "layout"))
    e.add_argument("--merge", default="confidence", choices=("confidence", "uniform"))
    e.add_argument("--inject-gt", action="store_true", help="score ground truth as the prediction")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict one panorama")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--merge", default="confidence", choices=("confidence", "uniform"))
    i.set_defaults(func=cmd_infer)

    z = sub.add_parser("panelize", help="split an ERPT image into panels and reassemble")
    z.add_argument("--input", required=True)
    z.add_argument("--interval", type=int, required=True)
    z.add_argument("--stride", type=int, required=True)
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_panelize)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--module", help="check name or group (ops, blocks, losses)")
    g.add_argument("--seeds", type=int, default=3)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
