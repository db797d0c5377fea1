"""Command-line entry point: ``fluorosynth <subcommand> [--config F] [--seed N] [--out DIR] [--toy]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import workflow as wf
from .config import ConfigError, RunConfig, load_config, write_effective
from .gradcore import ArchiveError
from .projector import read_pgm, write_pgm
from .trainer import CheckpointMismatch, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("fluorosynth")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, help="run directory (overrides the config)")
    common.add_argument("--toy", action="store_true", help="desk-scale preset: small images, narrow nets, short schedule")

    parser = argparse.ArgumentParser(prog="fluorosynth", description="DRR to fluoroscopy image synthesis pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="write synthetic thorax CT volumes")
    sub.add_parser("project", parents=[common], help="cast planning DRRs and treatment-day projections")
    sub.add_parser("simulate-fpd", parents=[common], help="degrade treatment-day projections into FPD-like images")
    sub.add_parser("make-dataset", parents=[common], help="preprocess, split and cut training subimages")
    p = sub.add_parser("train", parents=[common], help="train the CycleGAN (or the U-Net baseline)")
    p.add_argument("--baseline", choices=["unet"], help="train the supervised U-Net baseline instead")
    p = sub.add_parser("infer", parents=[common], help="translate one DRR image into a synthetic FPD")
    p.add_argument("input", type=Path, help="input DRR (PGM)")
    p.add_argument("-o", "--output", type=Path, help="output PGM (default: <out>/infer/<name>_synthetic.pgm)")
    p.add_argument("--repeat", type=int, default=5, help="timed generations to average")
    for name, text in (("evaluate", "metrics on the held-out split"), ("report", "panels, metric table and box-plot quantiles")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--baseline", choices=["drr", "unet"], default="drr", help="extra baseline column (drr is always present)")
    return parser


def _setup_logging(directory: Path) -> logging.Handler:
    directory.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(directory / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("fluorosynth")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def _thread_limit():
    value = os.environ.get("FLUOROSYNTH_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"FLUOROSYNTH_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("FLUOROSYNTH_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


STAGE_DIRS = {
    "phantom": wf.PHANTOMS,
    "project": wf.PROJECTIONS,
    "simulate-fpd": wf.FPD,
    "make-dataset": wf.DATASET,
    "train": wf.MODEL,
    "infer": "infer",
    "evaluate": wf.EVAL,
    "report": wf.REPORT,
}


def _infer(cfg: RunConfig, run_dir: Path, args) -> dict:
    load_ms, fns = wf.load_translators(cfg, run_dir)
    image = read_pgm(args.input)
    generate = fns["ours"]
    generate(image)  # warm-up, not timed
    times = []
    for _ in range(max(1, args.repeat)):
        t0 = time.perf_counter()
        out = generate(image)
        times.append((time.perf_counter() - t0) * 1e3)
    dest = args.output or run_dir / "infer" / f"{args.input.stem}_synthetic.pgm"
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(dest, out)
    t = np.asarray(times)
    result = {
        "output": str(dest),
        "load_ms": load_ms,
        "generation_ms_mean": float(t.mean()),
        "generation_ms_sd": float(t.std(ddof=1)) if t.size > 1 else 0.0,
        "repeats": int(t.size),
        "warmup": 1,
    }
    print(f"model load: {load_ms:.1f} ms")
    print(f"generation: {result['generation_ms_mean']:.1f} ± {result['generation_ms_sd']:.1f} ms per image ({t.size} runs, load excluded)")
    return result


def _dispatch(args, cfg: RunConfig, run_dir: Path) -> dict:
    cmd = args.command
    if cmd == "phantom":
        wf.make_phantoms(cfg, run_dir)
    elif cmd == "project":
        wf.project_study(cfg, run_dir)
    elif cmd == "simulate-fpd":
        wf.simulate_study(cfg, run_dir)
    elif cmd == "make-dataset":
        wf.build_dataset(cfg, run_dir)
    elif cmd == "train":
        wf.train_model(cfg, run_dir, baseline=args.baseline)
    elif cmd == "infer":
        return _infer(cfg, run_dir, args)
    elif cmd in ("evaluate", "report"):
        baseline = None if args.baseline == "drr" else args.baseline
        if cmd == "evaluate":
            report = wf.evaluate_run(cfg, run_dir, baseline)
            summary = report.summary()
            for col in summary["columns"]:
                m = summary["metrics"][col]
                print(f"{col:>5}: MAE {m['mae']['text']}  PSNR {m['psnr']['text']} dB  SSIM {m['ssim']['text']}  KID {m['kid']['raw']:.4f}")
        else:
            print(wf.render_report(cfg, run_dir, baseline))
    return {}


def _error(code: int, kind: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "exit": code, "message": msg}), file=sys.stderr)
    log.error("%s: %s", kind, msg)
    return code


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = None
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = str(args.out)
        cfg = load_config(args.config, toy=args.toy, overrides=overrides)
        run_dir = Path(cfg.out)
        stage_dir = run_dir / (wf.UNET if getattr(args, "baseline", None) == "unet" and args.command == "train" else STAGE_DIRS[args.command])
        handler = _setup_logging(run_dir)
        write_effective(cfg, stage_dir)
        log.info("%s: seed=%d toy=%s version=%s", args.command, cfg.seed, cfg.toy, __version__)
        t0 = time.perf_counter()
        with _thread_limit():
            extra = _dispatch(args, cfg, run_dir)
        elapsed = time.perf_counter() - t0
        log.info("%s finished in %.2f s %s", args.command, elapsed, json.dumps(extra) if extra else "")
        return EXIT_OK
    except NumericalError as exc:
        return _error(EXIT_NUMERICAL, "numerical", exc)
    except (ConfigError, CheckpointMismatch) as exc:
        return _error(EXIT_CONFIG, "config", exc)
    except (OSError, ArchiveError) as exc:
        return _error(EXIT_IO, "io", exc)
    except (ValueError, KeyError) as exc:
        return _error(EXIT_CONFIG, "input", exc)
    finally:
        if handler is not None:
            logging.getLogger("fluorosynth").removeHandler(handler)
            handler.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
