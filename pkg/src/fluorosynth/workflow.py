"""Pipeline stages on a run directory: phantoms, projections, FPD simulation, dataset, training, evaluation."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import datapipe as dp
from . import projector as pj
from .config import RunConfig
from .metrics import MetricsReport, evaluate, write_boxplot_csv
from .nets import FeatureExtractor, ModelBundle, run_generator, run_unet
from .trainer import load_checkpoint, load_unet, save_unet, train_loop, train_unet

log = logging.getLogger(__name__)

PHANTOMS, PROJECTIONS, FPD, DATASET, MODEL, UNET, EVAL, REPORT = (
    "phantoms", "projections", "fpd", "dataset", "model", "unet", "eval", "report",
)  # fmt: skip


def _json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _frames(path: Path) -> list[dict]:
    try:
        return json.loads((path / "frames.json").read_text())["frames"]
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: frames.json missing; run the previous stage first") from None


def plan_frames(cfg: RunConfig) -> list[dict]:
    """Per-frame couch roll and interfractional shift (random direction, magnitude in range)."""
    p = cfg.phantom
    out = []
    for case in range(p.cases):
        rng = np.random.default_rng([cfg.seed, case, 11])
        for frame in range(p.frames_per_case):
            roll = float(rng.uniform(-p.roll_max_deg, p.roll_max_deg))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            shift = direction * rng.uniform(p.shift_min_mm, p.shift_max_mm)
            out.append({"case": f"c{case:03d}", "frame": frame, "roll_deg": roll, "shift_mm": [float(s) for s in shift]})
    return out


def make_phantoms(cfg: RunConfig, run_dir) -> Path:
    out = Path(run_dir) / PHANTOMS
    frames = plan_frames(cfg)
    for case in range(cfg.phantom.cases):
        spec = pj.PhantomSpec.random(cfg.seed * 100_003 + case, marker=cfg.phantom.marker)
        vol = pj.make_phantom(spec, cfg.phantom.extents, cfg.phantom.spacing)
        d = out / f"c{case:03d}"
        d.mkdir(parents=True, exist_ok=True)
        pj.write_volume(d / "planning.fsvol", vol)
    _json(out / "frames.json", {"frames": frames, "seed": cfg.seed})
    log.info("wrote %d phantom volumes, %d frames", cfg.phantom.cases, len(frames))
    return out


def project_study(cfg: RunConfig, run_dir) -> Path:
    """Planning DRR and the treatment-day (shifted anatomy) projection per frame.

    Both images of a frame share the planning DRR's maximum ray sum as the
    normalization constant, so the shift is the only difference between them.
    """
    run_dir = Path(run_dir)
    src, out = run_dir / PHANTOMS, run_dir / PROJECTIONS
    frames = _frames(src)
    volumes: dict[str, pj.CtVolume] = {}
    for f in frames:
        vol = volumes.setdefault(f["case"], pj.read_volume(src / f["case"] / "planning.fsvol"))
        geom = cfg.geometry.geometry(f["roll_deg"])
        raw, drr = pj.project_drr(vol, geom, cfg.geometry.mu_water)
        q_max = float(raw.max())
        _, treatment = pj.project_drr(vol.shifted(f["shift_mm"]), geom, cfg.geometry.mu_water, q_max=q_max)
        d = out / f["case"] / str(f["frame"])
        d.mkdir(parents=True, exist_ok=True)
        pj.write_pgm(d / "drr.pgm", drr)
        pj.write_pgm(d / "treatment.pgm", treatment)
        f["q_max"] = q_max
    _json(out / "frames.json", {"frames": frames, "seed": cfg.seed})
    log.info("projected %d frames", len(frames))
    return out


def simulate_study(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    src, out = run_dir / PROJECTIONS, run_dir / FPD
    frames = _frames(src)
    for i, f in enumerate(frames):
        treatment = pj.read_pgm(src / f["case"] / str(f["frame"]) / "treatment.pgm")
        fpd = pj.simulate_fpd(treatment, cfg.fpd.spec(seed=cfg.seed * 100_003 + i, shift_mm=f["shift_mm"]))
        d = out / f["case"] / str(f["frame"])
        d.mkdir(parents=True, exist_ok=True)
        pj.write_pgm(d / "fpd.pgm", fpd)
    _json(out / "frames.json", {"frames": frames, "seed": cfg.seed})
    return out


def _subset(items: list, count: int, seed) -> list:
    """``count`` items drawn without replacement, original order kept; 0 or too few keeps everything."""
    if count <= 0 or count >= len(items):
        return items
    keep = np.sort(np.random.default_rng(seed).choice(len(items), count, replace=False))
    return [items[i] for i in keep]


def build_dataset(cfg: RunConfig, run_dir) -> Path:
    """Preprocess every pair, split by case, and cut training subimages."""
    run_dir = Path(run_dir)
    frames = _frames(run_dir / FPD)
    pre = cfg.datapipe.preprocess()
    frames = _subset(frames, cfg.datapipe.selected_pairs, [cfg.seed, 7])
    pairs = []
    for f in frames:
        sub = f"{f['case']}/{f['frame']}"
        drr = pj.read_pgm(run_dir / PROJECTIONS / sub / "drr.pgm")
        fpd = pj.read_pgm(run_dir / FPD / sub / "fpd.pgm")
        geom = f"roll={f['roll_deg']:.3f}"
        pairs.append(dp.preprocess_pair(dp.ImagePair(drr, fpd, f["case"], f["frame"], geom), pre))
    cases = sorted({p.case_id for p in pairs})
    order = np.random.default_rng([cfg.seed, 5]).permutation(len(cases))
    test = sorted(cases[i] for i in order[: cfg.datapipe.test_cases])
    train = sorted(set(cases) - set(test))
    out = run_dir / DATASET
    dp.save_dataset(out / "pairs", pairs, split={"train": train, "test": test}, preprocess=dp.config_dict(pre), seed=cfg.seed)
    cut = _subset([p for p in pairs if p.case_id in train], cfg.datapipe.subdivided_pairs, [cfg.seed, 11])
    sets = [
        dp.extract_subimages(p, pre.subimages_per_image, pre.subimage_size, pre.air_threshold, cfg.seed, pre.attempt_budget)
        for p in cut
    ]
    dp.save_subimages(out / "subimages", sets, seed=cfg.seed)
    log.info("dataset: %d train / %d test pairs, %d subimages", sum(p.case_id in train for p in pairs),
             sum(p.case_id in test for p in pairs), sum(len(s) for s in sets))  # fmt: skip
    return out


def _extractor(cfg: RunConfig) -> FeatureExtractor:
    return FeatureExtractor(cfg.model.extractor(cfg.seed))


def train_model(cfg: RunConfig, run_dir, baseline: str | None = None) -> Path:
    run_dir = Path(run_dir)
    sets = dp.load_dataset(run_dir / DATASET / "subimages")
    data = dp.PatchDataset.from_subimages(sets)
    tcfg = cfg.train.config(cfg.datapipe.augment(cfg.seed), cfg.seed)
    if baseline == "unet":
        out = run_dir / UNET
        out.mkdir(parents=True, exist_ok=True)
        params, hist = train_unet(data, tcfg, cfg.model.unet())
        save_unet(params, cfg.model.unet(), out / "unet")
        with open(out / "loss_history.csv", "w") as fh:
            fh.write("step,l1\n")
            fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(hist))
        return out
    out = run_dir / MODEL
    bundle = None
    ckpt = out / "checkpoint"
    if ckpt.with_suffix(".json").exists():
        bundle = load_checkpoint(ckpt, cfg.model.generator(), cfg.model.discriminator())
        log.info("resuming from epoch %d", bundle.epoch)
    else:
        bundle = ModelBundle.initialize(cfg.model.generator(), cfg.model.discriminator(), cfg.seed, tcfg.optimizer())
    train_loop(data, tcfg, cfg.train.weights(), bundle, extractor=_extractor(cfg), out_dir=out)
    return out


def load_translators(cfg: RunConfig, run_dir, baseline: str | None = None):
    """(load_ms, {column: fn}) for the trained generator and, optionally, the U-Net."""
    run_dir = Path(run_dir)
    t0 = time.perf_counter()
    bundle = load_checkpoint(run_dir / MODEL / "checkpoint", cfg.model.generator(), cfg.model.discriminator())
    fns = {"ours": lambda img: run_generator(bundle.gen_cfg, bundle.g_drr2fpd, img)}
    if baseline == "unet":
        params, ucfg = load_unet(run_dir / UNET / "unet")
        fns["unet"] = lambda img: run_unet(ucfg, params, img)
    return (time.perf_counter() - t0) * 1e3, fns


def evaluate_run(cfg: RunConfig, run_dir, baseline: str | None = None) -> MetricsReport:
    run_dir = Path(run_dir)
    pairs = dp.load_dataset(run_dir / DATASET / "pairs", split="test")
    _, fns = load_translators(cfg, run_dir, baseline)
    extra = {k: v for k, v in fns.items() if k != "ours"}
    report = evaluate(
        fns["ours"],
        pairs,
        cfg.eval.kid(cfg.model.extractor(cfg.seed), cfg.seed),
        baselines=extra,
        warmup=cfg.eval.warmup,
        extractor=_extractor(cfg),
        config_digest=json.loads((run_dir / MODEL / "checkpoint.json").read_text())["config_digest"],
    )
    report.write(run_dir / EVAL)
    return report


def render_report(cfg: RunConfig, run_dir, baseline: str | None = None) -> Path:
    """Side-by-side panels (DRR | FPD | ours [| U-Net] | |ours - FPD|), metric table and box-plot quantiles."""
    run_dir = Path(run_dir)
    out = run_dir / REPORT
    (out / "panels").mkdir(parents=True, exist_ok=True)
    report = evaluate_run(cfg, run_dir, baseline)
    pairs = dp.load_dataset(run_dir / DATASET / "pairs", split="test")
    _, fns = load_translators(cfg, run_dir, baseline)
    for p in sorted(pairs, key=lambda q: (q.case_id, q.frame_id)):
        syn = fns["ours"](p.drr)
        tiles = [p.drr, p.fpd, syn]
        if "unet" in fns:
            tiles.append(fns["unet"](p.drr))
        tiles.append(np.abs(syn - p.fpd))
        gap = np.ones((p.drr.shape[0], 2))
        panel = np.concatenate([x for t in tiles for x in (t, gap)][:-1], axis=1)
        pj.write_pgm(out / "panels" / f"{p.case_id}_{p.frame_id}.pgm", panel)
    summary = report.summary()
    lines = ["| metric | " + " | ".join(summary["columns"]) + " |", "|---" * (len(summary["columns"]) + 1) + "|"]
    for metric in ("mae", "psnr", "ssim"):
        lines.append(f"| {metric.upper()} | " + " | ".join(summary["metrics"][c][metric]["text"] for c in summary["columns"]) + " |")
    lines.append("| KID | " + " | ".join(f"{summary['metrics'][c]['kid']['raw']:.4f}" for c in summary["columns"]) + " |")
    lines.append(f"\nGeneration time: {report.timing()['generation_ms']['text']} ms per image (model load excluded)\n")
    (out / "metrics.md").write_text("\n".join(lines))
    write_boxplot_csv(out / "boxplot.csv", report)
    return out
