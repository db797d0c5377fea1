"""Image quality metrics (MAE, PSNR, SSIM, KID), timed evaluation and reports."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .datapipe import ImagePair
from .nets import FeatureExtractor, FeatureExtractorSpec


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image extents differ: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # window is symmetric, so correlation == convolution; keep only fully covered positions
    full = ndimage.correlate(img, win, mode="constant")
    h0, w0 = win.shape[0] // 2, win.shape[1] // 2
    return full[h0 : img.shape[0] - (win.shape[0] - 1 - h0), w0 : img.shape[1] - (win.shape[1] - 1 - w0)]


def ssim_map(a, b, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0):
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a**2
    sbb = _filter_valid(b * b, win) - mu_b**2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))


def ssim(a, b, **kw) -> float:
    """Mean SSIM over valid windows (Gaussian 11x11, sigma 1.5, k1=0.01, k2=0.03)."""
    return float(np.mean(ssim_map(a, b, **kw)))


# ---------------------------------------------------------------- KID

@dataclass(frozen=True)
class KidConfig:
    extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    degree: int = 3
    offset: float = 1.0
    block_size: int = 16
    n_blocks: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.block_size < 2:
            raise ValueError("KID block size must be >= 2")
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")
        if self.n_blocks < 1:
            raise ValueError("need at least one block")


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3, offset: float = 1.0) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + offset) ** degree


def mmd2_unbiased(fx: np.ndarray, fy: np.ndarray, degree: int = 3, offset: float = 1.0) -> float:
    """Unbiased squared MMD between feature rows ``fx`` (m, d) and ``fy`` (n, d)."""
    m, n = len(fx), len(fy)
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least two samples per set")
    kxx = polynomial_kernel(fx, fx, degree, offset)
    kyy = polynomial_kernel(fy, fy, degree, offset)
    kxy = polynomial_kernel(fx, fy, degree, offset)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid_blocks(fx: np.ndarray, fy: np.ndarray, cfg: KidConfig = KidConfig()) -> np.ndarray:
    """Per-block unbiased MMD^2 on seeded subsets of the two feature sets."""
    fx = np.asarray(fx, np.float64)
    fy = np.asarray(fy, np.float64)
    m = min(cfg.block_size, len(fx), len(fy))
    if len(fx) < cfg.block_size or len(fy) < cfg.block_size:
        raise ValueError(f"KID needs at least {cfg.block_size} images per set, got {len(fx)} and {len(fy)}")
    rng = np.random.default_rng(cfg.seed)
    out = np.empty(cfg.n_blocks)
    for i in range(cfg.n_blocks):
        ix = rng.choice(len(fx), m, replace=False)
        iy = rng.choice(len(fy), m, replace=False)
        out[i] = mmd2_unbiased(fx[ix], fy[iy], cfg.degree, cfg.offset)
    return out


def kid_from_features(fx, fy, cfg: KidConfig = KidConfig()) -> tuple[float, float]:
    """KID mean over blocks and its standard error."""
    vals = kid_blocks(fx, fy, cfg)
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


def kid(set_a, set_b, cfg: KidConfig = KidConfig(), extractor: FeatureExtractor | None = None) -> float:
    """Kernel inception distance between two image stacks (n, H, W) in [0, 1]."""
    extractor = extractor or FeatureExtractor(cfg.extractor)
    fa = extractor.embed(np.asarray(set_a)[:, None] if np.ndim(set_a) == 3 else set_a)
    fb = extractor.embed(np.asarray(set_b)[:, None] if np.ndim(set_b) == 3 else set_b)
    return kid_from_features(fa, fb, cfg)[0]


# ---------------------------------------------------------------- evaluation

@dataclass
class MetricsReport:
    rows: list[dict]
    kid: dict[str, float]
    kid_se: dict[str, float]
    timing_ms: list[float]
    warmup: int
    config_digest: str = ""
    columns: tuple[str, ...] = ("drr", "ours")

    def summary(self) -> dict:
        agg: dict = {}
        for col in self.columns:
            agg[col] = {}
            for metric in ("mae", "psnr", "ssim"):
                vals = np.array([r[f"{metric}_{col}"] for r in self.rows], float)
                agg[col][metric] = {"mean": _finite_mean(vals), "sd": _finite_sd(vals), "text": _pm(vals)}
            agg[col]["kid"] = {"value": round(self.kid[col], 4) if math.isfinite(self.kid[col]) else self.kid[col], "raw": self.kid[col], "se": self.kid_se[col]}
        return {
            "columns": list(self.columns),
            "count": len(self.rows),
            "metrics": agg,
            "config_digest": self.config_digest,
            "timing_file": "timing.json",
        }

    def timing(self) -> dict:
        """Generation time per image; kept apart from the metrics so reports stay bitwise reproducible."""
        t = np.asarray(self.timing_ms, float)
        return {
            "generation_ms": {
                "mean": float(t.mean()) if t.size else 0.0,
                "sd": float(t.std(ddof=1)) if t.size > 1 else 0.0,
                "text": _pm(t, 1),
                "per_image": [float(x) for x in t],
            },
            "clock": "time.perf_counter",
            "warmup_iterations": self.warmup,
            "excludes": "model load",
        }

    def to_csv(self, path) -> None:
        keys = ["case", "frame"] + [f"{m}_{c}" for c in self.columns for m in ("mae", "psnr", "ssim")]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True, allow_nan=True))

    def write(self, directory) -> Path:
        """``report.csv``, ``report.json`` and ``timing.json`` in ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / "report.csv")
        self.to_json(out / "report.json")
        (out / "timing.json").write_text(json.dumps(self.timing(), indent=2, sort_keys=True))
        return out


def _finite_mean(v: np.ndarray) -> float:
    f = v[np.isfinite(v)]
    return float(f.mean()) if f.size else float("inf")


def _finite_sd(v: np.ndarray) -> float:
    f = v[np.isfinite(v)]
    return float(f.std(ddof=1)) if f.size > 1 else 0.0


def _pm(v, digits: int = 2) -> str:
    v = np.asarray(v, float)
    return f"{_finite_mean(v):.{digits}f} ± {_finite_sd(v):.{digits}f}"


Translator = Callable[[np.ndarray], np.ndarray]


def evaluate(
    generator: Translator,
    pairs: Sequence[ImagePair],
    kid_cfg: KidConfig | None = None,
    baselines: dict[str, Translator] | None = None,
    warmup: int = 1,
    extractor: FeatureExtractor | None = None,
    config_digest: str = "",
) -> MetricsReport:
    """Metrics of generator(DRR) vs FPD alongside the raw-DRR column and optional extra baselines.

    ``generator`` maps a single (H, W) image to (H, W). Only the generator
    call is timed; ``warmup`` untimed calls on the first DRR precede timing.
    """
    if not pairs:
        raise ValueError("empty test set")
    pairs = sorted(pairs, key=lambda p: (str(p.case_id), int(p.frame_id)))
    baselines = dict(baselines or {})
    columns = ("drr", "ours", *baselines)
    for _ in range(warmup):
        generator(pairs[0].drr)
    rows, outputs, timing = [], {c: [] for c in columns}, []
    for p in pairs:
        t0 = time.perf_counter()
        syn = np.asarray(generator(p.drr))
        timing.append((time.perf_counter() - t0) * 1e3)
        images = {"drr": p.drr, "ours": syn, **{k: np.asarray(f(p.drr)) for k, f in baselines.items()}}
        row = {"case": str(p.case_id), "frame": int(p.frame_id)}
        for col in columns:
            img = images[col]
            outputs[col].append(img)
            row[f"mae_{col}"] = mae(img, p.fpd)
            row[f"psnr_{col}"] = psnr(img, p.fpd)
            row[f"ssim_{col}"] = ssim(img, p.fpd)
        rows.append(row)
    kid_cfg = kid_cfg or KidConfig(block_size=min(16, len(pairs)))
    extractor = extractor or FeatureExtractor(kid_cfg.extractor)
    real = extractor.embed(np.stack([p.fpd for p in pairs])[:, None])
    kids, ses = {}, {}
    for col in columns:
        feats = extractor.embed(np.stack(outputs[col])[:, None])
        kids[col], ses[col] = kid_from_features(feats, real, kid_cfg)
    return MetricsReport(rows, kids, ses, timing, warmup, config_digest, columns)


def boxplot_stats(values) -> dict:
    """Quartiles, Tukey whiskers and outliers (beyond 1.5 IQR from the box)."""
    v = np.sort(np.asarray(values, float))
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("no finite values")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    }


def write_boxplot_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "column", "q1", "median", "q3", "whisker_low", "whisker_high", "outliers"])
        for metric in ("mae", "psnr", "ssim"):
            for col in report.columns:
                s = boxplot_stats([r[f"{metric}_{col}"] for r in report.rows])
                w.writerow([metric, col, s["q1"], s["median"], s["q3"], s["whisker_low"], s["whisker_high"], " ".join(map(repr, s["outliers"]))])


def config_dict(cfg: KidConfig) -> dict:
    return asdict(cfg)
