"""Preprocessing, subimage extraction, online augmentation and dataset persistence."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .projector import read_pgm, write_pgm

AIR_LEVEL = 0.02


@dataclass
class ImagePair:
    drr: np.ndarray
    fpd: np.ndarray
    case_id: str = "0"
    frame_id: int = 0
    geometry_tag: str = ""

    def __post_init__(self):
        self.drr = np.asarray(self.drr, dtype=np.float64)
        self.fpd = np.asarray(self.fpd, dtype=np.float64)
        if self.drr.shape != self.fpd.shape:
            raise ValueError(f"DRR {self.drr.shape} and FPD {self.fpd.shape} extents differ")

    @property
    def pair_id(self) -> str:
        return f"{self.case_id}/{self.frame_id}"


@dataclass
class SubimageSet:
    parent: str
    drr: np.ndarray  # (k, size, size)
    fpd: np.ndarray
    positions: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class AugmentSpec:
    crop: int = 124
    max_shift: int = 20
    flip_lr: float = 0.5
    flip_ud: float = 0.5
    seed: int = 0

    def check(self, size: int) -> None:
        if self.crop > size or self.max_shift < 0 or self.pad_needed(size) >= size:
            raise ValueError(f"crop {self.crop} with shift {self.max_shift} does not fit a {size}px subimage")

    def pad_needed(self, size: int) -> int:
        """Reflection padding required so every shifted crop stays on the (padded) subimage."""
        return max(0, self.max_shift - (size - self.crop) // 2)


@dataclass(frozen=True)
class PreprocessConfig:
    border: int = 20
    resize: int = 384
    subimage_size: int = 144
    subimages_per_image: int = 20
    air_threshold: float = 0.40
    attempt_budget: int = 1000

    @classmethod
    def toy(cls) -> "PreprocessConfig":
        return cls(border=2, resize=64, subimage_size=56, subimages_per_image=4)


# ---------------------------------------------------------------- transforms

def crop_border(image: np.ndarray, margin: int = 20) -> np.ndarray:
    h, w = image.shape[-2:]
    if margin < 0 or 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} too large for {h}x{w} image")
    if margin == 0:
        return image
    return image[..., margin : h - margin, margin : w - margin]


def resize_bilinear(image: np.ndarray, target=384) -> np.ndarray:
    """Edge-aligned bilinear resampling: corner pixel centres map onto corner pixel centres."""
    th, tw = (target, target) if np.isscalar(target) else target
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError("bilinear resize needs a source of at least 2x2")

    def axis(n_src, n_dst):
        pos = np.linspace(0.0, n_src - 1, n_dst) if n_dst > 1 else np.array([(n_src - 1) / 2.0])
        i0 = np.clip(np.floor(pos).astype(int), 0, n_src - 2)
        return i0, pos - i0

    r0, fr = axis(h, th)
    c0, fc = axis(w, tw)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c0 + 1] * fc
    bot = img[r0 + 1][:, c0] * (1 - fc) + img[r0 + 1][:, c0 + 1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.clip(out, img.min(), img.max())


def normalize(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ValueError(f"degenerate normalization window [{lo}, {hi}]")
    return (np.clip(image, lo, hi) - lo) / (hi - lo)


def denormalize(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.asarray(image) * (hi - lo) + lo


def preprocess_pair(pair: ImagePair, cfg: PreprocessConfig = PreprocessConfig()) -> ImagePair:
    """Border crop then bilinear resize, identically for both images."""
    out = []
    for img in (pair.drr, pair.fpd):
        out.append(resize_bilinear(crop_border(img, cfg.border), cfg.resize))
    return ImagePair(out[0], out[1], pair.case_id, pair.frame_id, pair.geometry_tag)


def air_fraction(window: np.ndarray, air_level: float = AIR_LEVEL) -> float:
    return float(np.mean(window < air_level))


def extract_subimages(
    pair: ImagePair,
    count: int = 20,
    size: int = 144,
    air_threshold: float = 0.40,
    seed: int = 0,
    attempt_budget: int = 1000,
    air_level: float = AIR_LEVEL,
) -> SubimageSet:
    """Seeded rejection sampling of ``count`` aligned windows whose DRR air fraction < threshold.

    Stops after ``attempt_budget`` candidate positions and returns what was accepted.
    """
    h, w = pair.drr.shape
    if size > min(h, w):
        raise ValueError(f"subimage size {size} exceeds image {h}x{w}")
    rng = np.random.default_rng([seed, _stable_id(pair.pair_id)])
    air = (pair.drr < air_level).astype(np.int64)
    # summed-area table -> O(1) air count per window
    sat = np.zeros((h + 1, w + 1), np.int64)
    sat[1:, 1:] = air.cumsum(0).cumsum(1)
    positions: list[tuple[int, int]] = []
    for _ in range(attempt_budget):
        if len(positions) == count:
            break
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        n_air = sat[r + size, c + size] - sat[r, c + size] - sat[r + size, c] + sat[r, c]
        if n_air / (size * size) < air_threshold:
            positions.append((r, c))
    drr = np.stack([pair.drr[r : r + size, c : c + size] for r, c in positions]) if positions else np.zeros((0, size, size))
    fpd = np.stack([pair.fpd[r : r + size, c : c + size] for r, c in positions]) if positions else np.zeros((0, size, size))
    return SubimageSet(pair.pair_id, drr, fpd, positions)


def _stable_id(text: str) -> int:
    # Python's hash() is salted per process; this is not.
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def augment_params(size: int, spec: AugmentSpec, pair_id: int, epoch: int, index: int) -> tuple[int, int, bool, bool]:
    """(row offset, col offset, flip_lr, flip_ud) keyed on (seed, pair id, epoch, index)."""
    spec.check(size)
    rng = np.random.default_rng([spec.seed, pair_id, epoch, index])
    dr, dc = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
    base = (size - spec.crop) // 2
    flip_lr = bool(rng.random() < spec.flip_lr)
    flip_ud = bool(rng.random() < spec.flip_ud)
    return base + int(dr), base + int(dc), flip_lr, flip_ud


def apply_augment(image: np.ndarray, crop: int, r: int, c: int, flip_lr: bool, flip_ud: bool) -> np.ndarray:
    """Crop at (r, c), which may fall outside ``image``; missing rows/cols are reflected in."""
    h, w = image.shape
    pad = max(0, -r, -c, r + crop - h, c + crop - w)
    if pad:
        image = np.pad(image, pad, mode="reflect")
        r, c = r + pad, c + pad
    out = image[r : r + crop, c : c + crop]
    if flip_lr:
        out = out[:, ::-1]
    if flip_ud:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def augment(drr: np.ndarray, fpd: np.ndarray, spec: AugmentSpec, pair_id: int = 0, epoch: int = 0, index: int = 0):
    """Same random crop offset and flips on both images of a subimage pair."""
    r, c, flr, fud = augment_params(drr.shape[0], spec, pair_id, epoch, index)
    return apply_augment(drr, spec.crop, r, c, flr, fud), apply_augment(fpd, spec.crop, r, c, flr, fud)


# ---------------------------------------------------------------- patch dataset

@dataclass
class PatchDataset:
    """Flat stack of aligned subimage pairs used by the trainer."""

    drr: np.ndarray  # (n, S, S)
    fpd: np.ndarray
    ids: np.ndarray  # stable integer id per patch

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_subimages(cls, sets: Sequence[SubimageSet]) -> "PatchDataset":
        drr = [s.drr for s in sets if len(s)]
        fpd = [s.fpd for s in sets if len(s)]
        if not drr:
            raise ValueError("no subimages to train on")
        drr_a = np.concatenate(drr).astype(np.float32)
        fpd_a = np.concatenate(fpd).astype(np.float32)
        return cls(drr_a, fpd_a, np.arange(len(drr_a)))

    @classmethod
    def from_arrays(cls, drr: np.ndarray, fpd: np.ndarray) -> "PatchDataset":
        drr = np.asarray(drr, np.float32)
        fpd = np.asarray(fpd, np.float32)
        if drr.shape != fpd.shape or drr.ndim != 3:
            raise ValueError("expected matching (n, H, W) DRR and FPD stacks")
        return cls(drr, fpd, np.arange(len(drr)))

    def batch(
        self, indices: Iterable[int], spec: AugmentSpec | None, epoch: int, offset: int = 0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Stack (augmented) pairs as (B, 1, H, W); ``offset`` is the position of the first one in the epoch."""
        drr, fpd = [], []
        for k, i in enumerate(indices, start=offset):
            if spec is None:
                d, f = self.drr[i], self.fpd[i]
            else:
                d, f = augment(self.drr[i], self.fpd[i], spec, int(self.ids[i]), epoch, k)
            drr.append(d)
            fpd.append(f)
        return np.stack(drr)[:, None], np.stack(fpd)[:, None]


# ---------------------------------------------------------------- persistence

MANIFEST = "manifest.json"


def save_dataset(path, pairs: Sequence[ImagePair], split: dict[str, list[str]] | None = None, **meta) -> Path:
    """Write ``cases/<id>/frames/<k>/{drr,fpd}.pgm`` plus ``manifest.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pairs:
        d = root / "cases" / str(p.case_id) / "frames" / str(p.frame_id)
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(d / "drr.pgm", p.drr)
        write_pgm(d / "fpd.pgm", p.fpd)
        entries.append({"case": str(p.case_id), "frame": int(p.frame_id), "geometry": p.geometry_tag})
    manifest = {
        "kind": "image_pairs",
        "count": len(entries),
        "pairs": entries,
        "split": split or {},
        **meta,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def save_subimages(path, sets: Sequence[SubimageSet], **meta) -> Path:
    """Subimage sets as ``subimages/<parent>/<j>/{drr,fpd}.pgm`` with their positions in the manifest."""
    root = Path(path)
    entries = []
    for s in sets:
        for j, pos in enumerate(s.positions):
            d = root / "subimages" / s.parent / str(j)
            d.mkdir(parents=True, exist_ok=True)
            write_pgm(d / "drr.pgm", s.drr[j])
            write_pgm(d / "fpd.pgm", s.fpd[j])
        entries.append({"parent": s.parent, "positions": [list(p) for p in s.positions]})
    manifest = {"kind": "subimages", "count": sum(len(s) for s in sets), "sets": entries, **meta}
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        return json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{mpath}: dataset manifest missing") from None


def load_dataset(path, split: str | None = None) -> list[ImagePair] | list[SubimageSet]:
    """Load a saved dataset, validating the manifest against the files on disk."""
    root = Path(path)
    manifest = read_manifest(root)
    if manifest.get("kind") == "subimages":
        return _load_subimages(root, manifest)
    on_disk = sorted(root.glob("cases/*/frames/*/drr.pgm"))
    if len(on_disk) != manifest["count"] or len(manifest["pairs"]) != manifest["count"]:
        raise ValueError(
            f"{root}: manifest lists {manifest['count']} pairs but {len(on_disk)} frame directories exist"
        )
    wanted = None
    if split is not None:
        if split not in manifest.get("split", {}):
            raise KeyError(f"{root}: no split named {split!r}")
        wanted = set(manifest["split"][split])
    pairs = []
    for e in manifest["pairs"]:
        if wanted is not None and e["case"] not in wanted:
            continue
        d = root / "cases" / e["case"] / "frames" / str(e["frame"])
        if not (d / "fpd.pgm").exists():
            raise ValueError(f"{d}: missing fpd.pgm")
        pairs.append(ImagePair(read_pgm(d / "drr.pgm"), read_pgm(d / "fpd.pgm"), e["case"], e["frame"], e.get("geometry", "")))
    return pairs


def _load_subimages(root: Path, manifest: dict) -> list[SubimageSet]:
    sets = []
    total = 0
    for e in manifest["sets"]:
        pos = [tuple(p) for p in e["positions"]]
        d = [read_pgm(root / "subimages" / e["parent"] / str(j) / "drr.pgm") for j in range(len(pos))]
        f = [read_pgm(root / "subimages" / e["parent"] / str(j) / "fpd.pgm") for j in range(len(pos))]
        total += len(pos)
        sets.append(SubimageSet(e["parent"], np.array(d), np.array(f), pos))
    on_disk = len(list(root.glob("subimages/**/drr.pgm")))
    if total != manifest["count"] or on_disk != total:
        raise ValueError(f"{root}: manifest lists {manifest['count']} subimages, found {on_disk}")
    return sets


def config_dict(obj) -> dict:
    return asdict(obj)
