"""Cone-beam DRR ray casting, procedural thorax phantoms and an FPD image simulator."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

HU_MIN, HU_MAX = -1024.0, 4000.0
AIR_HU = -1000.0


# ---------------------------------------------------------------- data types

@dataclass
class CtVolume:
    """HU voxel grid indexed ``values[ix, iy, iz]``.

    ``origin`` is the world position (mm) of the centre of voxel (0, 0, 0).
    World axes: x lateral, y anterior-posterior (beam axis), z longitudinal.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("CT volume must be 3-D")
        if min(self.spacing) <= 0:
            raise ValueError(f"voxel spacing must be positive, got {self.spacing}")
        if self.origin is None:
            self.origin = tuple(-(n - 1) * s / 2.0 for n, s in zip(self.values.shape, self.spacing))

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space box covered by the voxels (outer faces, not centres)."""
        sp = np.asarray(self.spacing, float)
        lo = np.asarray(self.origin, float) - sp / 2
        hi = lo + sp * np.asarray(self.extents)
        return lo, hi

    def shifted(self, offset_mm) -> "CtVolume":
        """Rigid translation of the anatomy by ``offset_mm`` (x, y, z)."""
        return CtVolume(self.values, self.spacing, tuple(np.asarray(self.origin, float) + np.asarray(offset_mm, float)))

    def validate_hu(self) -> None:
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise ValueError(f"HU values outside [{HU_MIN}, {HU_MAX}]: [{lo}, {hi}]")


@dataclass(frozen=True)
class ProjectionGeometry:
    source_to_detector: float = 2390.0
    source_to_isocenter: float = 1690.0
    detector_shape: tuple[int, int] = (768, 768)  # (rows, cols); rows run along z
    pixel_pitch: float = 0.388
    couch_roll_deg: float = 0.0
    step_mm: float = 1.0

    def __post_init__(self):
        if not 0 < self.source_to_isocenter < self.source_to_detector:
            raise ValueError("need 0 < source-to-isocenter < source-to-detector")
        if self.pixel_pitch <= 0 or self.step_mm <= 0:
            raise ValueError("pixel pitch and ray step must be positive")
        if not -20.0 <= self.couch_roll_deg <= 20.0:
            raise ValueError(f"couch roll {self.couch_roll_deg} deg outside [-20, 20]")

    def binned(self, factor: int) -> "ProjectionGeometry":
        """Coarser detector covering the same field (``factor`` x ``factor`` pixel binning)."""
        rows, cols = self.detector_shape
        if rows % factor or cols % factor:
            raise ValueError(f"detector {rows}x{cols} not divisible by {factor}")
        return replace(self, detector_shape=(rows // factor, cols // factor), pixel_pitch=self.pixel_pitch * factor)

    @property
    def source(self) -> np.ndarray:
        return np.array([0.0, -self.source_to_isocenter, 0.0])

    def pixel_centres(self) -> np.ndarray:
        """World coordinates of detector pixel centres, shape (rows, cols, 3)."""
        rows, cols = self.detector_shape
        u = (np.arange(cols) - (cols - 1) / 2.0) * self.pixel_pitch
        v = (np.arange(rows) - (rows - 1) / 2.0) * self.pixel_pitch
        vv, uu = np.meshgrid(v, u, indexing="ij")
        y = np.full_like(uu, self.source_to_detector - self.source_to_isocenter)
        return np.stack([uu, y, vv], axis=-1)


# ---------------------------------------------------------------- projection

def hu_to_attenuation(volume: CtVolume | np.ndarray, mu_water: float = 0.02) -> np.ndarray:
    """Linear attenuation (per mm) from HU: mu_water * (1 + HU / 1000), clamped at zero."""
    if mu_water <= 0:
        raise ValueError("mu_water must be positive")
    hu = volume.values if isinstance(volume, CtVolume) else np.asarray(volume)
    return np.maximum(mu_water * (1.0 + hu.astype(np.float64) / 1000.0), 0.0)


def _rotation_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ray_box(src: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab-method entry/exit distances of rays ``src + t * dirs`` through an axis-aligned box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - src) * inv
        t2 = (hi - src) * inv
    tmin = np.where(np.isfinite(t1), np.minimum(t1, t2), -np.inf)
    tmax = np.where(np.isfinite(t2), np.maximum(t1, t2), np.inf)
    # rays parallel to a slab: inside if the source coordinate lies within it
    parallel = dirs == 0
    inside = (src >= lo) & (src <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def project_attenuation(
    mu: np.ndarray,
    spacing,
    origin,
    geometry: ProjectionGeometry,
    chunk: int = 4096,
) -> np.ndarray:
    """Raw ray sums q = sum_k dL * mu(p_k) over samples spaced dL along each source-pixel ray.

    Samples sit at the midpoints of dL segments from the ray's entry into the
    volume box; ``mu`` is sampled trilinearly, zero outside the grid.
    """
    mu = np.asarray(mu, dtype=np.float64)
    spacing = np.asarray(spacing, float)
    origin = np.asarray(origin, float)
    src = geometry.source
    lo = origin - spacing / 2
    hi = lo + spacing * np.asarray(mu.shape)
    rot = _rotation_z(geometry.couch_roll_deg) if geometry.couch_roll_deg != 0.0 else None
    if rot is not None:
        # sample the rotated volume: world point p maps to R^T p in volume coordinates
        src_v = rot.T @ src
    else:
        src_v = src
    if np.all(src_v >= lo) and np.all(src_v <= hi):
        raise ValueError("degenerate geometry: X-ray source lies inside the CT volume")

    pix = geometry.pixel_centres().reshape(-1, 3)
    if rot is not None:
        pix = pix @ rot  # row-vector form of R^T p
    dirs = pix - src_v
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # trilinear falloff reaches half a voxel beyond the outer faces
    t_in, t_out = _ray_box(src_v, dirs, lo - spacing / 2, hi + spacing / 2)
    dl = geometry.step_mm
    out = np.zeros(len(dirs))
    hit = np.nonzero(t_out > t_in)[0]
    for start in range(0, len(hit), chunk):
        idx = hit[start : start + chunk]
        t0, t1 = t_in[idx], t_out[idx]
        nsteps = np.ceil((t1 - t0) / dl).astype(np.int64)
        kmax = int(nsteps.max())
        k = np.arange(kmax)
        t = t0[:, None] + (k[None, :] + 0.5) * dl  # (rays, kmax)
        valid = k[None, :] < nsteps[:, None]
        pts = src_v[None, None, :] + t[..., None] * dirs[idx][:, None, :]
        coords = ((pts - origin) / spacing).reshape(-1, 3).T
        vals = ndimage.map_coordinates(mu, coords, order=1, mode="grid-constant", cval=0.0, prefilter=False)
        vals = vals.reshape(t.shape) * valid
        out[idx] = dl * vals.sum(axis=1)
    return out.reshape(geometry.detector_shape)


def project_drr(volume: CtVolume, geometry: ProjectionGeometry, mu_water: float = 0.02, q_max: float | None = None):
    """Raw DRR ray sums and the [0, 1] image normalized by ``q_max`` (defaults to the image maximum)."""
    raw = project_attenuation(hu_to_attenuation(volume, mu_water), volume.spacing, volume.origin, geometry)
    peak = float(raw.max()) if q_max is None else float(q_max)
    norm = np.clip(raw / peak, 0.0, 1.0) if peak > 0 else np.zeros_like(raw)
    return raw, norm


def extend_slices(volume: CtVolume, before: int, after: int) -> CtVolume:
    """Edge-replicate ``before``/``after`` slices along z (covers short scans)."""
    vals = np.pad(volume.values, ((0, 0), (0, 0), (before, after)), mode="edge")
    origin = list(volume.origin)
    origin[2] -= before * volume.spacing[2]
    return CtVolume(vals, volume.spacing, tuple(origin))


# ---------------------------------------------------------------- phantom

@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    hu: float


@dataclass(frozen=True)
class RibSpec:
    period: float = 24.0  # mm between rib centres along z
    thickness: float = 8.0  # mm, in-plane and along z
    inset: float = 12.0  # mm inside the body surface
    hu: float = 700.0


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    hu: float


@dataclass(frozen=True)
class PhantomSpec:
    body: Ellipsoid = Ellipsoid((0.0, 0.0, 0.0), (160.0, 110.0, 400.0), 40.0)
    lungs: tuple[Ellipsoid, ...] = (
        Ellipsoid((-70.0, -5.0, 10.0), (55.0, 70.0, 110.0), -800.0),
        Ellipsoid((70.0, -5.0, 10.0), (55.0, 70.0, 110.0), -800.0),
    )
    ribs: RibSpec | None = RibSpec()
    tumor: Sphere | None = Sphere((-60.0, 0.0, 20.0), 15.0, 40.0)
    marker: Sphere | None = None
    seed: int = 0

    @classmethod
    def random(cls, seed: int, marker: bool = False) -> "PhantomSpec":
        """Anatomical variation drawn deterministically from ``seed``."""
        rng = np.random.default_rng(seed)
        bx, by = rng.uniform(140, 170), rng.uniform(95, 120)
        body = Ellipsoid((0.0, 0.0, 0.0), (bx, by, 400.0), float(rng.uniform(20, 60)))
        lungs = []
        for side in (-1, 1):
            lungs.append(
                Ellipsoid(
                    (side * rng.uniform(55, 75), rng.uniform(-10, 5), rng.uniform(-10, 30)),
                    (rng.uniform(42, 58), rng.uniform(55, by - 25), rng.uniform(90, 130)),
                    float(rng.uniform(-850, -700)),
                )
            )
        lung = lungs[int(rng.integers(2))]
        r = float(rng.uniform(8, 20))
        tumor_c = tuple(float(c + rng.uniform(-0.4, 0.4) * (rr - r)) for c, rr in zip(lung.center, lung.radii))
        ribs = RibSpec(period=float(rng.uniform(20, 28)), thickness=float(rng.uniform(6, 10)), hu=float(rng.uniform(500, 900)))
        mk = None
        if marker:
            mk = Sphere(tuple(float(c + rng.uniform(-5, 5)) for c in tumor_c), 1.0, 3000.0)
        return cls(body, tuple(lungs), ribs, Sphere(tumor_c, r, float(rng.uniform(20, 60))), mk, seed)


def _grid(extents, spacing, origin):
    axes = [o + s * np.arange(n) for n, s, o in zip(extents, spacing, origin)]
    return np.meshgrid(*axes, indexing="ij")


def _inside_ellipsoid(x, y, z, e: Ellipsoid) -> np.ndarray:
    cx, cy, cz = e.center
    rx, ry, rz = e.radii
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


def make_phantom(spec: PhantomSpec, extents=(96, 72, 96), spacing=(4.0, 4.0, 4.0), origin=None) -> CtVolume:
    """Voxelize ``spec``; priority marker > rib > tumor > lung > body > air."""
    vol = CtVolume(np.zeros(extents, np.int16), spacing, origin)
    x, y, z = _grid(extents, spacing, vol.origin)
    lo, hi = vol.bounds()

    def check_fits(center, radii, what):
        c, r = np.asarray(center), np.asarray(radii)
        if np.any(c - r < lo - 1e-9) or np.any(c + r > hi + 1e-9):
            # the body may be longer than the scan along z; only x/y must fit
            if what != "body" or np.any(c[:2] - r[:2] < lo[:2]) or np.any(c[:2] + r[:2] > hi[:2]):
                raise ValueError(f"{what} does not fit inside the volume")

    check_fits(spec.body.center, spec.body.radii, "body")
    body = _inside_ellipsoid(x, y, z, spec.body)
    hu = np.full(extents, AIR_HU, dtype=np.float64)
    hu[body] = spec.body.hu
    for i, lung in enumerate(spec.lungs):
        check_fits(lung.center, lung.radii, f"lung {i}")
        inside = _inside_ellipsoid(x, y, z, lung)
        if np.any(inside & ~body):
            raise ValueError(f"lung {i} extends outside the body")
        hu[inside] = lung.hu
    if spec.tumor is not None:
        t = spec.tumor
        check_fits(t.center, (t.radius,) * 3, "tumor")
        hu[(x - t.center[0]) ** 2 + (y - t.center[1]) ** 2 + (z - t.center[2]) ** 2 <= t.radius**2] = t.hu
    if spec.ribs is not None:
        r = spec.ribs
        bx, by, _ = spec.body.radii
        cx, cy, _ = spec.body.center
        # normalized elliptical radius; a rib is a shell band at fixed depth below the surface
        rho = np.sqrt(((x - cx) / bx) ** 2 + ((y - cy) / by) ** 2)
        depth = (1.0 - rho) * min(bx, by)
        shell = np.abs(depth - r.inset) <= r.thickness / 2
        phase = np.mod(z - spec.body.center[2], r.period)
        band = np.minimum(phase, r.period - phase) <= r.thickness / 2
        posterior_arc = y > cy - 0.6 * by  # ribs wrap the back and sides, open anteriorly
        hu[shell & band & posterior_arc & body] = r.hu
    if spec.marker is not None:
        m = spec.marker
        check_fits(m.center, (m.radius,) * 3, "marker")
        d2 = (x - m.center[0]) ** 2 + (y - m.center[1]) ** 2 + (z - m.center[2]) ** 2
        mask = d2 <= m.radius**2
        if not mask.any():
            # sub-voxel marker: mark the nearest voxel
            mask.flat[int(np.argmin(d2))] = True
        hu[mask] = m.hu
    vol.values = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return vol


# ---------------------------------------------------------------- FPD simulation

@dataclass(frozen=True)
class FpdSimSpec:
    gamma: float = 1.0
    noise_sigma: float = 0.0
    photon_scale: float = 0.0  # Poisson-equivalent counts at unit intensity; 0 disables
    scatter_fraction: float = 0.0
    scatter_sigma_px: float = 0.0
    port_edge: bool = False
    call_cable: bool = False
    shift_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.photon_scale < 0 or self.scatter_fraction < 0:
            raise ValueError("noise, photon scale and scatter must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if any(abs(s) > 10.0 for s in self.shift_mm):
            raise ValueError("interfractional shift limited to +/-10 mm per axis")

    @classmethod
    def realistic(cls, seed: int = 0, shift_mm=(0.0, 0.0, 0.0)) -> "FpdSimSpec":
        return cls(
            gamma=0.55,
            noise_sigma=0.02,
            photon_scale=3000.0,
            scatter_fraction=0.25,
            scatter_sigma_px=6.0,
            port_edge=True,
            call_cable=True,
            shift_mm=tuple(shift_mm),
            seed=seed,
        )


def overlay_mask(shape, spec: FpdSimSpec) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (port edge band, call cable) for an image of ``shape``."""
    rows, cols = shape
    rng = np.random.default_rng([spec.seed, 7])
    port = np.zeros(shape, bool)
    cable = np.zeros(shape, bool)
    if spec.port_edge:
        width = max(1, cols // 24)
        start = int(rng.integers(0, max(1, cols // 6)))
        port[:, start : start + width] = True
    if spec.call_cable:
        rr = np.arange(rows)
        centre = cols * rng.uniform(0.55, 0.85)
        amp = cols * rng.uniform(0.04, 0.1)
        freq = rng.uniform(0.5, 1.5) * 2 * np.pi / rows
        path = centre + amp * np.sin(freq * rr + rng.uniform(0, 2 * np.pi))
        half = max(0.5, cols / 256)
        cc = np.arange(cols)[None, :]
        cable = np.abs(cc - path[:, None]) <= half
    return port, cable


def simulate_fpd(drr: np.ndarray, spec: FpdSimSpec) -> np.ndarray:
    """Degrade a normalized DRR into an FPD-like image.

    gamma -> scatter blur addition -> Poisson-equivalent and Gaussian noise
    -> overlays (port edge band, call cable) -> clamp to [0, 1].
    """
    img = np.asarray(drr, dtype=np.float64)
    out = img ** spec.gamma if spec.gamma != 1.0 else img.copy()
    if spec.scatter_fraction > 0 and spec.scatter_sigma_px > 0:
        out = out + spec.scatter_fraction * ndimage.gaussian_filter(out, spec.scatter_sigma_px, mode="nearest")
        out = out / (1.0 + spec.scatter_fraction)
    rng = np.random.default_rng([spec.seed, 3])
    if spec.photon_scale > 0:
        out = rng.poisson(np.clip(out, 0, None) * spec.photon_scale) / spec.photon_scale
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    if spec.port_edge or spec.call_cable:
        port, cable = overlay_mask(out.shape, spec)
        out = np.where(port, out * 0.5, out)
        out = np.where(cable, out * 0.35, out)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- file formats

VOLUME_MAGIC = b"FSVL"


def write_volume(path, volume: CtVolume) -> None:
    volume.validate_hu()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<3I", *volume.extents))
        fh.write(struct.pack("<3f", *volume.spacing))
        fh.write(struct.pack("<3f", *volume.origin))
        # payload in C order of values[ix, iy, iz]
        fh.write(np.ascontiguousarray(volume.values, dtype="<i2").tobytes())


def read_volume(path) -> CtVolume:
    data = Path(path).read_bytes()
    if data[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not an .fsvol file")
    ext = struct.unpack("<3I", data[4:16])
    spacing = struct.unpack("<3f", data[16:28])
    origin = struct.unpack("<3f", data[28:40])
    n = int(np.prod(ext))
    payload = data[40:]
    if len(payload) != 2 * n:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {2 * n}")
    vals = np.frombuffer(payload, dtype="<i2").reshape(ext).astype(np.int16)
    return CtVolume(vals, tuple(float(s) for s in spacing), tuple(float(o) for o in origin))


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM with value round(65535 * clip(image, 0, 1))."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    q = np.rint(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8- or 16-bit) as float64 in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    count = rows * cols
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return arr.reshape(rows, cols).astype(np.float64) / maxval
