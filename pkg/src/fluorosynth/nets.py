"""Generator, PatchGAN discriminator, VGG19-style feature extractor and U-Net.

Networks are plain forward functions over a ``{name: Tensor}`` parameter
mapping; ``init_*`` functions build the matching ``{name: ndarray}`` dicts.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

Params = Mapping[str, np.ndarray]


def _as_tensors(params) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def config_digest(*configs) -> str:
    payload = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class GeneratorConfig:
    encoder_channels: tuple[int, ...] = (64, 128, 128, 256)
    encoder_kernels: tuple[int, ...] = (4, 3, 3, 3)
    encoder_strides: tuple[int, ...] = (1, 2, 1, 2)
    initial_pad: tuple[int, int, int, int] = (1, 2, 1, 2)
    residual_blocks: int = 9
    residual_channels: int = 256
    decoder_channels: tuple[int, ...] = (128, 64)
    decoder_kernel: int = 3
    final_kernel: int = 7
    input_channels: int = 1
    output_channels: int = 1
    norm_eps: float = 1e-5

    def __post_init__(self):
        n = len(self.encoder_channels)
        if len(self.encoder_kernels) != n or len(self.encoder_strides) != n:
            raise ValueError("encoder channels/kernels/strides must have equal length")
        if self.residual_channels != self.encoder_channels[-1]:
            raise ValueError("residual_channels must equal the last encoder channel count")
        down = int(np.prod(self.encoder_strides))
        if down != 2 ** len(self.decoder_channels):
            raise ValueError(f"encoder downsampling x{down} does not match {len(self.decoder_channels)} x2 decoders")

    @property
    def base_channels(self) -> int:
        return self.encoder_channels[0]

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.encoder_strides))

    @classmethod
    def scaled(cls, divisor: int, residual_blocks: int = 9) -> "GeneratorConfig":
        """Same topology with every channel count divided by ``divisor`` (desk-scale runs)."""
        enc = tuple(max(1, c // divisor) for c in cls.encoder_channels)
        return cls(
            encoder_channels=enc,
            residual_channels=enc[-1],
            decoder_channels=tuple(max(1, c // divisor) for c in cls.decoder_channels),
            residual_blocks=residual_blocks,
        )


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    kernels: tuple[int, ...] = (4, 4, 4, 4)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    final_kernel: int = 4
    leaky_slope: float = 0.2
    input_channels: int = 1
    norm_eps: float = 1e-5

    def __post_init__(self):
        if not (len(self.channels) == len(self.kernels) == len(self.strides)):
            raise ValueError("discriminator channels/kernels/strides must have equal length")

    @classmethod
    def scaled(cls, divisor: int) -> "DiscriminatorConfig":
        return cls(channels=tuple(max(1, c // divisor) for c in cls.channels))


# Keras VGG19 layer numbering: 0 is the input layer, convs and pools count from 1.
VGG19_LAYERS: tuple[tuple[str, int], ...] = (
    ("block1_conv1", 64), ("block1_conv2", 64), ("block1_pool", 0),
    ("block2_conv1", 128), ("block2_conv2", 128), ("block2_pool", 0),
    ("block3_conv1", 256), ("block3_conv2", 256), ("block3_conv3", 256), ("block3_conv4", 256), ("block3_pool", 0),
    ("block4_conv1", 512), ("block4_conv2", 512), ("block4_conv3", 512), ("block4_conv4", 512), ("block4_pool", 0),
    ("block5_conv1", 512), ("block5_conv2", 512), ("block5_conv3", 512), ("block5_conv4", 512),
)  # fmt: skip

CAFFE_BGR_MEAN = (103.939, 116.779, 123.68)


@dataclass(frozen=True)
class FeatureExtractorSpec:
    tap_indices: tuple[int, ...] = (1, 2, 5, 10, 15, 20)
    width_divisor: int = 1
    weight_source: str = "random"  # "random" or a path to an FSTN archive
    seed: int = 0
    input_mode: str = "unit"  # "unit": [0, 1] replicated; "caffe": VGG BGR mean-subtracted 0..255

    def __post_init__(self):
        if len(self.tap_indices) != 6:
            raise ValueError("exactly six tap points are required")
        if max(self.tap_indices) > len(VGG19_LAYERS) or min(self.tap_indices) < 1:
            raise ValueError(f"tap indices must lie in 1..{len(VGG19_LAYERS)}")
        for i in self.tap_indices:
            if VGG19_LAYERS[i - 1][1] == 0:
                raise ValueError(f"tap {i} ({VGG19_LAYERS[i - 1][0]}) is a pooling layer, not a convolution")
        if self.input_mode not in ("unit", "caffe"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")

    @property
    def depth(self) -> int:
        return max(self.tap_indices)

    def layers(self) -> list[tuple[str, int]]:
        return [(name, max(1, c // self.width_divisor) if c else 0) for name, c in VGG19_LAYERS[: self.depth]]

    @property
    def min_size(self) -> int:
        pools = sum(1 for name, _ in VGG19_LAYERS[: self.depth - 1] if name.endswith("pool"))
        return 2 ** (pools + 1)


# ---------------------------------------------------------------- init

def init_generator(cfg: GeneratorConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Conv weights ~ N(0, 0.02), zero biases, unit gain / zero shift for instance norms."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k):
        p[f"{name}.w"] = _normal(rng, (cout, cin, k, k), 0.02, dtype)
        p[f"{name}.b"] = np.zeros(cout, dtype)

    def norm(name, c):
        p[f"{name}.gain"] = np.ones(c, dtype)
        p[f"{name}.shift"] = np.zeros(c, dtype)

    cin = cfg.input_channels
    for i, (c, k) in enumerate(zip(cfg.encoder_channels, cfg.encoder_kernels)):
        conv(f"enc{i}.conv", c, cin, k)
        norm(f"enc{i}.norm", c)
        cin = c
    for r in range(cfg.residual_blocks):
        conv(f"res{r}.conv1", cfg.residual_channels, cfg.residual_channels, 3)
        norm(f"res{r}.norm1", cfg.residual_channels)
        conv(f"res{r}.conv2", cfg.residual_channels, cfg.residual_channels, 3)
        norm(f"res{r}.norm2", cfg.residual_channels)
    for i, c in enumerate(cfg.decoder_channels):
        # transposed conv weights are (Cin, Cout, k, k)
        p[f"dec{i}.deconv.w"] = _normal(rng, (cin, c, cfg.decoder_kernel, cfg.decoder_kernel), 0.02, dtype)
        p[f"dec{i}.deconv.b"] = np.zeros(c, dtype)
        norm(f"dec{i}.norm", c)
        cin = c
    conv("out.conv", cfg.output_channels, cin, cfg.final_kernel)
    return p


def init_discriminator(cfg: DiscriminatorConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    cin = cfg.input_channels
    for i, (c, k) in enumerate(zip(cfg.channels, cfg.kernels)):
        p[f"grp{i}.conv.w"] = _normal(rng, (c, cin, k, k), 0.02, dtype)
        p[f"grp{i}.conv.b"] = np.zeros(c, dtype)
        if i > 0:
            p[f"grp{i}.norm.gain"] = np.ones(c, dtype)
            p[f"grp{i}.norm.shift"] = np.zeros(c, dtype)
        cin = c
    p["out.conv.w"] = _normal(rng, (1, cin, cfg.final_kernel, cfg.final_kernel), 0.02, dtype)
    p["out.conv.b"] = np.zeros(1, dtype)
    return p


def init_feature_extractor(spec: FeatureExtractorSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fixed-seed He-normal weights with small random biases, or weights from an archive."""
    names = [(n, c) for n, c in spec.layers() if c]
    if spec.weight_source != "random":
        arch = gc.read_archive(spec.weight_source)
        needed = [f"{n}.{s}" for n, _ in names for s in ("w", "b")]
        missing = [k for k in needed if k not in arch]
        if missing:
            raise KeyError(f"weight archive {spec.weight_source} lacks tensors: {', '.join(missing)}")
        return {k: arch[k].astype(dtype) for k in needed}
    rng = np.random.default_rng(spec.seed)
    p: dict[str, np.ndarray] = {}
    cin = 3
    for name, c in names:
        p[f"{name}.w"] = _normal(rng, (c, cin, 3, 3), np.sqrt(2.0 / (cin * 9)), dtype)
        p[f"{name}.b"] = _normal(rng, (c,), 0.05, dtype)
        cin = c
    return p


# ---------------------------------------------------------------- forward passes

def _conv_same(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    k = w.shape[2]
    ph = gc.same_padding(x.shape[2], k, stride)
    pw = gc.same_padding(x.shape[3], k, stride)
    return gc.conv2d(x, w, b, stride=stride, padding=(*ph, *pw))


def generator_forward(cfg: GeneratorConfig, params, x: Tensor, trace: list | None = None) -> Tensor:
    """RP -> [Conv+IN+ReLU] x 4 -> residual blocks -> [Deconv+IN+ReLU] x 2 -> RP+Conv+Sigmoid.

    Output has the input's spatial extent and lies in (0, 1). When ``trace``
    is a list, (stage, shape) tuples are appended for introspection.
    """
    p = _as_tensors(params)
    _, c, h, w = x.shape
    down = cfg.downsampling
    if c != cfg.input_channels:
        raise ValueError(f"generator expects {cfg.input_channels} input channel(s), got {c}")
    if h % down or w % down:
        raise ValueError(f"generator input {h}x{w} must be divisible by {down}")
    if min(h, w) < 4 * down:
        raise ValueError(f"generator input {h}x{w} too small (minimum {4 * down})")

    def note(stage, t):
        if trace is not None:
            trace.append((stage, t.shape))

    eps = cfg.norm_eps
    y = gc.reflection_pad(x, cfg.initial_pad)
    note("pad", y)
    for i, s in enumerate(cfg.encoder_strides):
        if i == 0:
            y = gc.conv2d(y, p["enc0.conv.w"], p["enc0.conv.b"], stride=s)
        else:
            y = _conv_same(y, p[f"enc{i}.conv.w"], p[f"enc{i}.conv.b"], s)
        y = gc.relu(gc.instance_norm(y, p[f"enc{i}.norm.gain"], p[f"enc{i}.norm.shift"], eps))
        note(f"enc{i}", y)
    for r in range(cfg.residual_blocks):
        skip = y
        z = gc.conv2d(gc.reflection_pad(y, 1), p[f"res{r}.conv1.w"], p[f"res{r}.conv1.b"])
        z = gc.relu(gc.instance_norm(z, p[f"res{r}.norm1.gain"], p[f"res{r}.norm1.shift"], eps))
        z = gc.conv2d(z, p[f"res{r}.conv2.w"], p[f"res{r}.conv2.b"], padding=1)
        z = gc.instance_norm(z, p[f"res{r}.norm2.gain"], p[f"res{r}.norm2.shift"], eps)
        y = gc.add(skip, z)
        note(f"res{r}", y)
    k = cfg.decoder_kernel
    for i in range(len(cfg.decoder_channels)):
        y = gc.conv2d_transpose(
            y, p[f"dec{i}.deconv.w"], p[f"dec{i}.deconv.b"], stride=2, padding=(k - 1) // 2, output_padding=1
        )
        y = gc.relu(gc.instance_norm(y, p[f"dec{i}.norm.gain"], p[f"dec{i}.norm.shift"], eps))
        note(f"dec{i}", y)
    half = cfg.final_kernel // 2
    y = gc.conv2d(gc.reflection_pad(y, half), p["out.conv.w"], p["out.conv.b"])
    y = gc.sigmoid(y)
    note("out", y)
    return y


def discriminator_forward(cfg: DiscriminatorConfig, params, x: Tensor, trace: list | None = None) -> Tensor:
    """PatchGAN: Conv(+IN)+LeakyReLU groups, then a 1-channel conv. Returns raw logits."""
    p = _as_tensors(params)
    if min(x.shape[2], x.shape[3]) < 16:
        raise ValueError(f"discriminator input {x.shape[2]}x{x.shape[3]} smaller than 16x16")
    y = x
    for i, s in enumerate(cfg.strides):
        y = _conv_same(y, p[f"grp{i}.conv.w"], p[f"grp{i}.conv.b"], s)
        if i > 0:
            y = gc.instance_norm(y, p[f"grp{i}.norm.gain"], p[f"grp{i}.norm.shift"], cfg.norm_eps)
        y = gc.leaky_relu(y, cfg.leaky_slope)
        if trace is not None:
            trace.append((f"grp{i}", y.shape))
    y = _conv_same(y, p["out.conv.w"], p["out.conv.b"], 1)
    if trace is not None:
        trace.append(("out", y.shape))
    return y


def discriminator_output_size(cfg: DiscriminatorConfig, size: int) -> int:
    for s in cfg.strides:
        size = -(-size // s)
    return size


def _extractor_input(spec: FeatureExtractorSpec, x: Tensor) -> Tensor:
    if x.shape[1] == 1:
        x = gc.concat([x, x, x], axis=1)
    if spec.input_mode == "caffe":
        n, _, h, w = x.shape
        mean = np.broadcast_to(np.asarray(CAFFE_BGR_MEAN, x.dtype).reshape(1, 3, 1, 1), (n, 3, h, w))
        x = gc.sub(gc.scale(x, 255.0), Tensor(np.ascontiguousarray(mean)))
    return x


def feature_extract(spec: FeatureExtractorSpec, weights, image: Tensor) -> list[Tensor]:
    """Feature maps at ``spec.tap_indices`` (VGG19 layer numbering, ReLU applied)."""
    if min(image.shape[2], image.shape[3]) < spec.min_size:
        raise ValueError(f"extractor needs images of at least {spec.min_size}x{spec.min_size}")
    p = _as_tensors(weights)
    taps = set(spec.tap_indices)
    out: list[Tensor] = []
    y = _extractor_input(spec, image)
    for idx, (name, c) in enumerate(spec.layers(), start=1):
        if c == 0:
            y = gc.max_pool2d(y, 2)
        else:
            y = gc.relu(gc.conv2d(y, p[f"{name}.w"], p[f"{name}.b"], padding=1))
        if idx in taps:
            out.append(y)
    return out


class FeatureExtractor:
    """Bundles an extractor spec with its (frozen) weights."""

    def __init__(self, spec: FeatureExtractorSpec | None = None, weights: Params | None = None):
        self.spec = spec or FeatureExtractorSpec()
        self.weights = {k: Tensor(v) for k, v in (weights or init_feature_extractor(self.spec)).items()}

    def __call__(self, image: Tensor) -> list[Tensor]:
        return feature_extract(self.spec, self.weights, image)

    def embed(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Global-average-pooled taps, concatenated: (N, H, W) or (N, 1, H, W) -> (N, D)."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[:, None]
        rows = []
        for i in range(0, len(images), batch_size):
            taps = self(Tensor(images[i : i + batch_size]))
            rows.append(np.concatenate([t.data.mean(axis=(2, 3)) for t in taps], axis=1))
        return np.concatenate(rows, axis=0).astype(np.float64)


# ---------------------------------------------------------------- U-Net baseline

@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    depth: int = 4
    input_channels: int = 1
    norm_eps: float = 1e-5

    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth + 1)]


def init_unet(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    ch = cfg.channels()

    def double(name, cin, cout):
        for j, ci in enumerate((cin, cout)):
            p[f"{name}.conv{j}.w"] = _normal(rng, (cout, ci, 3, 3), 0.02, dtype)
            p[f"{name}.conv{j}.b"] = np.zeros(cout, dtype)
            p[f"{name}.norm{j}.gain"] = np.ones(cout, dtype)
            p[f"{name}.norm{j}.shift"] = np.zeros(cout, dtype)

    cin = cfg.input_channels
    for i in range(cfg.depth):
        double(f"down{i}", cin, ch[i])
        cin = ch[i]
    double("bottom", ch[cfg.depth - 1], ch[cfg.depth])
    for i in reversed(range(cfg.depth)):
        p[f"up{i}.deconv.w"] = _normal(rng, (ch[i + 1], ch[i], 2, 2), 0.02, dtype)
        p[f"up{i}.deconv.b"] = np.zeros(ch[i], dtype)
        double(f"up{i}", 2 * ch[i], ch[i])
    p["out.conv.w"] = _normal(rng, (1, ch[0], 1, 1), 0.02, dtype)
    p["out.conv.b"] = np.zeros(1, dtype)
    return p


def unet_forward(cfg: UNetConfig, params, x: Tensor) -> Tensor:
    """Encoder-decoder with skip concatenations and a sigmoid output."""
    p = _as_tensors(params)
    h, w = x.shape[2:]
    m = 2**cfg.depth
    if h % m or w % m:
        raise ValueError(f"U-Net input {h}x{w} must be divisible by {m}")

    def double(name, y):
        for j in range(2):
            y = gc.conv2d(y, p[f"{name}.conv{j}.w"], p[f"{name}.conv{j}.b"], padding=1)
            y = gc.relu(gc.instance_norm(y, p[f"{name}.norm{j}.gain"], p[f"{name}.norm{j}.shift"], cfg.norm_eps))
        return y

    skips = []
    y = x
    for i in range(cfg.depth):
        y = double(f"down{i}", y)
        skips.append(y)
        y = gc.max_pool2d(y, 2)
    y = double("bottom", y)
    for i in reversed(range(cfg.depth)):
        y = gc.conv2d_transpose(y, p[f"up{i}.deconv.w"], p[f"up{i}.deconv.b"], stride=2)
        y = double(f"up{i}", gc.concat([skips[i], y], axis=1))
    return gc.sigmoid(gc.conv2d(y, p["out.conv.w"], p["out.conv.b"]))


def count_parameters(params: Params) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


# ---------------------------------------------------------------- bundle

@dataclass
class ModelBundle:
    """Both generators, both discriminators and their optimizer states."""

    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    g_drr2fpd: dict[str, np.ndarray]
    g_fpd2drr: dict[str, np.ndarray]
    d_fpd: dict[str, np.ndarray]
    d_drr: dict[str, np.ndarray]
    opt_g: gc.AdamaxState = field(default_factory=gc.AdamaxState)
    opt_d_fpd: gc.AdamaxState = field(default_factory=gc.AdamaxState)
    opt_d_drr: gc.AdamaxState = field(default_factory=gc.AdamaxState)
    epoch: int = 0
    step: int = 0

    @classmethod
    def initialize(
        cls,
        gen_cfg: GeneratorConfig | None = None,
        disc_cfg: DiscriminatorConfig | None = None,
        seed: int = 0,
        optimizer: Mapping[str, float] | None = None,
    ) -> "ModelBundle":
        gen_cfg = gen_cfg or GeneratorConfig()
        disc_cfg = disc_cfg or DiscriminatorConfig()
        seeds = np.random.SeedSequence(seed).generate_state(4)
        hp = dict(optimizer or {})
        return cls(
            gen_cfg,
            disc_cfg,
            init_generator(gen_cfg, int(seeds[0])),
            init_generator(gen_cfg, int(seeds[1])),
            init_discriminator(disc_cfg, int(seeds[2])),
            init_discriminator(disc_cfg, int(seeds[3])),
            gc.AdamaxState(**hp),
            gc.AdamaxState(**hp),
            gc.AdamaxState(**hp),
        )

    @property
    def digest(self) -> str:
        return config_digest(self.gen_cfg, self.disc_cfg)

    def generator_params(self) -> dict[str, np.ndarray]:
        """Joint parameter namespace of both generators (they share one optimizer)."""
        out = {f"g_drr2fpd/{k}": v for k, v in self.g_drr2fpd.items()}
        out.update({f"g_fpd2drr/{k}": v for k, v in self.g_fpd2drr.items()})
        return out

    def set_generator_params(self, joint: Mapping[str, np.ndarray]) -> None:
        self.g_drr2fpd = {k.split("/", 1)[1]: v for k, v in joint.items() if k.startswith("g_drr2fpd/")}
        self.g_fpd2drr = {k.split("/", 1)[1]: v for k, v in joint.items() if k.startswith("g_fpd2drr/")}

    def translate(self, drr: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """DRR -> synthetic FPD, (N, H, W) in and out, no gradient tracking."""
        return run_generator(self.gen_cfg, self.g_drr2fpd, drr, batch_size)


def run_generator(cfg: GeneratorConfig, params: Params, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    squeeze = images.ndim == 2
    if squeeze:
        images = images[None]
    wrapped = _as_tensors(params)
    outs = [
        generator_forward(cfg, wrapped, Tensor(images[i : i + batch_size, None])).data[:, 0]
        for i in range(0, len(images), batch_size)
    ]
    out = np.concatenate(outs, axis=0)
    return out[0] if squeeze else out


def run_unet(cfg: UNetConfig, params: Params, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    squeeze = images.ndim == 2
    x = images[None, None] if squeeze else images[:, None]
    out = unet_forward(cfg, _as_tensors(params), Tensor(x)).data[:, 0]
    return out[0] if squeeze else out
