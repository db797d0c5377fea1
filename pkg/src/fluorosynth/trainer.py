"""CycleGAN objective, Adamax training schedule and checkpointing."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .datapipe import AugmentSpec, PatchDataset
from .gradcore import Tape, Tensor
from .nets import (
    DiscriminatorConfig,
    FeatureExtractor,
    GeneratorConfig,
    ModelBundle,
    UNetConfig,
    config_digest,
    discriminator_forward,
    generator_forward,
    init_unet,
    unet_forward,
)

log = logging.getLogger(__name__)

ADV_MODES = ("non_saturating", "literal")


class NumericalError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""

    def __init__(self, message: str, diagnostics: Mapping[str, float]):
        super().__init__(f"{message}: {dict(diagnostics)}")
        self.diagnostics = dict(diagnostics)


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cycle: float = 5.0
    identity: float = 5.0
    style: float = 2e-5

    def __post_init__(self):
        if min(self.cycle, self.identity, self.style) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 550
    batch_size: int = 16
    lr: float = 2e-4
    lr_drop_epoch: int = 500
    lr_drop_factor: float = 0.1
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-7
    adversarial_mode: str = "non_saturating"
    seed: int = 0
    checkpoint_every: int = 50
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_drop_epoch > self.epochs:
            raise ValueError(f"lr_drop_epoch {self.lr_drop_epoch} exceeds epochs {self.epochs}")
        if self.adversarial_mode not in ADV_MODES:
            raise ValueError(f"adversarial_mode must be one of {ADV_MODES}")

    @classmethod
    def toy(cls, epochs: int = 22, **overrides) -> "TrainConfig":
        """Desk-scale schedule: the lr drop keeps its 500/550 position in the run."""
        drop = int(round(epochs * 500 / 550))
        base = dict(
            epochs=epochs,
            batch_size=4,
            lr_drop_epoch=drop,
            checkpoint_every=max(1, epochs // 4),
            augment=AugmentSpec(crop=48, max_shift=4),
        )
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; dropped once ``lr_drop_epoch`` epochs are done."""
        return self.lr * self.lr_drop_factor if epoch >= self.lr_drop_epoch else self.lr

    def optimizer(self) -> dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


LOSS_FIELDS = ("adv_G", "adv_D_FPD", "adv_D_DRR", "cycle", "identity", "style", "total_G", "total_D")


@dataclass
class LossBreakdown:
    adv_G: float
    adv_D_FPD: float
    adv_D_DRR: float
    cycle: float
    identity: float
    style: float
    total_G: float
    total_D: float
    step: int = 0
    epoch: int = 0

    def row(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, **{k: getattr(self, k) for k in LOSS_FIELDS}}


# ---------------------------------------------------------------- losses

def adversarial_loss(d_real_logits: Tensor | None, d_fake_logits: Tensor, side: str, mode: str = "non_saturating") -> Tensor:
    """Patch-mean logistic GAN loss.

    Discriminator side: ``-[log s(real) + log(1 - s(fake))]`` (minimized).
    Generator side: ``log(1 - s(fake))`` in literal mode, ``-log s(fake)``
    in non-saturating mode.
    """
    if side == "discriminator":
        if d_real_logits is None:
            raise ValueError("discriminator loss needs real logits")
        return gc.add(gc.mean(gc.softplus(gc.scale(d_real_logits, -1.0))), gc.mean(gc.softplus(d_fake_logits)))
    if side != "generator":
        raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")
    if mode == "literal":
        return gc.scale(gc.mean(gc.softplus(d_fake_logits)), -1.0)
    if mode == "non_saturating":
        return gc.mean(gc.softplus(gc.scale(d_fake_logits, -1.0)))
    raise ValueError(f"unknown adversarial mode {mode!r}")


Translator = Callable[[Tensor], Tensor]


def cycle_loss(g_drr2fpd: Translator, g_fpd2drr: Translator, drr: Tensor, fpd: Tensor, fake_fpd=None, fake_drr=None) -> Tensor:
    """L1(G_d2f(G_f2d(fpd)), fpd) + L1(G_f2d(G_d2f(drr)), drr)."""
    fake_fpd = g_drr2fpd(drr) if fake_fpd is None else fake_fpd
    fake_drr = g_fpd2drr(fpd) if fake_drr is None else fake_drr
    return gc.add(
        gc.reduce_loss(g_drr2fpd(fake_drr), fpd, "l1_mean"),
        gc.reduce_loss(g_fpd2drr(fake_fpd), drr, "l1_mean"),
    )


def identity_loss(g_drr2fpd: Translator, g_fpd2drr: Translator, drr: Tensor, fpd: Tensor) -> Tensor:
    """Each generator fed an image already in its output domain should return it unchanged."""
    return gc.add(
        gc.reduce_loss(g_drr2fpd(fpd), fpd, "l1_mean"),
        gc.reduce_loss(g_fpd2drr(drr), drr, "l1_mean"),
    )


def style_loss(extractor: Callable[[Tensor], list[Tensor]], synthetic_fpd, real_fpd, synthetic_drr, real_drr) -> Tensor:
    """Sum over extractor taps of MSE between Gram matrices, both translation directions."""
    terms = []
    for synthetic, real in ((synthetic_fpd, real_fpd), (synthetic_drr, real_drr)):
        real_taps = extractor(Tensor(real.data) if isinstance(real, Tensor) else Tensor(real))
        for fs, fr in zip(extractor(synthetic), real_taps):
            terms.append(gc.reduce_loss(gc.gram_matrix(fs), Tensor(gc.gram_matrix(fr).data), "mse"))
    return linear_combination(terms, [1.0] * len(terms))


def linear_combination(terms: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """Scalar sum of ``coeffs[i] * terms[i]``, accumulated in float64."""
    dtype = terms[0].dtype
    value = np.float64(0.0)
    for t, c in zip(terms, coeffs):
        value += np.float64(c) * np.float64(t.data)
    coeffs = tuple(float(c) for c in coeffs)
    return gc.tensor.make_result(
        np.asarray(value, dtype=dtype),
        tuple(terms),
        lambda g: tuple(np.asarray(g * c, dtype=dtype) for c in coeffs),
    )


# ---------------------------------------------------------------- training step

def _split(joint: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix) :]: v for k, v in joint.items() if k.startswith(prefix)}


def _finite(arrays: Mapping[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays.values())


def train_step(
    bundle: ModelBundle,
    drr: np.ndarray,
    fpd: np.ndarray,
    weights: LossWeights,
    cfg: TrainConfig,
    extractor: FeatureExtractor,
    lr: float | None = None,
) -> LossBreakdown:
    """One discriminator update each (D_FPD, then D_DRR) followed by one joint generator update.

    ``drr``/``fpd`` are (B, 1, H, W) batches in [0, 1]. Nothing in ``bundle``
    changes if any loss or gradient is non-finite.
    """
    drr_t, fpd_t = Tensor(np.asarray(drr, np.float32)), Tensor(np.asarray(fpd, np.float32))
    gcfg, dcfg, mode = bundle.gen_cfg, bundle.disc_cfg, cfg.adversarial_mode
    gparams = gc.parameters(bundle.generator_params())
    ga, gb = _split(gparams, "g_drr2fpd/"), _split(gparams, "g_fpd2drr/")

    def g_d2f(x):
        return generator_forward(gcfg, ga, x)

    def g_f2d(x):
        return generator_forward(gcfg, gb, x)

    diag: dict[str, float] = {}
    with Tape() as gtape:
        fake_fpd = g_d2f(drr_t)
        fake_drr = g_f2d(fpd_t)

        # discriminator updates; fakes enter as constants so no gradient reaches the generators
        updated = {}
        for side, params, state, real, fake in (
            ("FPD", bundle.d_fpd, bundle.opt_d_fpd, fpd_t, fake_fpd),
            ("DRR", bundle.d_drr, bundle.opt_d_drr, drr_t, fake_drr),
        ):
            dp = gc.parameters(params)
            with Tape() as dtape:
                d_loss = adversarial_loss(
                    discriminator_forward(dcfg, dp, real),
                    discriminator_forward(dcfg, dp, Tensor(fake.data)),
                    "discriminator",
                )
            dgrads = dtape.gradient(d_loss, dp)
            diag[f"adv_D_{side}"] = float(d_loss.data)
            if not np.isfinite(d_loss.data) or not _finite(dgrads):
                raise NumericalError(f"non-finite discriminator ({side}) loss or gradient", diag)
            updated[side] = gc.adamax_step(params, dgrads, state, lr=lr)

        # generator objective against the updated, frozen discriminators
        d_fpd_const = {k: Tensor(v) for k, v in updated["FPD"][0].items()}
        d_drr_const = {k: Tensor(v) for k, v in updated["DRR"][0].items()}
        adv = gc.add(
            adversarial_loss(None, discriminator_forward(dcfg, d_fpd_const, fake_fpd), "generator", mode),
            adversarial_loss(None, discriminator_forward(dcfg, d_drr_const, fake_drr), "generator", mode),
        )
        cyc = cycle_loss(g_d2f, g_f2d, drr_t, fpd_t, fake_fpd=fake_fpd, fake_drr=fake_drr)
        idt = identity_loss(g_d2f, g_f2d, drr_t, fpd_t)
        sty = style_loss(extractor, fake_fpd, fpd_t, fake_drr, drr_t)
        total = linear_combination([adv, cyc, idt, sty], [1.0, weights.cycle, weights.identity, weights.style])

    diag.update(adv_G=float(adv.data), cycle=float(cyc.data), identity=float(idt.data), style=float(sty.data))
    diag["total_G"] = float(total.data)
    if not all(np.isfinite(v) for v in diag.values()):
        raise NumericalError("non-finite generator loss", diag)
    ggrads = gtape.gradient(total, gparams)
    if not _finite(ggrads):
        raise NumericalError("non-finite generator gradient", diag)
    new_g, new_opt_g = gc.adamax_step(bundle.generator_params(), ggrads, bundle.opt_g, lr=lr)

    bundle.d_fpd, bundle.opt_d_fpd = updated["FPD"]
    bundle.d_drr, bundle.opt_d_drr = updated["DRR"]
    bundle.set_generator_params(new_g)
    bundle.opt_g = new_opt_g
    return LossBreakdown(
        adv_G=diag["adv_G"],
        adv_D_FPD=diag["adv_D_FPD"],
        adv_D_DRR=diag["adv_D_DRR"],
        cycle=diag["cycle"],
        identity=diag["identity"],
        style=diag["style"],
        total_G=diag["total_G"],
        total_D=diag["adv_D_FPD"] + diag["adv_D_DRR"],
        step=bundle.step,
        epoch=bundle.epoch,
    )


# ---------------------------------------------------------------- loop

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield start, perm[start : start + batch_size]


def train_loop(
    dataset: PatchDataset,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    bundle: ModelBundle | None = None,
    gen_cfg: GeneratorConfig | None = None,
    disc_cfg: DiscriminatorConfig | None = None,
    extractor: FeatureExtractor | None = None,
    out_dir=None,
    max_steps: int | None = None,
    on_step: Callable[[LossBreakdown], None] | None = None,
) -> tuple[ModelBundle, list[LossBreakdown]]:
    """Train from ``bundle.epoch`` to ``cfg.epochs``; returns the bundle and this call's loss history.

    With ``out_dir`` set, checkpoints are written every ``cfg.checkpoint_every``
    epochs (and at the end) and the loss history is appended to
    ``loss_history.csv``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if bundle is None:
        bundle = ModelBundle.initialize(gen_cfg, disc_cfg, seed=cfg.seed, optimizer=cfg.optimizer())
    extractor = extractor or FeatureExtractor()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[LossBreakdown] = []
    for epoch in range(bundle.epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        t0 = time.perf_counter()
        for start, idx in epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            drr, fpd = dataset.batch(idx, cfg.augment, epoch, offset=start)
            lb = train_step(bundle, drr, fpd, weights, cfg, extractor, lr=lr)
            bundle.step += 1
            history.append(lb)
            if on_step is not None:
                on_step(lb)
            if max_steps is not None and len(history) >= max_steps:
                return bundle, history
        bundle.epoch = epoch + 1
        log.info(
            "epoch %d/%d lr=%.2e total_G=%.4f total_D=%.4f (%.1fs)",
            bundle.epoch, cfg.epochs, lr, history[-1].total_G, history[-1].total_D, time.perf_counter() - t0,
        )
        if out is not None:
            append_history(out / "loss_history.csv", [h for h in history if h.epoch == epoch])
            if bundle.epoch % cfg.checkpoint_every == 0 or bundle.epoch == cfg.epochs:
                save_checkpoint(bundle, out / "checkpoint")
    return bundle, history


def append_history(path, rows: Sequence[LossBreakdown]) -> None:
    path = Path(path)
    new = not path.exists()
    try:
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "epoch", *LOSS_FIELDS])
            if new:
                w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    except OSError as exc:
        raise OSError(f"cannot write loss history {path}: {exc}") from exc


def read_history(path) -> list[LossBreakdown]:
    with open(path, newline="") as fh:
        return [
            LossBreakdown(**{k: float(r[k]) for k in LOSS_FIELDS}, step=int(r["step"]), epoch=int(r["epoch"]))
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- checkpoints

def _state_tensors(prefix: str, st: gc.AdamaxState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/t": np.array([st.t], np.float32)}
    for k in sorted(st.m):
        out[f"{prefix}/m/{k}"] = st.m[k]
        out[f"{prefix}/u/{k}"] = st.u[k]
    return out


def _state_from(prefix: str, arch: Mapping[str, np.ndarray], hp: Mapping[str, float]) -> gc.AdamaxState:
    m = {k[len(prefix) + 3 :]: v for k, v in arch.items() if k.startswith(f"{prefix}/m/")}
    u = {k[len(prefix) + 3 :]: v for k, v in arch.items() if k.startswith(f"{prefix}/u/")}
    return gc.AdamaxState(**hp, t=int(arch[f"{prefix}/t"][0]), m=m, u=u)


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    """Write ``<path>.fstn`` (tensor archive) and ``<path>.json`` (manifest)."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    for group in ("g_drr2fpd", "g_fpd2drr", "d_fpd", "d_drr"):
        for k, v in getattr(bundle, group).items():
            tensors[f"{group}/{k}"] = v
    for group in ("opt_g", "opt_d_fpd", "opt_d_drr"):
        tensors.update(_state_tensors(group, getattr(bundle, group)))
    manifest = {
        "config_digest": bundle.digest,
        "epoch": bundle.epoch,
        "step": bundle.step,
        "generator": asdict(bundle.gen_cfg),
        "discriminator": asdict(bundle.disc_cfg),
        "optimizer": bundle.opt_g.hyperparameters(),
    }
    try:
        gc.write_archive(path.with_suffix(".fstn"), tensors)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def _cfg_from(cls, d: Mapping):
    kw = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def load_checkpoint(
    path, gen_cfg: GeneratorConfig | None = None, disc_cfg: DiscriminatorConfig | None = None
) -> ModelBundle:
    """Inverse of :func:`save_checkpoint`; raises :class:`CheckpointMismatch` if configs differ."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    g = _cfg_from(GeneratorConfig, manifest["generator"])
    d = _cfg_from(DiscriminatorConfig, manifest["discriminator"])
    if config_digest(g, d) != manifest["config_digest"]:
        raise CheckpointMismatch(f"{path}: manifest digest does not match its own configs")
    if (gen_cfg is not None and gen_cfg != g) or (disc_cfg is not None and disc_cfg != d):
        want = config_digest(gen_cfg or g, disc_cfg or d)
        raise CheckpointMismatch(f"{path}: checkpoint config {manifest['config_digest']} != requested {want}")
    arch = gc.read_archive(path.with_suffix(".fstn"))
    groups = {grp: {k.split("/", 1)[1]: v for k, v in arch.items() if k.startswith(grp + "/")} for grp in ("g_drr2fpd", "g_fpd2drr", "d_fpd", "d_drr")}
    hp = manifest["optimizer"]
    return ModelBundle(
        g,
        d,
        groups["g_drr2fpd"],
        groups["g_fpd2drr"],
        groups["d_fpd"],
        groups["d_drr"],
        _state_from("opt_g", arch, hp),
        _state_from("opt_d_fpd", arch, hp),
        _state_from("opt_d_drr", arch, hp),
        epoch=int(manifest["epoch"]),
        step=int(manifest["step"]),
    )


# ---------------------------------------------------------------- U-Net baseline

def train_unet(
    dataset: PatchDataset,
    cfg: TrainConfig,
    unet_cfg: UNetConfig = UNetConfig(),
    params: dict[str, np.ndarray] | None = None,
    max_steps: int | None = None,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Supervised baseline: L1 between U-Net output and the paired FPD, Adamax, same schedule."""
    params = params if params is not None else init_unet(unet_cfg, seed=cfg.seed)
    state = gc.AdamaxState(**cfg.optimizer())
    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for start, idx in epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            drr, fpd = dataset.batch(idx, cfg.augment, epoch, offset=start)
            p = gc.parameters(params)
            with Tape() as tape:
                loss = gc.reduce_loss(unet_forward(unet_cfg, p, Tensor(drr)), Tensor(fpd), "l1_mean")
            grads = tape.gradient(loss, p)
            if not np.isfinite(loss.data) or not _finite(grads):
                raise NumericalError("non-finite U-Net loss", {"l1": float(loss.data)})
            params, state = gc.adamax_step(params, grads, state, lr=lr)
            history.append(float(loss.data))
            if max_steps is not None and len(history) >= max_steps:
                return params, history
    return params, history


def save_unet(params: Mapping[str, np.ndarray], unet_cfg: UNetConfig, path) -> None:
    path = Path(path)
    gc.write_archive(path.with_suffix(".fstn"), dict(params))
    path.with_suffix(".json").write_text(json.dumps({"unet": asdict(unet_cfg), "config_digest": config_digest(unet_cfg)}, indent=2))


def load_unet(path) -> tuple[dict[str, np.ndarray], UNetConfig]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return gc.read_archive(path.with_suffix(".fstn")), _cfg_from(UNetConfig, meta["unet"])
