"""scikit-learn style wrappers: fit on DRR/FPD patch pairs, transform DRRs into synthetic FPDs."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datapipe import AugmentSpec, PatchDataset
from .nets import (
    DiscriminatorConfig,
    FeatureExtractor,
    FeatureExtractorSpec,
    GeneratorConfig,
    ModelBundle,
    UNetConfig,
    init_unet,
    run_generator,
    run_unet,
)
from .trainer import LossWeights, TrainConfig, train_loop, train_unet
from .validation import check_image_stack, check_paired, check_positive_int


def _augment(crop, max_shift, seed, size) -> AugmentSpec | None:
    if crop is None:
        return None
    spec = AugmentSpec(crop=crop, max_shift=max_shift, seed=seed)
    spec.check(size)
    return spec


class CycleGANSynthesizer(TransformerMixin, BaseEstimator):
    """DRR -> FPD translator trained with adversarial, cycle, identity and style losses.

    ``X`` holds DRR patches and ``y`` the corresponding FPD patches, both
    (n, H, W) in [0, 1]. The pairing is only used to draw both domains from
    the same batch; no loss compares a DRR with its own FPD pixelwise.
    """

    def __init__(
        self,
        width_divisor=1,
        residual_blocks=9,
        extractor_divisor=1,
        epochs=550,
        batch_size=16,
        learning_rate=2e-4,
        lr_drop_epoch=500,
        lambda_cycle=5.0,
        lambda_identity=5.0,
        lambda_style=2e-5,
        adversarial_mode="non_saturating",
        crop=124,
        max_shift=20,
        random_state=0,
    ):
        self.width_divisor = width_divisor
        self.residual_blocks = residual_blocks
        self.extractor_divisor = extractor_divisor
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_epoch = lr_drop_epoch
        self.lambda_cycle = lambda_cycle
        self.lambda_identity = lambda_identity
        self.lambda_style = lambda_style
        self.adversarial_mode = adversarial_mode
        self.crop = crop
        self.max_shift = max_shift
        self.random_state = random_state

    def _configs(self, size: int):
        gen = GeneratorConfig.scaled(check_positive_int(self.width_divisor, "width_divisor"), self.residual_blocks)
        disc = DiscriminatorConfig.scaled(self.width_divisor)
        aug = _augment(self.crop, self.max_shift, self.random_state, size)
        train = TrainConfig(
            epochs=self.epochs,
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            lr=self.learning_rate,
            lr_drop_epoch=min(self.lr_drop_epoch, self.epochs),
            adversarial_mode=self.adversarial_mode,
            seed=self.random_state,
            checkpoint_every=max(1, self.epochs),
            augment=aug,
        )
        return gen, disc, train

    def fit(self, X, y):
        X, y = check_paired(X, y, min_size=16)
        gen, disc, train = self._configs(X.shape[1])
        if train.augment is None and (X.shape[1] % gen.downsampling or X.shape[2] % gen.downsampling):
            raise ValueError(f"patches must be divisible by {gen.downsampling} when crop=None")
        weights = LossWeights(self.lambda_cycle, self.lambda_identity, self.lambda_style)
        extractor = FeatureExtractor(FeatureExtractorSpec(width_divisor=self.extractor_divisor))
        bundle = ModelBundle.initialize(gen, disc, seed=self.random_state, optimizer=train.optimizer())
        self.bundle_, history = train_loop(PatchDataset.from_arrays(X, y), train, weights, bundle, extractor=extractor)
        self.loss_history_ = [h.row() for h in history]
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        X = check_image_stack(X, multiple_of=self.bundle_.gen_cfg.downsampling, min_size=16)
        return self.bundle_.translate(X)

    def predict(self, X):
        return self.transform(X)

    def inverse_transform(self, y):
        """FPD -> DRR with the reverse generator."""
        check_is_fitted(self, "bundle_")
        y = check_image_stack(y, "y", multiple_of=self.bundle_.gen_cfg.downsampling, min_size=16)
        return run_generator(self.bundle_.gen_cfg, self.bundle_.g_fpd2drr, y)


class UNetRegressor(RegressorMixin, BaseEstimator):
    """Supervised L1 U-Net baseline mapping DRR patches to their paired FPD patches."""

    def __init__(
        self,
        base_channels=32,
        depth=4,
        epochs=550,
        batch_size=16,
        learning_rate=2e-4,
        lr_drop_epoch=500,
        crop=124,
        max_shift=20,
        random_state=0,
    ):
        self.base_channels = base_channels
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_epoch = lr_drop_epoch
        self.crop = crop
        self.max_shift = max_shift
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_paired(X, y)
        self.config_ = UNetConfig(check_positive_int(self.base_channels, "base_channels"), check_positive_int(self.depth, "depth"))
        train = TrainConfig(
            epochs=self.epochs,
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            lr=self.learning_rate,
            lr_drop_epoch=min(self.lr_drop_epoch, self.epochs),
            seed=self.random_state,
            augment=_augment(self.crop, self.max_shift, self.random_state, X.shape[1]),
        )
        params = init_unet(self.config_, seed=self.random_state)
        self.params_, self.loss_history_ = train_unet(PatchDataset.from_arrays(X, y), train, self.config_, params)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_image_stack(X, multiple_of=2**self.config_.depth)
        return run_unet(self.config_, self.params_, X)

    def score(self, X, y, sample_weight=None):
        """Negative mean absolute error (higher is better)."""
        X, y = check_paired(X, y)
        return -float(np.mean(np.abs(self.predict(X) - y)))
