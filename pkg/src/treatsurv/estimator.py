"""scikit-learn compatible wrapper around the treatment-conditioned regressor."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted

from .conditioning import TREATMENTS, TreatmentCode, onehot_matrix
from .data import SURVIVAL_MAX, SURVIVAL_MIN, VolumeSample
from .exceptions import ShapeError, ValidationError
from .model import FUSION_MODES, SurvivalNetConfig, clamp_days
from .tensor import UnfoldedVolumes
from .training import Trainer, TrainConfig, predict, prepare_volumes


def check_volumes(X, n_channels: int | None = None) -> np.ndarray:
    """Validate a batch of volumes, returning a float64 ``[N, C, D, H, W]`` array."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 5:
        raise ShapeError(f"expected volumes shaped [N, C, D, H, W], got shape {X.shape}")
    if X.shape[1] not in (4, 5):
        raise ShapeError(f"expected 4 modalities (+ optional mask), got {X.shape[1]} channels")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ShapeError(f"estimator was fitted on {n_channels} channels, got {X.shape[1]}")
    if len(set(X.shape[2:])) != 1:
        raise ShapeError(f"volumes must be cubic, got spatial shape {X.shape[2:]}")
    return X


def check_treatments(treatment, n_samples: int, required: bool = True) -> list:
    """Normalize treatments to a list of :class:`TreatmentCode` of length ``n_samples``."""
    if treatment is None:
        if required:
            raise ValidationError("this estimator conditions on treatment; pass treatment=...")
        return [TreatmentCode("NA")] * n_samples
    if isinstance(treatment, (str, TreatmentCode)):
        return [TreatmentCode.parse(treatment)] * n_samples
    codes = [TreatmentCode.from_onehot(row) for row in onehot_matrix(treatment)]
    if len(codes) != n_samples:
        raise ShapeError(f"got {len(codes)} treatments for {n_samples} samples")
    return codes


def check_survival(y, n_samples: int) -> np.ndarray:
    y = check_array(y, ensure_2d=False, dtype=np.float64).reshape(-1)
    if y.shape[0] != n_samples:
        raise ShapeError(f"got {y.shape[0]} targets for {n_samples} samples")
    if np.any(y < SURVIVAL_MIN) or np.any(y > SURVIVAL_MAX):
        raise ValidationError(f"survival days must lie in [{SURVIVAL_MIN}, {SURVIVAL_MAX}]")
    return y


class TreatmentSurvivalRegressor(RegressorMixin, BaseEstimator):
    """Predict survival days from a multi-channel volume and a treatment.

    Parameters
    ----------
    fusion : {"none", "concat", "adain"}
        How the treatment enters the network.
    conv_channels, fc_widths : tuple of int
        Widths of the 4 convolutional and 3 dense stages (last dense width 1).
    epochs, batch_size, learning_rate, betas, eps :
        Adam / MAE training schedule.
    fit_output_scale : bool
        Centre and scale the network head on the training targets.
    random_state : int
        Seeds initialization and minibatch order.

    Attributes
    ----------
    net_ : SurvivalNet
    loss_history_ : list of float
        Mean training MAE per epoch.
    n_channels_in_ : int
    """

    def __init__(self, fusion="adain", conv_channels=(8, 16, 32, 64), fc_widths=(64, 32, 1),
                 latent_width=16, epochs=200, batch_size=8, learning_rate=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, fit_output_scale=True, random_state=0):
        self.fusion = fusion
        self.conv_channels = conv_channels
        self.fc_widths = fc_widths
        self.latent_width = latent_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.fit_output_scale = fit_output_scale
        self.random_state = random_state

    def _train_config(self, n_channels: int, extent: int) -> TrainConfig:
        model = SurvivalNetConfig(in_channels=n_channels, conv_channels=self.conv_channels,
                                  fc_widths=self.fc_widths, fusion=self.fusion,
                                  latent_width=self.latent_width, input_extent=extent)
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           betas=self.betas, eps=self.eps, seed=self.random_state,
                           fit_output_scale=self.fit_output_scale, model=model).validate()

    def fit(self, X, y, treatment=None):
        """Train on volumes ``X`` with survival days ``y`` under ``treatment``."""
        if self.fusion not in FUSION_MODES:
            raise ValidationError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        X = check_volumes(X)
        y = check_survival(y, X.shape[0])
        codes = check_treatments(treatment, X.shape[0], required=self.fusion != "none")
        samples = [VolumeSample(f"sample{i}", X[i], codes[i], y[i]) for i in range(X.shape[0])]
        trainer = Trainer(samples, self._train_config(X.shape[1], X.shape[2]))
        trainer.run()
        self.net_ = trainer.net
        self.loss_history_ = trainer.history
        self.n_channels_in_ = X.shape[1]
        return self

    def _unfold(self, X):
        k = self.net_.config.kernel_size
        volumes = prepare_volumes([VolumeSample(f"sample{i}", v, "NA", SURVIVAL_MIN) for i, v in enumerate(X)])
        return UnfoldedVolumes.from_volumes(volumes, k, k // 2)

    def predict(self, X, treatment=None, clamp=False):
        """Predicted survival days; ``clamp`` restricts them to the observed range."""
        check_is_fitted(self, "net_")
        X = check_volumes(X, self.n_channels_in_)
        codes = check_treatments(treatment, X.shape[0], required=self.fusion != "none")
        days = predict(self.net_, inputs=self._unfold(X), treatments=codes)
        return clamp_days(days) if clamp else days

    def predict_counterfactual(self, X):
        """``[N, 3]`` predictions, one column per treatment in GTR, STR, NA order."""
        check_is_fitted(self, "net_")
        X = check_volumes(X, self.n_channels_in_)
        inputs = self._unfold(X)
        return np.column_stack([predict(self.net_, inputs=inputs, treatments=[t] * X.shape[0])
                                for t in TREATMENTS])

    def score(self, X, y, treatment=None, sample_weight=None):
        """Coefficient of determination of the treatment-aware predictions."""
        return r2_score(y, self.predict(X, treatment), sample_weight=sample_weight)
