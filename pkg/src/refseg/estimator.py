"""Scikit-learn style front door.

ReferringSegmenter wraps dataset collation, model construction and the
training loop behind the usual fit/predict/score surface so the model
composes with sklearn tooling (get_params/set_params, clone, grid search
over the ablation flags).  X is a list of Sample records from
refseg.data; y is implicit (every Sample carries its mask).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import ExperimentConfig
from .data import Sample
from .experiments import evaluate_model, run_probe, train_model
from .losses import DEFAULT_WEIGHTS
from .metrics import MetricsReport, ProbeResult, compute_metrics
from .model import collate


def check_samples(samples, image_size: int | None = None) -> list[Sample]:
    """Validate a dataset the way sklearn validates X."""
    if not isinstance(samples, (list, tuple)) or len(samples) == 0:
        raise ValueError("expected a nonempty list of Sample records")
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample, got {type(s).__name__}")
        if s.image.ndim != 3 or s.image.shape[2] != 3:
            raise ValueError(f"sample {s.id}: image must be HxWx3")
        if s.mask.shape != s.image.shape[:2]:
            raise ValueError(f"sample {s.id}: mask shape differs from image")
        if image_size is not None and s.image.shape[0] != image_size:
            raise ValueError(
                f"sample {s.id}: image size {s.image.shape[0]} != configured {image_size}"
            )
    return list(samples)


class ReferringSegmenter(BaseEstimator):
    """Trainable referring-expression segmenter.

    Parameters mirror ExperimentConfig; all are plain values so sklearn's
    get_params/set_params/clone work unmodified.
    """

    def __init__(
        self,
        epochs: int = 10,
        batch_size: int = 32,
        lr: float = 3e-4,
        weight_decay: float = 0.01,
        seed: int = 0,
        image_size: int = 64,
        grounding: bool = True,
        mask_rate: float = 0.15,
        mask_input: str = "center",
        predictor_depth: int = 8,
        cam: bool = True,
        cam_scales: tuple = (1, 2, 3, 6),
        cal: str = "both",
        cal_form: str = "log",
        tau1: float = 0.1,
        tau2: float = 0.1,
        loss_weights: tuple = DEFAULT_WEIGHTS,
        lang_width: int = 64,
        image_dims: tuple = (32, 64, 128, 256),
        decoder_dim: int = 32,
        heads: int = 4,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.image_size = image_size
        self.grounding = grounding
        self.mask_rate = mask_rate
        self.mask_input = mask_input
        self.predictor_depth = predictor_depth
        self.cam = cam
        self.cam_scales = cam_scales
        self.cal = cal
        self.cal_form = cal_form
        self.tau1 = tau1
        self.tau2 = tau2
        self.loss_weights = loss_weights
        self.lang_width = lang_width
        self.image_dims = image_dims
        self.decoder_dim = decoder_dim
        self.heads = heads

    def _config(self, n_train: int) -> ExperimentConfig:
        return ExperimentConfig(
            seed=self.seed,
            train_count=n_train,
            val_count=1,  # unused: fit receives explicit samples
            image_size=self.image_size,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            image_dims=tuple(self.image_dims),
            lang_width=self.lang_width,
            heads=self.heads,
            cam=self.cam,
            cam_scales=tuple(self.cam_scales),
            grounding=self.grounding,
            mask_rate=self.mask_rate,
            mask_input=self.mask_input,
            predictor_depth=self.predictor_depth,
            decoder_dim=self.decoder_dim,
            cal=self.cal,
            cal_form=self.cal_form,
            tau1=self.tau1,
            tau2=self.tau2,
            loss_weights=tuple(self.loss_weights),
        )

    def fit(self, X, y=None, val_samples=None):
        samples = check_samples(X, self.image_size)
        cfg = self._config(len(samples))
        self.model_, self.history_ = train_model(cfg, samples, val_samples)
        self.config_ = cfg
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this ReferringSegmenter has not been fitted yet")

    def predict(self, X) -> list[np.ndarray]:
        """Binary masks (logit > 0) for each sample."""
        self._require_fitted()
        samples = check_samples(X, self.image_size)
        preds = []
        for lo in range(0, len(samples), 64):
            images, tokens, _ = collate(samples[lo : lo + 64])
            preds.extend(self.model_.predict_masks(images, tokens))
        return preds

    def predict_proba(self, X) -> list[np.ndarray]:
        """Foreground probability maps."""
        import torch

        self._require_fitted()
        samples = check_samples(X, self.image_size)
        probs = []
        for lo in range(0, len(samples), 64):
            images, tokens, _ = collate(samples[lo : lo + 64])
            with torch.no_grad():
                self.model_.eval()
                out = self.model_(images, tokens)
            probs.extend(torch.sigmoid(out.mask_logits).cpu().numpy())
        return probs

    def score(self, X, y=None) -> float:
        """Mean per-sample IoU on X."""
        self._require_fitted()
        return self.report(X).miou

    def report(self, X) -> MetricsReport:
        self._require_fitted()
        samples = check_samples(X, self.image_size)
        return evaluate_model(self.model_, samples)

    def probe(self, X, seed: int | None = None) -> ProbeResult:
        """Frozen-feature linear-probe alignment measurement on X."""
        self._require_fitted()
        samples = check_samples(X, self.image_size)
        return run_probe(self.model_, samples, seed=self.seed if seed is None else seed)
