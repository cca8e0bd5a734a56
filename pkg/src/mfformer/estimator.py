"""scikit-learn compatible estimators.

Both modalities travel in one 2D design matrix so the estimators work with
``clone``, ``Pipeline`` and the model-selection utilities: each row is the
flattened T x N time-series matrix followed by the flattened W x H x D
volume (see :func:`pack_modalities`).
"""

from __future__ import annotations

import json
import os

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .data import pcc_features, substream
from .model import VARIANTS, MFFormer, ModelConfig
from .tensor import Tensor, softmax_rows
from .train import ScheduleConfig, TrainConfig, mfformer_forward, predict_logits, train_model

ESTIMATOR_FILE = "estimator.json"


def pack_modalities(fmri: np.ndarray, t1w: np.ndarray) -> np.ndarray:
    fmri = np.asarray(fmri, dtype=np.float64)
    t1w = np.asarray(t1w, dtype=np.float64)
    if fmri.ndim != 3 or t1w.ndim != 4 or fmri.shape[0] != t1w.shape[0]:
        raise ValueError(f"expected (n, T, N) and (n, W, H, D), got {fmri.shape} and {t1w.shape}")
    n = fmri.shape[0]
    return np.concatenate([fmri.reshape(n, -1), t1w.reshape(n, -1)], axis=1)


def unpack_modalities(X: np.ndarray, fmri_shape, t1w_shape) -> tuple[np.ndarray, np.ndarray]:
    nf = int(np.prod(fmri_shape))
    ns = int(np.prod(t1w_shape))
    if X.shape[1] != nf + ns:
        raise ValueError(f"X has {X.shape[1]} features; fmri {tuple(fmri_shape)} + t1w {tuple(t1w_shape)} "
                         f"need {nf + ns}")
    n = X.shape[0]
    return X[:, :nf].reshape((n,) + tuple(fmri_shape)), X[:, nf:].reshape((n,) + tuple(t1w_shape))


def with_stream(estimator, stream_id: int):
    """Set every ``stream_id`` parameter (including nested ones) of an estimator."""
    keys = [k for k in estimator.get_params(deep=True) if k == "stream_id" or k.endswith("__stream_id")]
    return estimator.set_params(**{k: stream_id for k in keys})


class _BinaryClassifierBase(ClassifierMixin, BaseEstimator):
    """Shared label handling and training-recipe plumbing."""

    def _encode_labels(self, y):
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"binary classification only; got classes {self.classes_.tolist()}")
        return np.searchsorted(self.classes_, y).astype(np.int64)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            schedule=ScheduleConfig(base_lr=self.learning_rate, warmup_epochs=self.warmup_epochs,
                                    total_epochs=self.epochs),
            batch_size=self.batch_size, weight_decay=self.weight_decay,
            beta1=self.beta1, beta2=self.beta2,
        )

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def predict_proba(self, X):
        logits = self.decision_logits(X)
        return softmax_rows(Tensor(logits)).data


class MFFormerClassifier(_BinaryClassifierBase):
    """Two-modality fusion transformer classifier.

    ``variant`` picks one ablation row: ``baseline1`` (T1w only),
    ``baseline2`` (fMRI only), ``3d-1way``, ``3d-3way``, ``4d-1way`` or
    ``4d-3way``.
    """

    def __init__(self, fmri_shape=(64, 100), t1w_shape=(32, 32, 32), variant="4d-3way", base_channels=8,
                 attention_dim=128, n_heads=1, mlp_hidden=20, epochs=500, warmup_epochs=200, learning_rate=5e-4,
                 weight_decay=1e-8, beta1=0.99, beta2=0.999, batch_size=5, dtype="float64", random_state=0, stream_id=0):
        self.fmri_shape = fmri_shape
        self.t1w_shape = t1w_shape
        self.variant = variant
        self.base_channels = base_channels
        self.attention_dim = attention_dim
        self.n_heads = n_heads
        self.mlp_hidden = mlp_hidden
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.dtype = dtype
        self.random_state = random_state
        self.stream_id = stream_id

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_variant(
            self.variant, fmri_shape=tuple(self.fmri_shape), t1w_shape=tuple(self.t1w_shape),
            base_channels=self.base_channels, attention_dim=self.attention_dim, n_heads=self.n_heads,
            mlp_hidden=self.mlp_hidden, dtype=self.dtype,
        )

    def fit(self, X, y, lr_override=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y_enc = self._encode_labels(y)
        fmri, t1w = unpack_modalities(X, self.fmri_shape, self.t1w_shape)
        model = MFFormer(self.model_config(), rng=substream(self.random_state, "init", self.stream_id))
        self.loss_trace_ = train_model(
            model, mfformer_forward(model, fmri, t1w), y_enc, self._train_config(),
            substream(self.random_state, "sampler", self.stream_id), lr_override=lr_override,
        )
        self.model_ = model.eval()
        self.n_features_in_ = X.shape[1]
        return self

    def decision_logits(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        fmri, t1w = unpack_modalities(X, self.fmri_shape, self.t1w_shape)
        return predict_logits(mfformer_forward(self.model_, fmri, t1w), self.model_, X.shape[0], self.batch_size)

    def save(self, directory: str) -> None:
        check_is_fitted(self, "model_")
        nn.save_checkpoint(self.model_, directory, extra={"model_config": self.model_.config.to_dict()})
        params = self.get_params()
        params["fmri_shape"] = list(self.fmri_shape)
        params["t1w_shape"] = list(self.t1w_shape)
        with open(os.path.join(directory, ESTIMATOR_FILE), "w") as fh:
            json.dump({"params": params, "classes": self.classes_.tolist()}, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str) -> "MFFormerClassifier":
        with open(os.path.join(directory, ESTIMATOR_FILE)) as fh:
            doc = json.load(fh)
        params = doc["params"]
        params["fmri_shape"] = tuple(params["fmri_shape"])
        params["t1w_shape"] = tuple(params["t1w_shape"])
        est = cls(**params)
        model = MFFormer(est.model_config())
        state, _ = nn.read_checkpoint(directory)
        model.load_state_dict(state)
        est.model_ = model.eval()
        est.classes_ = np.asarray(doc["classes"])
        est.n_features_in_ = int(np.prod(est.fmri_shape) + np.prod(est.t1w_shape))
        return est


class PCCFeatures(TransformerMixin, BaseEstimator):
    """Strict upper triangle of the ROI correlation matrix of each subject.

    Reads the leading ``prod(fmri_shape)`` columns of each row; any trailing
    columns (the packed volume) are ignored.
    """

    def __init__(self, fmri_shape=(64, 100)):
        self.fmri_shape = fmri_shape

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        nf = int(np.prod(self.fmri_shape))
        if X.shape[1] < nf:
            raise ValueError(f"X has {X.shape[1]} columns; fmri_shape needs {nf}")
        ts = X[:, :nf].reshape((X.shape[0],) + tuple(self.fmri_shape))
        return np.stack([pcc_features(t) for t in ts])


class MLPHeadClassifier(_BinaryClassifierBase):
    """Three-layer perceptron (two hidden layers) trained with the MFFormer recipe."""

    def __init__(self, hidden=20, epochs=500, warmup_epochs=200, learning_rate=5e-4, weight_decay=1e-8,
                 beta1=0.99, beta2=0.999, batch_size=5, random_state=0, stream_id=0):
        self.hidden = hidden
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.random_state = random_state
        self.stream_id = stream_id

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y_enc = self._encode_labels(y)
        rng = substream(self.random_state, "init", self.stream_id)
        mlp = nn.MLP([X.shape[1], self.hidden, self.hidden, 2], rng=rng)
        self.loss_trace_ = train_model(mlp, lambda idx: mlp(Tensor(X[idx])), y_enc, self._train_config(),
                                       substream(self.random_state, "sampler", self.stream_id))
        self.mlp_ = mlp.eval()
        self.n_features_in_ = X.shape[1]
        return self

    def decision_logits(self, X):
        check_is_fitted(self, "mlp_")
        X = check_array(X, dtype=np.float64)
        return predict_logits(lambda idx: self.mlp_(Tensor(X[idx])), self.mlp_, X.shape[0], self.batch_size)


def make_pcc_mlp(fmri_shape=(64, 100), **mlp_params) -> Pipeline:
    """Connectivity baseline: PCC upper triangle -> MLP."""
    return Pipeline([("pcc", PCCFeatures(fmri_shape)), ("mlp", MLPHeadClassifier(**mlp_params))])


__all__ = [
    "MFFormerClassifier",
    "MLPHeadClassifier",
    "PCCFeatures",
    "make_pcc_mlp",
    "pack_modalities",
    "unpack_modalities",
    "with_stream",
    "VARIANTS",
]
