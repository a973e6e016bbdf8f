"""scikit-learn style estimators over raw 16 kHz waveforms.

``FeatureExtractor`` and ``PretextEncoder`` are transformers mapping a list
of waveforms to one pooled vector per clip; ``ProbeClassifier`` is the
linear probe trained with Adam and early stopping.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .audio import SAMPLE_RATE, Waveform
from .downstream import DownstreamSettings, _fit_pooled
from .encoder import PASE_PLUS, default_config, desk_config
from .features import DEFAULT_SPEC, RunningStats, Worker, extract_all, parse_workers, workers_label
from .pretrain import Checkpoint, Clip, PretrainConfig, PretrainData, pretrain


def check_waveforms(X, min_length: int = 1) -> list[np.ndarray]:
    """Validate a batch of mono waveforms; returns a list of float32 arrays.

    Accepts a 2-D array (one clip per row) or a sequence of 1-D arrays.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        clips = list(X)
    elif isinstance(X, (list, tuple)) or (isinstance(X, np.ndarray) and X.dtype == object):
        clips = list(X)
    else:
        raise ValueError("expected a 2-D array or a sequence of 1-D waveforms")
    if not clips:
        raise ValueError("need at least one waveform")
    out = []
    for i, x in enumerate(clips):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 1:
            raise ValueError(f"waveform {i} must be 1-D, got shape {x.shape}")
        if x.shape[0] < min_length:
            raise ValueError(f"waveform {i} has {x.shape[0]} samples; need at least {min_length}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"waveform {i} contains non-finite samples")
        out.append(x)
    return out


def check_embeddings(X) -> np.ndarray:
    """Pooled (n, d) embeddings; (n, T, d) inputs are mean-pooled over T."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X.mean(axis=1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"expected (n_samples, dim) embeddings, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("embeddings contain non-finite values")
    return X


class FeatureExtractor(BaseEstimator, TransformerMixin):
    """Mean-pooled, train-normalized hand-crafted features (the worker targets)."""

    def __init__(self, workers: str = "LPMCT", normalize: bool = True):
        self.workers = workers
        self.normalize = normalize

    def _frame_workers(self):
        return [w for w in parse_workers(self.workers) if w is not Worker.W]

    def _features(self, X):
        return [extract_all(Waveform(x, SAMPLE_RATE), self._frame_workers(), DEFAULT_SPEC) for x in X]

    def fit(self, X, y=None):
        X = check_waveforms(X)
        if not self._frame_workers():
            raise ValueError("FeatureExtractor needs at least one frame-level worker")
        stats = {w: RunningStats() for w in self._frame_workers()}
        for feats in self._features(X):
            for w, fm in feats.items():
                stats[w].update(fm.values)
        self.stats_ = {w: s.finalize(w) for w, s in stats.items()}
        self.n_features_out_ = sum(s.mean.shape[0] for s in self.stats_.values())
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_waveforms(X)
        rows = []
        for feats in self._features(X):
            parts = []
            for w in self._frame_workers():
                v = feats[w].values
                if self.normalize:
                    v = self.stats_[w].normalize(v)
                parts.append(v.mean(axis=1))
            rows.append(np.concatenate(parts))
        return np.stack(rows).astype(np.float32)


class PretextEncoder(BaseEstimator, TransformerMixin):
    """Self-supervised encoder: ``fit`` pre-trains on waveforms, ``transform`` returns pooled embeddings."""

    def __init__(self, workers: str = "WLP", variant: str = PASE_PLUS, desk: bool = True, epochs: int = 10,
                 batch_size: int = 32, lr: float = 5e-4, chunk_len: int = 16000, valid_fraction: float = 0.25,
                 seed: int = 0):
        self.workers = workers
        self.variant = variant
        self.desk = desk
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.chunk_len = chunk_len
        self.valid_fraction = valid_fraction
        self.seed = seed

    def _config(self) -> PretrainConfig:
        enc = desk_config(self.variant) if self.desk else default_config(self.variant)
        return PretrainConfig(workers=workers_label(parse_workers(self.workers)), encoder=enc, epochs=self.epochs,
                              batch_size=self.batch_size, lr=self.lr, chunk_len=self.chunk_len, seed=self.seed)

    def fit(self, X, y=None):
        config = self._config()
        X = check_waveforms(X)
        if len(X) < 2:
            raise ValueError("need at least two waveforms (train and validation)")
        order = np.random.default_rng([self.seed, 3]).permutation(len(X))
        n_valid = min(max(1, int(round(self.valid_fraction * len(X)))), len(X) - 1)
        clips = [Clip(str(i), Waveform(X[i], SAMPLE_RATE)) for i in order]
        data = PretrainData(clips[n_valid:], clips[:n_valid], config.workers, config.extraction, config.chunk_len)
        self.checkpoint_ = pretrain(config, data)
        self.encoder_ = self.checkpoint_.build_encoder().eval()
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint) -> "PretextEncoder":
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        cfg = checkpoint.config
        est = cls(workers=workers_label(cfg.workers), variant=cfg.encoder.variant,
                  desk=cfg.encoder != default_config(cfg.encoder.variant), epochs=cfg.epochs,
                  batch_size=cfg.batch_size, lr=cfg.lr, chunk_len=cfg.chunk_len, seed=cfg.seed)
        est.checkpoint_ = checkpoint
        est.encoder_ = checkpoint.build_encoder().eval()
        return est

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        min_len = self.encoder_.config.min_input
        X = check_waveforms(X)
        out = []
        with torch.no_grad():
            for x in X:
                if x.shape[0] < min_len:
                    x = np.pad(x, (0, min_len - x.shape[0]))
                out.append(self.encoder_(torch.from_numpy(x)[None, None])[0].mean(dim=0).numpy())
        return np.stack(out)


class ProbeClassifier(BaseEstimator, ClassifierMixin):
    """Linear probe over pooled embeddings; Adam with early stopping on a held-out fraction."""

    def __init__(self, lr: float = 1e-3, batch_size: int = 32, patience: int = 10, max_epochs: int = 200,
                 validation_fraction: float = 0.2, seed: int = 0):
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_embeddings(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have shape ({X.shape[0]},), got {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if X_val is None:
            order = np.random.default_rng([self.seed, 5]).permutation(len(X))
            n_val = int(round(self.validation_fraction * len(X)))
            val, tr = order[:n_val], order[n_val:]
            Xv, yv = X[val], codes[val]
            X, codes = X[tr], codes[tr]
        else:
            Xv = check_embeddings(X_val)
            lookup = {c: i for i, c in enumerate(self.classes_)}
            yv = np.array([lookup[c] for c in np.asarray(y_val)])
        settings = DownstreamSettings(lr=self.lr, batch_size=self.batch_size, patience=self.patience,
                                      max_epochs=self.max_epochs)
        self.probe_, stopper = _fit_pooled(X, codes.astype(np.int64), Xv, yv.astype(np.int64),
                                           len(self.classes_), False, self.seed, settings)
        self.n_epochs_, self.best_epoch_ = stopper.epoch, stopper.best_epoch
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "probe_")
        X = check_embeddings(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        self.probe_.eval()
        with torch.no_grad():
            return self.probe_(torch.from_numpy(X)).numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


__all__ = ["FeatureExtractor", "PretextEncoder", "ProbeClassifier", "check_waveforms", "check_embeddings",
           "NotFittedError"]
