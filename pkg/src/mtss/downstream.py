"""Downstream evaluation: linear probes, the three training scenarios and macro F1."""

from __future__ import annotations

import copy
import math
import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MULTICLASS, MULTILABEL, Corpus, LabelSpace, ManifestEntry, subsample_split
from .encoder import EMB_DIM, Encoder, EncoderConfig, build_encoder, default_config
from .nn import state_digest

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("dataset", "scenario", "workers", "weighting", "n_train", "mean_f1", "std_f1", "config_digest")


class Scenario(str, Enum):
    SUPERVISED = "supervised"
    FROZEN = "frozen"
    FINE_TUNED = "fine_tuned"


class DownstreamError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    """Mean pooling over time followed by one fully connected layer."""

    n_classes: int
    task: str = MULTICLASS
    emb_dim: int = EMB_DIM

    def __post_init__(self):
        if self.task not in (MULTICLASS, MULTILABEL):
            raise ValueError(f"unknown task kind {self.task!r}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.emb_dim != EMB_DIM:
            raise ValueError(f"probe input dimension must be {EMB_DIM}")


@dataclass(frozen=True)
class DownstreamSettings:
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 200
    threshold: float = 0.5


# -- probe --------------------------------------------------------------------

def mean_pool(emb: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the time axis of (B, T, E) embeddings; ``mask`` (B, T) marks valid frames."""
    if emb.dim() == 2:
        return emb
    if mask is None:
        return emb.mean(dim=1)
    mask = mask.to(emb.dtype).unsqueeze(-1)
    return (emb * mask).sum(dim=1) / mask.sum(dim=1).clamp_min(1.0)


class Probe(nn.Module):
    def __init__(self, n_out: int, emb_dim: int = EMB_DIM):
        super().__init__()
        self.fc = nn.Linear(emb_dim, n_out)

    def forward(self, emb: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.fc(mean_pool(emb, mask))


def probe_forward(emb, weight, bias, mask=None) -> torch.Tensor:
    """Logits for (B, T, E) embeddings with explicit fully connected parameters."""
    emb = torch.as_tensor(emb)
    if emb.shape[-1] != weight.shape[-1]:
        raise ValueError(f"embedding dim {emb.shape[-1]} does not match probe input {weight.shape[-1]}")
    return F.linear(mean_pool(emb, mask), torch.as_tensor(weight, dtype=emb.dtype),
                    torch.as_tensor(bias, dtype=emb.dtype))


# -- metrics ------------------------------------------------------------------

def confusion_matrix(preds, truth, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if preds.shape != truth.shape:
        raise ValueError(f"shape mismatch: {preds.shape} predictions vs {truth.shape} labels")
    for name, a in (("prediction", preds), ("label", truth)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} class index out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def confusion_diff(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def _f1(tp, fp, fn) -> np.ndarray:
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    # no true and no predicted positives: F1 = 0 by convention
    return np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)


def per_class_f1(preds, truth, n_classes: int | None = None, mask=None) -> np.ndarray:
    """Per-class F1 for multiclass labels (1-D) or binary multilabel matrices (N, C)."""
    preds, truth = np.asarray(preds), np.asarray(truth)
    if truth.ndim == 2:
        if preds.shape != truth.shape:
            raise ValueError(f"shape mismatch: {preds.shape} predictions vs {truth.shape} labels")
        if n_classes is not None and truth.shape[1] != n_classes:
            raise ValueError(f"expected {n_classes} classes, got {truth.shape[1]}")
        m = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if m.shape != truth.shape:
            raise ValueError("mask must match the label matrix")
        p, t = preds.astype(bool), truth.astype(bool)
        tp = (p & t & m).sum(0)
        fp = (p & ~t & m).sum(0)
        fn = (~p & t & m).sum(0)
        return _f1(tp, fp, fn)
    if n_classes is None:
        raise ValueError("n_classes is required for multiclass labels")
    cm = confusion_matrix(preds, truth, n_classes)
    tp = np.diag(cm)
    return _f1(tp, cm.sum(0) - tp, cm.sum(1) - tp)


def macro_f1(preds, truth, n_classes: int | None = None, mask=None) -> float:
    """Unweighted mean of per-class F1 (masked entries excluded for multilabel)."""
    scores = per_class_f1(preds, truth, n_classes, mask)
    # correctly rounded sum: the result does not depend on class order
    return math.fsum(scores.tolist()) / len(scores)


# -- early stopping -----------------------------------------------------------

class EarlyStopping:
    """Track validation loss; stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int = 10, max_epochs: int = 200):
        if patience < 1 or max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.best_state = None
        self.epoch = 0
        self.stopped_epoch: int | None = None

    def step(self, loss: float, state: Callable[[], object] | object | None = None) -> bool:
        """Record one epoch's validation loss; returns True when training should stop."""
        self.epoch += 1
        if loss < self.best_loss:
            self.best_loss = float(loss)
            self.best_epoch = self.epoch
            self.best_state = copy.deepcopy(state() if callable(state) else state)
        stop = self.epoch - self.best_epoch >= self.patience or self.epoch >= self.max_epochs
        if stop:
            self.stopped_epoch = self.epoch
        return stop


# -- results ------------------------------------------------------------------

@dataclass
class TrialResult:
    trial: int
    seed: int
    macro_f1: float
    per_class: np.ndarray
    n_train: int
    epochs: int
    best_epoch: int
    confusion: np.ndarray | None = None
    encoder_digest_before: str | None = None
    encoder_digest_after: str | None = None
    init_digest: str | None = None


@dataclass
class TrialReport:
    scenario: str
    classes: list[str]
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def f1s(self) -> np.ndarray:
        return np.array([t.macro_f1 for t in self.trials])

    @property
    def mean(self) -> float:
        return float(self.f1s.mean())

    @property
    def std(self) -> float:
        return float(self.f1s.std())

    @property
    def per_class_mean(self) -> np.ndarray:
        return np.mean([t.per_class for t in self.trials], axis=0)

    @property
    def confusion(self) -> np.ndarray | None:
        mats = [t.confusion for t in self.trials if t.confusion is not None]
        return np.sum(mats, axis=0) if mats else None

    @property
    def n_train(self) -> int:
        return self.trials[0].n_train if self.trials else 0

    def write_trials_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "seed", "macro_f1", *[f"f1_{c}" for c in self.classes]])
            for t in self.trials:
                w.writerow([t.trial, t.seed, repr(float(t.macro_f1)), *[repr(float(v)) for v in t.per_class]])
        return path

    def write_confusion_csv(self, path, matrix=None) -> Path | None:
        matrix = self.confusion if matrix is None else matrix
        if matrix is None:
            return None
        return write_confusion_csv(path, matrix, self.classes)

    def summary_row(self, dataset: str, workers: str, weighting: str, digest: str = "") -> dict:
        return {"dataset": dataset, "scenario": self.scenario, "workers": workers, "weighting": weighting,
                "n_train": self.n_train, "mean_f1": repr(self.mean), "std_f1": repr(self.std),
                "config_digest": digest}


def write_confusion_csv(path, matrix, classes: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred", *classes])
        for c, row in zip(classes, np.asarray(matrix)):
            w.writerow([c, *[int(v) for v in row]])
    return path


def append_summary(path, row: dict) -> Path:
    """Append one experiment row to ``summary.csv``, writing the header on creation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in SUMMARY_FIELDS})
    return path


# -- data plumbing ------------------------------------------------------------

def multilabel_masked_batch(entries: Sequence[ManifestEntry], space: LabelSpace, cls) -> tuple[list, np.ndarray]:
    """Entries with a confident positive/negative mask for ``cls``, and their binary labels."""
    name = space.classes[cls] if isinstance(cls, (int, np.integer)) else cls
    if name not in space.classes:
        raise ValueError(f"class {cls!r} is not in the label space")
    kept, labels = [], []
    for e in entries:
        flag = (e.label_mask or {}).get(name, "unknown")
        if flag in ("pos", "neg"):
            kept.append(e)
            labels.append(1.0 if flag == "pos" else 0.0)
    return kept, np.array(labels, dtype=np.float32)


def _multilabel_targets(entries, space: LabelSpace) -> tuple[np.ndarray, np.ndarray]:
    y = np.zeros((len(entries), len(space)), dtype=np.float32)
    m = np.zeros_like(y, dtype=bool)
    for i, e in enumerate(entries):
        for c, flag in (e.label_mask or {}).items():
            k = space.index(c)
            if flag in ("pos", "neg"):
                m[i, k] = True
                y[i, k] = flag == "pos"
    return y, m


def _clip(corpus: Corpus, entry: ManifestEntry, min_len: int) -> np.ndarray:
    x = corpus.waveform(entry).samples
    if len(x) < min_len:
        x = np.pad(x, (0, min_len - len(x)))
    return x


def _wave_batch(corpus: Corpus, entries, config: EncoderConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-padded waveform batch and the frame mask of each clip's own length."""
    clips = [_clip(corpus, e, config.min_input) for e in entries]
    n = max(len(c) for c in clips)
    x = np.zeros((len(clips), n), dtype=np.float32)
    frames = n // config.hop
    mask = np.zeros((len(clips), frames), dtype=bool)
    for i, c in enumerate(clips):
        x[i, :len(c)] = c
        mask[i, :len(c) // config.hop] = True
    return torch.from_numpy(x).unsqueeze(1), torch.from_numpy(mask)


def embed_entries(encoder: Encoder, corpus: Corpus, entries, cache: dict | None = None) -> np.ndarray:
    """Mean-pooled eval-mode embeddings, one clip at a time, optionally cached by encoder digest."""
    encoder.eval()
    digest = state_digest(encoder) if cache is not None else None
    out = []
    with torch.no_grad():
        for e in entries:
            key = (digest, corpus.name, e.id)
            if cache is not None and key in cache:
                out.append(cache[key])
                continue
            x = torch.from_numpy(_clip(corpus, e, encoder.config.min_input))[None, None]
            v = encoder(x)[0].mean(dim=0).numpy()
            if cache is not None:
                cache[key] = v
            out.append(v)
    return np.stack(out) if out else np.zeros((0, encoder.config.emb_dim), dtype=np.float32)


def _labels(corpus: Corpus, entries) -> np.ndarray:
    return np.array([corpus.label_index(e) for e in entries], dtype=np.int64)


def _require(entries, split: str):
    if not entries:
        raise DownstreamError(f"split {split!r} is empty")


# -- training -----------------------------------------------------------------

def _fit_pooled(X: np.ndarray, y: np.ndarray, Xv: np.ndarray, yv: np.ndarray, n_out: int, binary: bool,
                seed: int, settings: DownstreamSettings) -> tuple[Probe, EarlyStopping]:
    """Train a probe on precomputed pooled embeddings with early stopping.

    Inputs are standardized with training statistics while optimizing; the
    affine map is folded back into the returned layer, so the probe still
    consumes raw pooled embeddings.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = Probe(n_out, X.shape[1])
    opt = torch.optim.Adam(probe.parameters(), lr=settings.lr)
    mu, sd = _standardizer(X)
    X = torch.from_numpy(((X - mu) / sd).astype(np.float32))
    Xv = torch.from_numpy(((Xv - mu) / sd).astype(np.float32))
    y = torch.from_numpy(y)
    yv = torch.from_numpy(yv)

    def loss_fn(logits, target):
        if binary:
            return F.binary_cross_entropy_with_logits(logits[:, 0], target.float())
        return F.cross_entropy(logits, target)

    stopper = EarlyStopping(settings.patience, settings.max_epochs)
    rng = np.random.default_rng([seed, 17])
    while True:
        probe.train()
        for i in _batches(rng.permutation(len(X)), settings.batch_size):
            opt.zero_grad()
            loss_fn(probe(X[i]), y[i]).backward()
            opt.step()
        probe.eval()
        with torch.no_grad():
            vloss = float(loss_fn(probe(Xv), yv)) if len(Xv) else float(loss_fn(probe(X), y))
        if stopper.step(vloss, probe.state_dict):
            break
    probe.load_state_dict(stopper.best_state)
    _fold_standardizer(probe.fc, mu, sd)
    return probe, stopper


def _standardizer(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise DownstreamError("no training embeddings")
    sd = X.std(axis=0)
    # relative floor: dead dimensions stay finite without distorting tiny-scale encoders
    floor = max(float(sd.max()), 1e-30) * 1e-6
    return X.mean(axis=0), np.maximum(sd, floor)


def _fold_standardizer(fc: nn.Linear, mu: np.ndarray, sd: np.ndarray) -> None:
    # W (x - mu) / sd + b  ==  (W / sd) x + (b - W mu / sd)
    with torch.no_grad():
        w = fc.weight.double() / torch.from_numpy(sd)
        fc.bias.copy_(fc.bias.double() - w @ torch.from_numpy(mu))
        fc.weight.copy_(w)


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield torch.from_numpy(np.sort(order[i:i + size]))


def _frozen_trial(encoder, corpus, train, valid, test, probe_cfg, seed, settings, cache):
    Xtr = embed_entries(encoder, corpus, train, cache)
    Xv = embed_entries(encoder, corpus, valid, cache)
    Xte = embed_entries(encoder, corpus, test, cache)
    if probe_cfg.task == MULTICLASS:
        probe, stopper = _fit_pooled(Xtr, _labels(corpus, train), Xv, _labels(corpus, valid),
                                     probe_cfg.n_classes, False, seed, settings)
        with torch.no_grad():
            pred = probe(torch.from_numpy(Xte)).argmax(dim=1).numpy()
        truth = _labels(corpus, test)
        cm = confusion_matrix(pred, truth, probe_cfg.n_classes)
        return per_class_f1(pred, truth, probe_cfg.n_classes), cm, stopper.epoch, stopper.best_epoch
    # one independent binary probe per class, each on its confidently labelled entries
    space = corpus.space
    f1s, epochs, best = [], 0, 0
    for k in range(len(space)):
        parts = []
        for entries, X in ((train, Xtr), (valid, Xv), (test, Xte)):
            kept, lab = multilabel_masked_batch(entries, space, k)
            pos = {e.id: i for i, e in enumerate(entries)}
            parts.append((X[[pos[e.id] for e in kept]] if kept else X[:0], lab))
        (a, ya), (b, yb), (c, yc) = parts
        if len(a) == 0:
            f1s.append(0.0)
            continue
        probe, stopper = _fit_pooled(a, ya, b, yb, 1, True, seed * 1009 + k, settings)
        with torch.no_grad():
            p = (torch.sigmoid(probe(torch.from_numpy(c))[:, 0]) >= settings.threshold).numpy()
        f1s.append(float(per_class_f1(p[:, None], yc[:, None] > 0.5)[0]) if len(c) else 0.0)
        epochs, best = max(epochs, stopper.epoch), max(best, stopper.best_epoch)
    return np.array(f1s), None, epochs, best


def _trainable_trial(encoder, corpus, train, valid, test, probe_cfg, seed, settings):
    """Encoder and probe optimized jointly (supervised and fine-tuned scenarios)."""
    multilabel = probe_cfg.task == MULTILABEL
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = Probe(probe_cfg.n_classes, encoder.config.emb_dim)
    params = list(encoder.parameters()) + list(probe.parameters())
    opt = torch.optim.Adam(params, lr=settings.lr)
    config = encoder.config
    if multilabel:
        targets = {id(s): _multilabel_targets(s, corpus.space) for s in (train, valid, test)}
    else:
        targets = {id(s): (_labels(corpus, s), None) for s in (train, valid, test)}

    def loss_fn(logits, y, m):
        if multilabel:
            raw = F.binary_cross_entropy_with_logits(logits, y, reduction="none")
            return (raw * m).sum() / m.sum().clamp_min(1.0)
        return F.cross_entropy(logits, y)

    def run(split, idx):
        x, mask = _wave_batch(corpus, [split[i] for i in idx], config)
        y, m = targets[id(split)]
        y = torch.from_numpy(y[idx])
        m = None if m is None else torch.from_numpy(m[idx]).float()
        return probe(encoder(x), mask), y, m

    def evaluate(split):
        encoder.eval()
        probe.eval()
        total, logits = 0.0, []
        with torch.no_grad():
            for idx in _batches(np.arange(len(split)), settings.batch_size):
                out, y, m = run(split, idx.numpy())
                total += float(loss_fn(out, y, m)) * len(idx)
                logits.append(out)
        return total / max(len(split), 1), torch.cat(logits) if logits else None

    stopper = EarlyStopping(settings.patience, settings.max_epochs)
    rng = np.random.default_rng([seed, 17])
    state = lambda: (encoder.state_dict(), probe.state_dict())
    while True:
        encoder.train()
        probe.train()
        for idx in _batches(rng.permutation(len(train)), settings.batch_size):
            opt.zero_grad()
            out, y, m = run(train, idx.numpy())
            loss_fn(out, y, m).backward()
            opt.step()
        vloss, _ = evaluate(valid if valid else train)
        if stopper.step(vloss, state):
            break
    enc_state, probe_state = stopper.best_state
    encoder.load_state_dict(enc_state)
    probe.load_state_dict(probe_state)
    _, logits = evaluate(test)
    if multilabel:
        y, m = targets[id(test)]
        pred = (torch.sigmoid(logits) >= settings.threshold).numpy()
        return per_class_f1(pred, y > 0.5, mask=m), None, stopper.epoch, stopper.best_epoch
    pred = logits.argmax(dim=1).numpy()
    truth = targets[id(test)][0]
    cm = confusion_matrix(pred, truth, probe_cfg.n_classes)
    return per_class_f1(pred, truth, probe_cfg.n_classes), cm, stopper.epoch, stopper.best_epoch


def train_downstream(scenario, corpus: Corpus, checkpoint=None, seed: int = 0, *,
                     probe: ProbeConfig | None = None, train_entries=None,
                     encoder_config: EncoderConfig | None = None,
                     settings: DownstreamSettings = DownstreamSettings(),
                     cache: dict | None = None, trial: int = 0) -> TrialResult:
    """Train one probe under ``scenario`` and score macro F1 on the test split.

    ``checkpoint`` is a pre-training ``Checkpoint`` (required for frozen and
    fine-tuned, rejected for supervised). ``train_entries`` overrides the
    training split, e.g. with a subsample.
    """
    scenario = Scenario(scenario)
    if scenario is Scenario.SUPERVISED and checkpoint is not None:
        raise DownstreamError("the supervised scenario trains from random initialization; do not pass a checkpoint")
    if scenario is not Scenario.SUPERVISED and checkpoint is None:
        raise DownstreamError(f"the {scenario.value} scenario needs a pre-trained checkpoint")
    if corpus.space is None:
        raise DownstreamError("corpus has no label space")
    probe = probe or ProbeConfig(len(corpus.space), corpus.space.kind)
    train = list(corpus.split("train") if train_entries is None else train_entries)
    valid, test = corpus.split("valid"), corpus.split("test")
    _require(train, "train")
    _require(test, "test")

    if scenario is Scenario.SUPERVISED:
        encoder = build_encoder(encoder_config or default_config(), seed)
    else:
        encoder = checkpoint.build_encoder()
    before = state_digest(encoder)

    if scenario is Scenario.FROZEN:
        for p in encoder.parameters():
            p.requires_grad_(False)
        per_class, cm, epochs, best = _frozen_trial(encoder, corpus, train, valid, test, probe, seed, settings, cache)
    else:
        per_class, cm, epochs, best = _trainable_trial(encoder, corpus, train, valid, test, probe, seed, settings)
    after = state_digest(encoder)
    if scenario is Scenario.FROZEN and after != before:
        raise DownstreamError("frozen encoder parameters changed during probe training")
    result = TrialResult(trial=trial, seed=seed, macro_f1=float(np.mean(per_class)), per_class=per_class,
                         n_train=len(train), epochs=epochs, best_epoch=best, confusion=cm,
                         encoder_digest_before=before, encoder_digest_after=after,
                         init_digest=before)
    log.info("%s trial %d seed %d: macro F1 %.4f (%d epochs, best %d)", scenario.value, trial, seed,
             result.macro_f1, epochs, best)
    return result


def run_trials(scenario, corpus: Corpus, checkpoint=None, n_trials: int = 10, seed0: int = 0,
               subsample: int | None = None, **kwargs) -> TrialReport:
    """Repeat ``train_downstream`` with seeds ``seed0 .. seed0 + n_trials - 1``."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    scenario = Scenario(scenario)
    if corpus.space is None:
        raise DownstreamError("corpus has no label space")
    kwargs.setdefault("cache", {})
    report = TrialReport(scenario.value, list(corpus.space.classes))
    for t in range(n_trials):
        seed = seed0 + t
        train = None
        if subsample is not None:
            train = subsample_split(corpus.entries, "train", subsample, [seed, 4242], corpus.space)
        report.trials.append(train_downstream(scenario, corpus, checkpoint, seed, train_entries=train,
                                              trial=t, **kwargs))
    return report
