"""Multi-task pre-training: weighted worker losses, re-weighting, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .audio import Waveform, crop_start
from .encoder import EncoderConfig, desk_config
from .features import (
    DEFAULT_SPEC,
    ExtractionSpec,
    FeatureStats,
    RunningStats,
    Worker,
    extract_all,
    parse_workers,
    read_feature,
    read_stats,
    workers_label,
    write_stats,
)
from .nn import state_digest
from .workers import PretextModel, worker_loss

log = logging.getLogger(__name__)

EQUAL = "equal"
REWEIGHTED = "reweighted"


class PretrainError(RuntimeError):
    pass


@dataclass
class LossWeights:
    weights: dict
    mechanism: str = EQUAL

    def __post_init__(self):
        self.weights = {Worker(w): float(v) for w, v in self.weights.items()}
        if self.mechanism not in (EQUAL, REWEIGHTED):
            raise ValueError(f"unknown weighting mechanism {self.mechanism!r}")
        if any(not (v > 0 and math.isfinite(v)) for v in self.weights.values()):
            raise ValueError("loss weights must be positive and finite")
        if self.mechanism == EQUAL and any(v != 1.0 for v in self.weights.values()):
            raise ValueError("equal weighting requires every weight to be 1.0")

    @classmethod
    def equal(cls, workers) -> "LossWeights":
        return cls({w: 1.0 for w in parse_workers(workers)}, EQUAL)

    def __getitem__(self, worker):
        return self.weights[Worker(worker)]

    def to_dict(self) -> dict:
        return {"mechanism": self.mechanism, "weights": {w.value: v for w, v in sorted(self.weights.items())}}

    @classmethod
    def from_dict(cls, d) -> "LossWeights":
        return cls(d["weights"], d["mechanism"])


@dataclass
class LossHistory:
    """Per-epoch (train, valid) loss per worker; epochs numbered from 1."""

    epochs: list = field(default_factory=list)

    def add(self, losses: Mapping) -> None:
        row = {}
        for w, (tr, va) in losses.items():
            tr, va = float(tr), float(va)
            if not (math.isfinite(tr) and math.isfinite(va)) or tr < 0 or va < 0:
                raise ValueError(f"invalid losses for worker {w}: {tr}, {va}")
            row[Worker(w)] = (tr, va)
        self.epochs.append(row)

    def __len__(self):
        return len(self.epochs)

    @property
    def workers(self) -> tuple:
        return parse_workers(self.epochs[0]) if self.epochs else ()

    def valid(self, worker) -> list[float]:
        return [ep[Worker(worker)][1] for ep in self.epochs]

    def train(self, worker) -> list[float]:
        return [ep[Worker(worker)][0] for ep in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "worker", "train_loss", "valid_loss"])
        for i, ep in enumerate(self.epochs, 1):
            for w in parse_workers(ep):
                tr, va = ep[w]
                writer.writerow([i, w.value, repr(tr), repr(va)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossHistory":
        hist = cls()
        rows: dict[int, dict] = {}
        for r in csv.DictReader(io.StringIO(text)):
            rows.setdefault(int(r["epoch"]), {})[r["worker"]] = (float(r["train_loss"]), float(r["valid_loss"]))
        for epoch in sorted(rows):
            if epoch != len(hist) + 1:
                raise ValueError("loss history epochs must be contiguous from 1")
            hist.add(rows[epoch])
        return hist


def total_loss(per_worker: Mapping, weights: LossWeights):
    """Weighted sum of per-worker losses (floats or tensors)."""
    if not per_worker:
        raise ValueError("no worker losses to combine")
    total = 0.0
    for w, loss in per_worker.items():
        w = Worker(w)
        if w not in weights.weights:
            raise KeyError(f"no loss weight for worker {w.value}")
        total = total + weights.weights[w] * loss
    return total


def compute_reweights(history: LossHistory, first_k: int = 10, normalize: bool = False) -> LossWeights:
    """Reciprocal of each worker's mean validation loss over the first ``first_k`` epochs.

    With ``normalize`` the weights are rescaled to sum to the number of workers.
    """
    if first_k < 1:
        raise ValueError("first_k must be >= 1")
    if len(history) < first_k:
        raise ValueError(f"need {first_k} epochs of history, have {len(history)}")
    weights = {}
    for w in history.workers:
        mean = float(np.mean(history.valid(w)[:first_k]))
        if mean == 0:
            raise PretrainError(f"worker {w.value} has zero mean validation loss; refusing to re-weight")
        weights[w] = 1.0 / mean
    if normalize:
        scale = len(weights) / sum(weights.values())
        weights = {w: v * scale for w, v in weights.items()}
    return LossWeights(weights, REWEIGHTED)


@dataclass
class PretrainConfig:
    workers: tuple = ("W", "L", "P")
    weighting: LossWeights | None = None
    encoder: EncoderConfig = field(default_factory=desk_config)
    extraction: ExtractionSpec = DEFAULT_SPEC
    chunk_len: int = 16000
    batch_size: int = 32
    epochs: int = 10
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 5.0
    seed: int = 0
    normalize_targets: bool = True
    first_k: int = 10
    normalize_weights: bool = False
    crops_per_clip: int = 1  # random crops drawn from each train clip per epoch

    def __post_init__(self):
        self.workers = parse_workers(self.workers)
        if not self.workers:
            raise ValueError("at least one worker is required")
        if self.crops_per_clip < 1:
            raise ValueError("crops_per_clip must be at least 1")
        if self.chunk_len % self.encoder.hop:
            raise ValueError(f"chunk_len must be a multiple of {self.encoder.hop}")
        if self.weighting is None:
            self.weighting = LossWeights.equal(self.workers)
        missing = set(self.workers) - set(self.weighting.weights)
        if missing:
            raise ValueError(f"missing weights for {workers_label(missing)}")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self) -> dict:
        return {
            "workers": workers_label(self.workers),
            "weighting": self.weighting.to_dict(),
            "encoder": self.encoder.to_dict(),
            "extraction": {k: getattr(self.extraction, k) for k in self.extraction.__dataclass_fields__},
            "chunk_len": self.chunk_len,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr": self.lr,
            "betas": list(self.betas),
            "grad_clip": self.grad_clip,
            "seed": self.seed,
            "normalize_targets": self.normalize_targets,
            "first_k": self.first_k,
            "normalize_weights": self.normalize_weights,
            "crops_per_clip": self.crops_per_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["weighting"] = LossWeights.from_dict(d["weighting"])
        d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        d["extraction"] = ExtractionSpec(**d["extraction"])
        return cls(**d)

    def digest(self) -> str:
        return digest_of(self.to_dict())


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def stats_digest(stats: Mapping[Worker, FeatureStats] | None) -> str:
    h = hashlib.sha256()
    for w in sorted(stats or {}):
        s = stats[w]
        h.update(w.value.encode())
        h.update(np.asarray(s.mean, dtype="<f8").tobytes())
        h.update(np.asarray(s.std, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoint container ------------------------------------------------------

PARAMS_MAGIC = b"MTSP"
PARAMS_VERSION = 1


def write_params(path, state: Mapping[str, torch.Tensor]) -> None:
    """Tensor records: name, shape, little-endian f32 payload."""
    with open(path, "wb") as fh:
        names = [n for n in sorted(state) if state[n].is_floating_point()]
        fh.write(struct.pack("<4sII", PARAMS_MAGIC, PARAMS_VERSION, len(names)))
        for name in names:
            t = state[name].detach().cpu().to(torch.float32).contiguous()
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
            fh.write(t.numpy().astype("<f4").tobytes())


def read_params(path) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, count = struct.unpack_from("<4sII", raw)
    if magic != PARAMS_MAGIC or version != PARAMS_VERSION:
        raise ValueError(f"{path}: not a parameter file")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


@dataclass
class Checkpoint:
    config: PretrainConfig
    state: dict
    history: LossHistory
    epoch: int
    stats: dict = field(default_factory=dict)
    lineage: str = "pretrain"
    init_digest: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def workers(self):
        return self.config.workers

    @property
    def weights(self) -> LossWeights:
        return self.config.weighting

    def encoder_state(self) -> dict:
        prefix = "encoder."
        return {k[len(prefix):]: v for k, v in self.state.items() if k.startswith(prefix)}

    def build_model(self) -> PretextModel:
        model = PretextModel(self.config.encoder, self.config.workers, self.config.extraction, self.config.seed)
        model.load_state_dict(self.state, strict=False)
        return model

    def build_encoder(self):
        model = self.build_model()
        return model.encoder

    def param_digest(self) -> str:
        return state_digest({k: v for k, v in self.state.items() if v.is_floating_point()})

    def encoder_digest(self) -> str:
        """Digest of the encoder alone, comparable with ``state_digest(encoder)``."""
        return state_digest(self.build_encoder())

    def save(self, out) -> Path:
        out = Path(out)
        tmp = out.with_name(out.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        write_params(tmp / "params", self.state)
        for w, s in self.stats.items():
            write_stats(tmp / f"stats_{w.value}.mtss", s)
        (tmp / "losses.csv").write_text(self.history.to_csv())
        meta = {
            "format": "mtss-checkpoint/1",
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "epoch": self.epoch,
            "seed": self.seed,
            "workers": workers_label(self.workers),
            "weights": self.weights.to_dict(),
            "lineage": self.lineage,
            "init_digest": self.init_digest,
            "param_digest": self.param_digest(),
            "stats_digest": stats_digest(self.stats),
            "loss_history": self.history.to_csv(),
            "extra": self.extra,
        }
        (tmp / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
        return out

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            meta = json.loads((path / "meta").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PretrainError(f"{path}: unreadable checkpoint metadata ({exc})") from exc
        config = PretrainConfig.from_dict(meta["config"])
        if config.digest() != meta["config_digest"]:
            raise PretrainError(f"{path}: config digest mismatch (checkpoint was modified)")
        state = read_params(path / "params")
        stats = {}
        for f in sorted(path.glob("stats_*.mtss")):
            s = read_stats(f)
            stats[s.worker] = s
        ckpt = cls(config, state, LossHistory.from_csv(meta["loss_history"]), int(meta["epoch"]), stats,
                   meta.get("lineage", ""), meta.get("init_digest", ""), meta.get("extra", {}))
        if ckpt.param_digest() != meta["param_digest"]:
            raise PretrainError(f"{path}: parameter digest mismatch")
        return ckpt


# -- data ------------------------------------------------------------------------

@dataclass
class Clip:
    id: str
    wave: Waveform
    features: dict = field(default_factory=dict)


class PretrainData:
    """Train/valid clips with full-clip targets, computed once and cached."""

    def __init__(self, train: Sequence[Clip], valid: Sequence[Clip], workers, spec: ExtractionSpec,
                 chunk_len: int, stats: Mapping[Worker, FeatureStats] | None = None):
        if not train:
            raise PretrainError("empty train split")
        if not valid:
            raise PretrainError("empty valid split")
        self.workers = parse_workers(workers)
        self.spec = spec
        self.chunk_len = chunk_len
        self.train = [self._prepare(c) for c in train]
        self.valid = [self._prepare(c) for c in valid]
        self.stats = dict(stats) if stats else self._train_stats()

    def _prepare(self, clip: Clip) -> Clip:
        x = clip.wave.samples
        if x.shape[0] < self.chunk_len:
            x = np.pad(x, (0, self.chunk_len - x.shape[0]))
            clip = Clip(clip.id, Waveform(x, clip.wave.sample_rate), {})
        frame_workers = [w for w in self.workers if w is not Worker.W]
        missing = [w for w in frame_workers if w not in clip.features]
        if missing:
            feats = extract_all(clip.wave, missing, self.spec)
            clip.features.update({w: fm.values.astype(np.float32) for w, fm in feats.items()})
        return clip

    def _train_stats(self) -> dict:
        stats = {}
        for w in self.workers:
            if w is Worker.W:
                continue
            running = RunningStats()
            for clip in self.train:
                running.update(clip.features[w])
            s = running.finalize(w)
            # storage precision, so in-memory and feature-store runs normalize identically
            stats[w] = FeatureStats(w, s.mean.astype(np.float32).astype(np.float64),
                                    s.std.astype(np.float32).astype(np.float64))
        return stats

    def batch(self, clips: Sequence[Clip], seeds, normalize: bool):
        hop = self.spec.hop
        n_frames = self.chunk_len // hop
        waves, targets = [], {w: [] for w in self.workers}
        for clip, seed in zip(clips, seeds):
            x = clip.wave.samples
            start = crop_start(x.shape[0], self.chunk_len, seed, align=hop)
            crop = x[start:start + self.chunk_len]
            waves.append(crop)
            j = start // hop
            for w in self.workers:
                if w is Worker.W:
                    targets[w].append(crop[None, :])
                    continue
                t = clip.features[w][:, j:j + n_frames]
                if normalize:
                    t = self.stats[w].normalize(t)
                targets[w].append(t)
        x = torch.from_numpy(np.stack(waves)).unsqueeze(1)
        return x, {w: torch.from_numpy(np.stack(v).astype(np.float32)) for w, v in targets.items()}


def load_clips(corpus, split: str, feature_dir=None, workers=()) -> list[Clip]:
    clips = []
    for e in corpus.split(split):
        feats = {}
        if feature_dir is not None:
            for w in parse_workers(workers):
                f = Path(feature_dir) / "features" / f"{e.id}.{w.value}.mtss"
                if w is not Worker.W and f.exists():
                    feats[w] = read_feature(f).values
        clips.append(Clip(e.id, corpus.waveform(e), feats))
    return clips


def load_store_stats(feature_dir, workers) -> dict | None:
    if feature_dir is None:
        return None
    stats = {}
    for w in parse_workers(workers):
        if w is Worker.W:
            continue
        f = Path(feature_dir) / "stats" / f"{w.value}.mtss"
        if not f.exists():
            return None
        stats[w] = read_stats(f)
    return stats


# -- training ---------------------------------------------------------------------

def _evaluate(model: PretextModel, data: PretrainData, config: PretrainConfig) -> dict:
    model.eval()
    sums = {w: 0.0 for w in config.workers}
    count = 0
    with torch.no_grad():
        for i in range(0, len(data.valid), config.batch_size):
            clips = data.valid[i:i + config.batch_size]
            seeds = [[config.seed, 999_983, i + k] for k in range(len(clips))]
            x, targets = data.batch(clips, seeds, config.normalize_targets)
            _, preds = model(x)
            for w in config.workers:
                sums[w] += float(worker_loss(preds[w], targets[w], w)) * len(clips)
            count += len(clips)
    return {w: s / count for w, s in sums.items()}


def pretrain(config: PretrainConfig, data: PretrainData, out=None, lineage: str = "pretrain",
             callback: Callable[[int, dict], None] | None = None, extra: dict | None = None) -> Checkpoint:
    """Train encoder + worker heads on ``data``; returns the final checkpoint."""
    if set(config.workers) - set(data.workers):
        raise PretrainError("data was prepared for a different worker set")
    model = PretextModel(config.encoder, config.workers, config.extraction, config.seed)
    init_digest = state_digest(model.encoder)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    history = LossHistory()
    ckpt = Checkpoint(config, model.state_dict(), history, 0, data.stats, lineage, init_digest, dict(extra or {}))
    n = len(data.train) * config.crops_per_clip
    for epoch in range(1, config.epochs + 1):
        model.train()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        crop_seeds = rng.integers(0, 2**63 - 1, size=n)
        sums = {w: 0.0 for w in config.workers}
        for b in range(0, n, config.batch_size):
            idx = order[b:b + config.batch_size]
            x, targets = data.batch([data.train[i % len(data.train)] for i in idx],
                                    [int(crop_seeds[i]) for i in idx], config.normalize_targets)
            _, preds = model(x)
            losses = {w: worker_loss(preds[w], targets[w], w) for w in config.workers}
            for w, loss in losses.items():
                if not torch.isfinite(loss):
                    raise PretrainError(f"non-finite {w.value} loss at epoch {epoch}")
                sums[w] += float(loss.detach()) * len(idx)
            opt.zero_grad()
            total_loss(losses, config.weighting).backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
        valid = _evaluate(model, data, config)
        for w, v in valid.items():
            if not math.isfinite(v):
                raise PretrainError(f"non-finite {w.value} validation loss at epoch {epoch}")
        history.add({w: (sums[w] / n, valid[w]) for w in config.workers})
        log.info("epoch %d %s", epoch, " ".join(f"{w.value}={valid[w]:.4g}" for w in config.workers))
        ckpt = Checkpoint(config, {k: v.detach().clone() for k, v in model.state_dict().items()}, history,
                          epoch, data.stats, lineage, init_digest, dict(extra or {}))
        if out is not None:
            ckpt.save(out)
        if callback is not None:
            callback(epoch, valid)
    if out is not None and config.epochs == 0:
        ckpt.save(out)
    return ckpt


def prepare_data(config: PretrainConfig, corpus, feature_dir=None) -> PretrainData:
    train = load_clips(corpus, "train", feature_dir, config.workers)
    valid = load_clips(corpus, "valid", feature_dir, config.workers)
    stats = load_store_stats(feature_dir, config.workers)
    return PretrainData(train, valid, config.workers, config.extraction, config.chunk_len, stats)


def run_pretraining(config: PretrainConfig, corpus, out, feature_dir=None, data: PretrainData | None = None) -> Checkpoint:
    data = data or prepare_data(config, corpus, feature_dir)
    return pretrain(config, data, out)


def reweighted_pipeline(config: PretrainConfig, corpus=None, out=None, feature_dir=None,
                        data: PretrainData | None = None) -> Checkpoint:
    """Equal-weighted warm-up run, reciprocal re-weighting, then a fresh run."""
    data = data or prepare_data(config, corpus, feature_dir)
    phase1_cfg = replace(config, weighting=LossWeights.equal(config.workers), epochs=max(10, config.first_k))
    phase1_out = None if out is None else Path(str(out) + "_phase1")
    phase1 = pretrain(phase1_cfg, data, phase1_out, lineage="reweighted/phase1")
    weights = compute_reweights(phase1.history, config.first_k, config.normalize_weights)
    phase3_cfg = replace(config, weighting=weights)
    extra = {
        "phase1_history": phase1.history.to_csv(),
        "phase1_lineage": phase1.lineage,
        "phase1_config_digest": phase1_cfg.digest(),
    }
    return pretrain(phase3_cfg, data, out, lineage="reweighted/phase3", extra=extra)


def init_checkpoint(config: PretrainConfig, stats=None) -> Checkpoint:
    """Untrained, seed-initialized checkpoint (epoch 0)."""
    model = PretextModel(config.encoder, config.workers, config.extraction, config.seed)
    return Checkpoint(config, model.state_dict(), LossHistory(), 0, dict(stats or {}), "init",
                      state_digest(model.encoder))
