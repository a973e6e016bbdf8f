"""Manifest-described corpora and a synthetic desk-scale corpus generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, Waveform, load_audio, save_audio

SPLITS = ("train", "valid", "test")
MULTICLASS = "multiclass"
MULTILABEL = "multilabel_masked"
MASK_VALUES = ("pos", "neg", "unknown")
TEMPO_BPM = (60.0, 90.0, 120.0, 150.0)
KINDS = ("tempo", "timbre", "pitchset", "genre")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    audio: str
    duration_s: float
    split: str
    labels: list[str] | None = None
    label_mask: dict[str, str] | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "audio": self.audio, "duration_s": self.duration_s, "split": self.split}
        if self.labels is not None:
            d["labels"] = list(self.labels)
        if self.label_mask is not None:
            d["label_mask"] = dict(self.label_mask)
        return d


@dataclass
class LabelSpace:
    kind: str
    classes: list[str]

    def __post_init__(self):
        if self.kind not in (MULTICLASS, MULTILABEL):
            raise ManifestError(f"unknown label space kind {self.kind!r}")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError("label space classes must be unique")
        self.classes = list(self.classes)

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ManifestError(f"label {label!r} not in label space") from None

    def __len__(self):
        return len(self.classes)


def _parse_entry(obj: dict, lineno: int) -> ManifestEntry:
    try:
        entry = ManifestEntry(
            id=str(obj["id"]),
            audio=str(obj["audio"]),
            duration_s=float(obj["duration_s"]),
            split=str(obj["split"]),
            labels=None if obj.get("labels") is None else [str(x) for x in obj["labels"]],
            label_mask=None if obj.get("label_mask") is None else {str(k): str(v) for k, v in obj["label_mask"].items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: malformed entry ({exc})") from None
    if entry.split not in SPLITS:
        raise ManifestError(f"line {lineno}: unknown split {entry.split!r}")
    if entry.duration_s <= 0:
        raise ManifestError(f"line {lineno}: duration_s must be positive")
    if entry.label_mask:
        bad = [v for v in entry.label_mask.values() if v not in MASK_VALUES]
        if bad:
            raise ManifestError(f"line {lineno}: mask values must be one of {MASK_VALUES}")
    return entry


def read_manifest(path) -> tuple[list[ManifestEntry], LabelSpace | None]:
    """Parse a JSON-lines manifest with an optional label-space header line."""
    entries: list[ManifestEntry] = []
    space = None
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"line {lineno}: expected a JSON object")
            if "label_space" in obj:
                if entries or space is not None:
                    raise ManifestError(f"line {lineno}: label_space header must be the first line")
                ls = obj["label_space"]
                try:
                    space = LabelSpace(ls["kind"], ls["classes"])
                except (KeyError, TypeError) as exc:
                    raise ManifestError(f"line {lineno}: malformed label_space ({exc})") from None
                continue
            entry = _parse_entry(obj, lineno)
            if entry.id in seen:
                raise ManifestError(f"line {lineno}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    if not entries:
        raise ManifestError("no entries")
    if space is None:
        space = infer_label_space(entries)
    _check_labels(entries, space)
    return entries, space


def infer_label_space(entries) -> LabelSpace | None:
    if any(e.label_mask for e in entries):
        classes = sorted({c for e in entries for c in (e.label_mask or {})})
        return LabelSpace(MULTILABEL, classes)
    if any(e.labels for e in entries):
        classes = sorted({c for e in entries for c in (e.labels or [])})
        return LabelSpace(MULTICLASS, classes)
    return None


def _check_labels(entries, space: LabelSpace | None):
    if space is None:
        return
    for e in entries:
        if space.kind == MULTICLASS and e.labels is not None:
            if len(e.labels) != 1:
                raise ManifestError(f"entry {e.id!r}: multiclass entries need exactly one label")
            space.index(e.labels[0])
        if space.kind == MULTILABEL and e.label_mask:
            for c in e.label_mask:
                space.index(c)


def write_manifest(path, entries, space: LabelSpace | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if space is not None:
            fh.write(json.dumps({"label_space": {"kind": space.kind, "classes": space.classes}}) + "\n")
        for e in entries:
            fh.write(json.dumps(e.to_json()) + "\n")
    return path


@dataclass
class Corpus:
    """Manifest entries plus lazy, cached audio loading relative to the manifest."""

    entries: list[ManifestEntry]
    space: LabelSpace | None
    root: Path
    name: str = "corpus"
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifest(cls, path) -> "Corpus":
        entries, space = read_manifest(path)
        path = Path(path)
        return cls(entries, space, path.parent, path.parent.name or path.stem)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.audio)
        return p if p.is_absolute() else self.root / p

    def waveform(self, entry: ManifestEntry) -> Waveform:
        if entry.id not in self._cache:
            self._cache[entry.id] = load_audio(self.path(entry))
        return self._cache[entry.id]

    def label_index(self, entry: ManifestEntry) -> int:
        if self.space is None or self.space.kind != MULTICLASS or not entry.labels:
            raise ManifestError(f"entry {entry.id!r} has no multiclass label")
        return self.space.index(entry.labels[0])


def subsample_split(entries, split: str, n: int, seed, space: LabelSpace | None = None) -> list[ManifestEntry]:
    """Random subset of ``n`` entries of ``split``, stratified for multiclass.

    The subset keeps manifest order, so ``n == len(split)`` returns the split.
    """
    pool = [e for e in entries if e.split == split]
    if n > len(pool):
        raise ValueError(f"requested {n} entries but split {split!r} has {len(pool)}")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    if space is not None and space.kind == MULTICLASS and all(e.labels for e in pool):
        groups: dict[str, list[int]] = {}
        for i, e in enumerate(pool):
            groups.setdefault(e.labels[0], []).append(i)
        keys = sorted(groups)
        sizes = np.array([len(groups[k]) for k in keys], dtype=float)
        quota = sizes * n / len(pool)
        alloc = np.floor(quota).astype(int)
        # largest remainder, ties broken by class order
        for j in np.argsort(-(quota - alloc), kind="stable")[: n - alloc.sum()]:
            alloc[j] += 1
        chosen = []
        for k, a in zip(keys, alloc):
            idx = groups[k]
            chosen.extend(rng.choice(idx, size=a, replace=False).tolist() if a < len(idx) else idx)
    else:
        chosen = rng.choice(len(pool), size=n, replace=False).tolist()
    return [pool[i] for i in sorted(chosen)]


# -- synthetic corpus ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    kind: str = "tempo"
    n_classes: int = 4
    per_class: tuple = (10, 5, 5)  # train, valid, test clips per class
    clip_s: float = 4.0
    noise: float = 0.01
    seed: int = 0
    sr: int = SAMPLE_RATE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; expected one of {KINDS}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.per_class) != 3 or min(self.per_class) < 0 or sum(self.per_class) == 0:
            raise ValueError("per_class must give (train, valid, test) counts")
        if self.clip_s <= 0:
            raise ValueError("clip_s must be positive")


def split_counts(total: int, fractions=(0.5, 0.25, 0.25)) -> tuple[int, int, int]:
    valid = int(total * fractions[1])
    test = int(total * fractions[2])
    return total - valid - test, valid, test


def tempo_bpms(n_classes: int) -> list[float]:
    if n_classes <= len(TEMPO_BPM):
        return list(TEMPO_BPM[:n_classes])
    return list(np.linspace(60.0, 180.0, n_classes))


def _timbre_envelope(cls: int, n_harm: int) -> np.ndarray:
    h = np.arange(1, n_harm + 1, dtype=float)
    slopes = (0.6, 1.4, 2.4, 0.9, 1.8, 3.0, 1.1, 2.0)
    amp = h ** -slopes[cls % len(slopes)]
    if cls % 2 == 1:
        amp[1::2] *= 0.1  # suppress even harmonics
    return amp / amp.max()


def _harmonic_tone(rng, f0, n, sr, envelope):
    t = np.arange(n) / sr
    out = np.zeros(n)
    for k, a in enumerate(envelope, 1):
        if k * f0 >= sr / 2 * 0.95:
            break
        out += a * np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    return out


def _click(rng, sr, cls_env=None):
    n = int(0.06 * sr)
    t = np.arange(n) / sr
    decay = rng.uniform(0.008, 0.03)
    if cls_env is None:
        freq = rng.uniform(300.0, 2500.0)
        burst = np.sin(2 * np.pi * freq * t) * 0.6 + rng.standard_normal(n) * 0.4
    else:
        burst = _harmonic_tone(rng, rng.uniform(150.0, 400.0), n, sr, cls_env)
        decay *= 3
    return burst * np.exp(-t / decay)


def _pulse_train(rng, n, sr, bpm, cls_env=None):
    out = np.zeros(n)
    period = 60.0 / (bpm * rng.uniform(0.98, 1.02))
    onset = rng.uniform(0, period)
    click = _click(rng, sr, cls_env)
    while onset * sr < n:
        start = int(round(onset * sr))
        seg = click[: n - start] * rng.uniform(0.8, 1.2)
        out[start:start + seg.size] += seg
        onset += period
    return out


def synth_clip(spec: SynthSpec, cls: int, rng) -> np.ndarray:
    n = int(round(spec.clip_s * spec.sr))
    sr = spec.sr
    if spec.kind == "tempo":
        x = _pulse_train(rng, n, sr, tempo_bpms(spec.n_classes)[cls])
    elif spec.kind == "genre":
        x = _pulse_train(rng, n, sr, tempo_bpms(spec.n_classes)[cls], _timbre_envelope(cls, 12))
    elif spec.kind == "timbre":
        x = np.zeros(n)
        env = _timbre_envelope(cls, 16)
        note = int(0.5 * sr)
        for start in range(0, n, note):
            seg = _harmonic_tone(rng, rng.uniform(110.0, 440.0), min(note, n - start), sr, env)
            fade = np.minimum(1.0, np.minimum(np.arange(seg.size), np.arange(seg.size)[::-1]) / (0.01 * sr))
            x[start:start + seg.size] = seg * fade
    else:  # pitchset: major triad on a class-specific root, random octave/voicing
        root = (cls * 7) % 12
        x = np.zeros(n)
        t = np.arange(n) / sr
        for interval in (0, 4, 7):
            midi = 48 + root + interval + 12 * int(rng.integers(0, 2))
            f = 440.0 * 2 ** ((midi - 69) / 12)
            x += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x = x / max(np.max(np.abs(x)), 1e-9) * rng.uniform(0.3, 0.9)
    x = x + spec.noise * rng.uniform(0.5, 1.5) * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def class_names(spec: SynthSpec) -> list[str]:
    if spec.kind in ("tempo", "genre"):
        return [f"{spec.kind}{int(round(b))}" for b in tempo_bpms(spec.n_classes)]
    return [f"{spec.kind}{c}" for c in range(spec.n_classes)]


def generate_synthetic_corpus(spec: SynthSpec, out_dir) -> Path:
    """Render WAVs under ``out_dir/audio`` and write ``out_dir/manifest.jsonl``."""
    out_dir = Path(out_dir)
    names = class_names(spec)
    entries = []
    for split, count in zip(SPLITS, spec.per_class):
        for cls, name in enumerate(names):
            for i in range(count):
                rng = np.random.default_rng([spec.seed, SPLITS.index(split), cls, i])
                x = synth_clip(spec, cls, rng)
                clip_id = f"{split}-{name}-{i:03d}"
                rel = f"audio/{clip_id}.wav"
                save_audio(out_dir / rel, Waveform(x, spec.sr))
                entries.append(ManifestEntry(clip_id, rel, len(x) / spec.sr, split, [name]))
    return write_manifest(out_dir / "manifest.jsonl", entries, LabelSpace(MULTICLASS, names))
