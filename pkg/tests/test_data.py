import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtss.audio import load_audio
from mtss.data import (
    Corpus,
    LabelSpace,
    ManifestEntry,
    ManifestError,
    SynthSpec,
    generate_synthetic_corpus,
    read_manifest,
    split_counts,
    subsample_split,
    write_manifest,
)
from mtss.features import tempogram


def _write(path, lines):
    path.write_text("".join(json.dumps(l) + "\n" for l in lines))
    return path


def entry(i, split="train", label="a"):
    return {"id": f"c{i}", "audio": f"audio/c{i}.wav", "duration_s": 1.0, "split": split, "labels": [label]}


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="no entries"):
        read_manifest(_write(tmp_path / "e.jsonl", []))
    with pytest.raises(ManifestError, match="c1"):
        read_manifest(_write(tmp_path / "d.jsonl", [entry(1), entry(1)]))
    with pytest.raises(ManifestError, match="line 2: unknown split"):
        read_manifest(_write(tmp_path / "s.jsonl", [entry(1), entry(2, split="dev")]))
    (tmp_path / "m.jsonl").write_text(json.dumps(entry(1)) + "\n{not json\n")
    with pytest.raises(ManifestError, match="line 2"):
        read_manifest(tmp_path / "m.jsonl")


def test_manifest_three_entries(tmp_path):
    entries, space = read_manifest(_write(tmp_path / "ok.jsonl",
                                          [entry(1), entry(2, "valid", "b"), entry(3, "test")]))
    assert [e.split for e in entries] == ["train", "valid", "test"]
    assert space.kind == "multiclass" and space.classes == ["a", "b"]


def test_header_and_multilabel(tmp_path):
    lines = [{"label_space": {"kind": "multilabel_masked", "classes": ["x", "y"]}},
             {"id": "a", "audio": "a.wav", "duration_s": 2.0, "split": "train", "label_mask": {"x": "pos", "y": "unknown"}}]
    entries, space = read_manifest(_write(tmp_path / "ml.jsonl", lines))
    assert space.kind == "multilabel_masked" and entries[0].label_mask["x"] == "pos"
    lines[1]["label_mask"] = {"z": "pos"}
    with pytest.raises(ManifestError):
        read_manifest(_write(tmp_path / "bad.jsonl", lines))


def test_manifest_roundtrip(tmp_path):
    entries = [ManifestEntry(f"c{i}", f"c{i}.wav", 1.5, "train", ["a" if i % 2 else "b"]) for i in range(5)]
    space = LabelSpace("multiclass", ["a", "b"])
    back, space2 = read_manifest(write_manifest(tmp_path / "m.jsonl", entries, space))
    assert back == entries and space2 == space


@pytest.fixture(scope="module")
def tempo_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tempo")
    spec = SynthSpec(kind="tempo", n_classes=4, per_class=(5, 2, 2), clip_s=4.0, seed=11)
    return spec, generate_synthetic_corpus(spec, out)


def test_synth_bookkeeping(tempo_corpus):
    spec, path = tempo_corpus
    corpus = Corpus.from_manifest(path)
    assert len(corpus.entries) == 36 and corpus.space.classes == ["tempo60", "tempo90", "tempo120", "tempo150"]
    assert len(corpus.split("train")) == 20
    ids = [set(e.id for e in corpus.split(s)) for s in ("train", "valid", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    w = corpus.waveform(corpus.entries[0])
    assert w.sample_rate == 16000 and len(w) == 64000


def test_synth_is_deterministic(tempo_corpus, tmp_path):
    spec, path = tempo_corpus
    again = generate_synthetic_corpus(spec, tmp_path / "again")
    assert again.read_bytes() == path.read_bytes()
    a = sorted((path.parent / "audio").iterdir())
    b = sorted((again.parent / "audio").iterdir())
    digest = lambda files: hashlib.sha256(b"".join(f.read_bytes() for f in files)).hexdigest()
    assert digest(a) == digest(b)


def test_120bpm_clip_tempogram_peak(tempo_corpus):
    _, path = tempo_corpus
    corpus = Corpus.from_manifest(path)
    for e in corpus.entries:
        if e.labels == ["tempo120"]:
            T = tempogram(corpus.waveform(e)).values
            mid = T[:, T.shape[1] // 2]
            assert abs(25 + int(np.argmax(mid[25:])) - 50) <= 2


def tempogram_rule(wave, bpms):
    """No-learning classifier: the class whose beat lag best matches the mean tempogram."""
    T = tempogram(wave).values.mean(axis=1)
    lags = np.array([6000.0 / b for b in bpms])
    scores = [T[int(round(l)) - 1:int(round(l)) + 2].max() for l in lags]
    return int(np.argmax(scores))


def test_tempo_rule_accuracy(tempo_corpus):
    spec, path = tempo_corpus
    corpus = Corpus.from_manifest(path)
    bpms = [60.0, 90.0, 120.0, 150.0]
    hits = [tempogram_rule(corpus.waveform(e), bpms) == corpus.label_index(e) for e in corpus.entries]
    assert np.mean(hits) >= 0.95


@pytest.mark.parametrize("kind", ["timbre", "pitchset", "genre"])
def test_other_kinds_generate(kind, tmp_path):
    spec = SynthSpec(kind=kind, n_classes=3, per_class=(1, 1, 1), clip_s=2.0, seed=0)
    corpus = Corpus.from_manifest(generate_synthetic_corpus(spec, tmp_path))
    assert len(corpus.entries) == 9
    assert all(np.abs(corpus.waveform(e).samples).max() > 0.1 for e in corpus.entries)


def test_subsample_examples(tmp_path):
    entries = [ManifestEntry(f"c{i}", "x.wav", 1.0, "train", [f"k{i % 4}"]) for i in range(100)]
    space = LabelSpace("multiclass", ["k0", "k1", "k2", "k3"])
    sub = subsample_split(entries, "train", 40, 0, space)
    assert [sum(e.labels[0] == k for e in sub) for k in space.classes] == [10, 10, 10, 10]
    assert subsample_split(entries, "train", 100, 5, space) == entries
    assert subsample_split(entries, "train", 40, 7, space) == subsample_split(entries, "train", 40, 7, space)
    with pytest.raises(ValueError):
        subsample_split(entries, "train", 101, 0, space)


@given(st.integers(1, 60), st.integers(0, 10_000))
def test_subsample_properties(n, seed):
    entries = [ManifestEntry(f"c{i}", "x.wav", 1.0, "train", [f"k{i % 3}"]) for i in range(60)]
    sub = subsample_split(entries, "train", n, seed, LabelSpace("multiclass", ["k0", "k1", "k2"]))
    assert len(sub) == n and len({e.id for e in sub}) == n
    counts = [sum(e.labels[0] == k for e in sub) for k in ("k0", "k1", "k2")]
    assert max(counts) - min(counts) <= 1


def test_split_counts():
    assert split_counts(20) == (10, 5, 5)
    assert sum(split_counts(13)) == 13
