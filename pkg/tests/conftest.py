import numpy as np
import pytest
import torch
from hypothesis import settings

from mtss.audio import SAMPLE_RATE, Waveform
from mtss.data import SynthSpec, generate_synthetic_corpus

settings.register_profile("mtss", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("mtss")

torch.set_num_threads(1)


def sine(freq=440.0, seconds=1.0, amp=1.0, sr=SAMPLE_RATE, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform((amp * np.sin(2 * np.pi * freq * t + phase)).astype(np.float32), sr)


def click_train(bpm=120.0, seconds=4.0, sr=SAMPLE_RATE, width=80):
    x = np.zeros(int(seconds * sr), dtype=np.float32)
    period = int(round(60.0 / bpm * sr))
    for start in range(0, x.size, period):
        x[start:start + width] = np.hanning(width)[: x.size - start]
    return Waveform(x, sr)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two-class tempo corpus: 8 train / 4 valid / 4 test clips of 1.5 s."""
    out = tmp_path_factory.mktemp("tiny")
    spec = SynthSpec(kind="tempo", n_classes=2, per_class=(4, 2, 2), clip_s=1.5, seed=3)
    return generate_synthetic_corpus(spec, out)


@pytest.fixture
def criterion(record_property):
    """Record one acceptance line; the terminal summary prints them in order."""
    def record(number, title, passed, detail):
        record_property("criterion", (number, f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"))
    return record


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            for key, value in getattr(rep, "user_properties", ()):
                if key == "criterion" and getattr(rep, "when", "call") == "call":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
