import json

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mtss.data import Corpus, SynthSpec, generate_synthetic_corpus
from mtss.features import Worker
from mtss.pretrain import (
    Checkpoint,
    LossHistory,
    LossWeights,
    PretrainConfig,
    PretrainError,
    PretextModel,
    _evaluate,
    compute_reweights,
    prepare_data,
    pretrain,
    reweighted_pipeline,
    total_loss,
)

WORKERS = ["W", "L", "P", "M", "C", "T"]


def history_from(valid_by_worker, epochs=10):
    hist = LossHistory()
    for e in range(epochs):
        hist.add({w: (1.0, v[e] if isinstance(v, list) else v) for w, v in valid_by_worker.items()})
    return hist


# -- loss combination ---------------------------------------------------------

def test_total_loss_examples():
    assert total_loss({"W": 1.0, "L": 2.0, "P": 3.0}, LossWeights.equal("WLP")) == 6.0
    assert total_loss({"T": 0.5}, LossWeights({"T": 20.0}, "reweighted")) == 10.0
    with pytest.raises(ValueError):
        total_loss({}, LossWeights.equal("W"))
    with pytest.raises(KeyError, match="T"):
        total_loss({"T": 1.0}, LossWeights.equal("WL"))


@given(st.dictionaries(st.sampled_from(WORKERS), st.tuples(st.floats(1e-3, 1e3), st.floats(0, 1e3)), min_size=1),
       st.sampled_from(WORKERS), st.floats(0.1, 10))
def test_total_loss_is_linear(entries, worker, c):
    weights = LossWeights({w: wt for w, (wt, _) in entries.items()}, "reweighted")
    losses = {w: l for w, (_, l) in entries.items()}
    base = total_loss(losses, weights)
    if worker in losses:
        bumped = dict(losses, **{worker: losses[worker] + c})
        assert total_loss(bumped, weights) == pytest.approx(base + weights[worker] * c, rel=1e-9, abs=1e-9)
        scaled = dict(losses, **{worker: losses[worker] * c})
        single = weights[worker] * losses[worker]
        assert total_loss(scaled, weights) == pytest.approx(base + (c - 1) * single, rel=1e-9, abs=1e-9)


def test_loss_weights_invariants():
    with pytest.raises(ValueError):
        LossWeights({"W": 0.0}, "reweighted")
    with pytest.raises(ValueError):
        LossWeights({"W": 2.0}, "equal")
    assert LossWeights.equal("WLP").mechanism == "equal"


# -- re-weighting ---------------------------------------------------------------

def test_reweights_reciprocal_examples():
    w = compute_reweights(history_from({"W": 0.5, "L": 5.0, "T": 0.05}))
    assert w.mechanism == "reweighted"
    assert w["W"] == 2.0 and w["L"] == 0.2 and w["T"] == 20.0
    u = compute_reweights(history_from({"W": 4.0, "L": 4.0}))
    assert u["W"] == u["L"] == 0.25


def test_reweights_use_first_k_mean():
    hist = history_from({"L": [2.0, 4.0] + [100.0] * 8})
    assert compute_reweights(hist, first_k=2)["L"] == pytest.approx(1 / 3.0)


def test_reweights_errors():
    with pytest.raises(ValueError, match="10 epochs"):
        compute_reweights(history_from({"W": 1.0}, epochs=9))
    with pytest.raises(PretrainError, match="zero mean"):
        compute_reweights(history_from({"W": 1.0, "L": 0.0}))


def test_reweights_normalization_flag():
    w = compute_reweights(history_from({"W": 0.5, "L": 5.0}), normalize=True)
    assert sum(w.weights.values()) == pytest.approx(2.0)
    assert w["W"] / w["L"] == pytest.approx(10.0)


@given(st.dictionaries(st.sampled_from(WORKERS), st.lists(st.floats(1e-3, 1e3), min_size=10, max_size=10),
                       min_size=1),
       st.integers(-8, 8), st.floats(0.01, 100))
def test_reweights_scaling_and_order(losses, k, c):
    base = compute_reweights(history_from(losses))
    w = next(iter(losses))
    # powers of two scale every float exactly, so the reciprocal scales exactly too
    p2 = dict(losses, **{w: [v * 2.0 ** k for v in losses[w]]})
    assert compute_reweights(history_from(p2))[w] == base[w] / 2.0 ** k
    gen = dict(losses, **{w: [v * c for v in losses[w]]})
    assert compute_reweights(history_from(gen))[w] == pytest.approx(base[w] / c, rel=1e-12)
    reordered = dict(reversed(list(losses.items())))
    assert compute_reweights(history_from(reordered)).weights == base.weights


# -- training ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tiny_corpus):
    return Corpus.from_manifest(tiny_corpus)


def small(workers="WLP", **kw):
    kw.setdefault("batch_size", 8)
    kw.setdefault("epochs", 2)
    return PretrainConfig(workers=workers, **kw)


def test_two_epoch_run_bookkeeping(corpus, tmp_path):
    cfg = small()
    ck = pretrain(cfg, prepare_data(cfg, corpus), out=tmp_path / "ck")
    assert len(ck.history) == 2 and ck.history.workers == (Worker.W, Worker.L, Worker.P)
    assert all(np.isfinite(ck.history.valid(w)).all() for w in "WLP")
    lines = (tmp_path / "ck" / "losses.csv").read_text().splitlines()
    assert lines[0] == "epoch,worker,train_loss,valid_loss" and len(lines) == 1 + 2 * 3
    back = Checkpoint.load(tmp_path / "ck")
    assert back.param_digest() == ck.param_digest() and back.history == ck.history
    assert back.encoder_digest() == ck.encoder_digest()


def test_rerun_is_bit_identical(corpus):
    cfg = small("WL", epochs=1)
    data = prepare_data(cfg, corpus)
    a, b = pretrain(cfg, data), pretrain(cfg, data)
    assert a.history.to_csv() == b.history.to_csv()
    assert a.param_digest() == b.param_digest()


def test_checkpoint_tamper_detection(corpus, tmp_path):
    cfg = small("L", epochs=1)
    pretrain(cfg, prepare_data(cfg, corpus), out=tmp_path / "ck")
    meta_path = tmp_path / "ck" / "meta"
    meta = json.loads(meta_path.read_text())
    meta["config"]["lr"] = 1.0
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(PretrainError, match="config digest"):
        Checkpoint.load(tmp_path / "ck")
    with pytest.raises(PretrainError, match="unreadable"):
        Checkpoint.load(tmp_path / "missing")


def test_validation_uses_eval_mode(corpus):
    cfg = small("WLP")
    data = prepare_data(cfg, corpus)
    model = PretextModel(cfg.encoder, cfg.workers, cfg.extraction, cfg.seed)
    first = _evaluate(model, data, cfg)
    second = _evaluate(model, data, cfg)
    assert first == second  # no running-stat updates between validations


def test_worker_isolation_at_initialization(corpus):
    full, part = small("WLPT"), small("WLP")
    data = prepare_data(full, corpus)
    a = _evaluate(PretextModel(full.encoder, full.workers, full.extraction, 0), data, full)
    b = _evaluate(PretextModel(part.encoder, part.workers, part.extraction, 0), data, part)
    assert all(a[w] == b[w] for w in part.workers)


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(workers="")
    with pytest.raises(ValueError, match="multiple of 160"):
        PretrainConfig(chunk_len=16001)
    with pytest.raises(ValueError, match="missing weights"):
        PretrainConfig(workers="WL", weighting=LossWeights({"W": 1.0}, "reweighted"))
    cfg = PretrainConfig(workers="WLPT", crops_per_clip=2)
    assert PretrainConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


def test_overfit_smoke(tmp_path):
    # noise-free clips: a noise floor would add an irreducible term to the LPS loss
    spec = SynthSpec(kind="tempo", n_classes=2, per_class=(4, 2, 2), clip_s=1.5, seed=3, noise=0.0)
    corpus = Corpus.from_manifest(generate_synthetic_corpus(spec, tmp_path))
    cfg = small("L", epochs=50, lr=1e-3)
    ck = pretrain(cfg, prepare_data(cfg, corpus))
    train = ck.history.train("L")
    assert train[-1] <= 0.3 * train[0], train[::10]


def test_reweighted_pipeline(corpus, tmp_path):
    cfg = small("WLPT", epochs=1, normalize_targets=False)
    ck = reweighted_pipeline(cfg, corpus, out=tmp_path / "rw")
    w = ck.weights
    assert w.mechanism == "reweighted" and ck.lineage != ck.extra["phase1_lineage"]
    phase1 = LossHistory.from_csv(ck.extra["phase1_history"])
    assert len(phase1) == 10 and len(ck.history) == 1
    means = {x: np.mean(phase1.valid(x)) for x in "WLPT"}
    for a in "WLPT":
        assert w[a] == pytest.approx(1 / means[a], rel=1e-12)
        for b in "WLPT":
            if means[a] < means[b]:
                assert w[a] > w[b]
    # phase 3 starts from the same seed-derived initialization, not from phase-1 parameters
    fresh = PretextModel(cfg.encoder, cfg.workers, cfg.extraction, cfg.seed)
    from mtss.nn import state_digest
    assert ck.init_digest == state_digest(fresh.encoder)
    assert (tmp_path / "rw_phase1" / "meta").exists()
