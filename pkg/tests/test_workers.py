import pytest
import torch

from mtss.encoder import desk_config
from mtss.features import Worker
from mtss.workers import (
    PretextModel,
    RegressionHead,
    WaveformDecoder,
    build_head,
    regression_head_forward,
    worker_loss,
)


def test_regression_head_shapes():
    head = RegressionHead(1025)
    assert head(torch.zeros(2, 100, 512)).shape == (2, 1025, 100)


def test_head_for_each_worker():
    cfg = desk_config()
    for w, dim in [("L", 1025), ("P", 4), ("M", 20), ("C", 12), ("T", 384)]:
        assert build_head(w, cfg)(torch.zeros(1, 3, 512)).shape == (1, dim, 3)
    assert isinstance(build_head("W", cfg), WaveformDecoder)
    with pytest.raises(ValueError, match="decoder"):
        regression_head_forward(torch.zeros(1, 3, 512), "W")


def test_zero_embedding_zero_bias_head_is_zero():
    head = RegressionHead(4)
    assert not head(torch.zeros(1, 5, 512)).any()


def test_decoder_upsamples_to_hop():
    dec = WaveformDecoder(desk_config()).eval()
    with torch.no_grad():
        assert dec(torch.randn(2, 100, 512)).shape == (2, 1, 16000)
        assert dec(torch.randn(1, 13, 512)).shape == (1, 1, 2080)


def test_losses():
    p = torch.tensor([[[1.0, 2.0, 3.0]]])
    t = torch.tensor([[[0.0, 0.0, 0.0, 9.0]]])
    assert worker_loss(p, t, Worker.W).item() == pytest.approx(2.0)  # MAE over the shared 3 samples
    assert worker_loss(p, t, Worker.L).item() == pytest.approx(14 / 3)  # MSE
    assert worker_loss(t, t, "T").item() == 0.0
    with pytest.raises(ValueError, match="incompatible"):
        worker_loss(torch.zeros(1, 2, 3), torch.zeros(1, 3, 3), "L")


def test_model_forward_outputs():
    model = PretextModel(desk_config(), "WLPT", seed=0).eval()
    with torch.no_grad():
        emb, preds = model(torch.zeros(2, 1, 16000))
    assert emb.shape == (2, 100, 512)
    assert preds[Worker.W].shape == (2, 1, 16000)
    assert preds[Worker.T].shape == (2, 384, 100)


def test_worker_isolation_of_initialization():
    full = PretextModel(desk_config(), "WLPT", seed=3).state_dict()
    part = PretextModel(desk_config(), "WLP", seed=3).state_dict()
    assert set(part) < set(full)
    assert all(torch.equal(full[k], v) for k, v in part.items())


def test_requires_a_worker():
    with pytest.raises(ValueError):
        PretextModel(desk_config(), "", seed=0)
