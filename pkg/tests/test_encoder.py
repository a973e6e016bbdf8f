import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtss.encoder import (
    PASE,
    PASE_PLUS,
    Encoder,
    EncoderConfig,
    build_encoder,
    count_params,
    default_config,
    desk_config,
    encoder_forward,
)


def closed_form_params(cfg: EncoderConfig) -> int:
    """Parameter count written out layer by layer, independent of torch's bookkeeping."""
    total = 2 * cfg.sinc_filters  # f_low and bandwidth per filter
    cin = cfg.sinc_filters
    for k, c in zip(cfg.kernels, cfg.channels):
        total += cin * c * k + c  # conv weight + bias
        total += 2 * c  # BN gamma, beta
        total += c  # PReLU slope per channel
        cin = c
    if cfg.variant == PASE_PLUS:
        if cfg.skip_connections:
            total += sum(c * cfg.emb_dim + cfg.emb_dim for c in cfg.channels)
        total += 3 * cfg.qrnn_hidden * (cfg.emb_dim * 2 + 1)  # width-2 gate conv for z, f, o
    return total


def test_full_parameter_counts():
    pase, plus = default_config(PASE), default_config(PASE_PLUS)
    assert count_params(pase) == closed_form_params(pase) == 5_766_528
    assert count_params(plus) == closed_form_params(plus) == 8_294_784
    assert 5.5e6 <= count_params(pase) <= 6.5e6
    assert 7.5e6 <= count_params(plus) <= 8.5e6


def test_desk_config_keeps_contract():
    for variant in (PASE, PASE_PLUS):
        cfg = desk_config(variant)
        assert cfg.hop == 160 and cfg.emb_dim == 512 and len(cfg.kernels) == 7
        assert count_params(cfg) == closed_form_params(cfg)


@pytest.fixture(scope="module")
def desk_plus():
    return build_encoder(desk_config(PASE_PLUS), seed=0).eval()


@settings(max_examples=12)
@given(st.integers(2048, 48000))
def test_frame_law(desk_plus, n):
    with torch.no_grad():
        out = desk_plus(torch.zeros(1, 1, n))
    assert out.shape == (1, n // 160, 512)


@pytest.mark.parametrize("n,frames", [(2048, 12), (16159, 100), (16000, 100), (48000, 300)])
def test_frame_examples(desk_plus, n, frames):
    with torch.no_grad():
        assert desk_plus(torch.zeros(2, n)).shape == (2, frames, 512)


def test_short_input_rejected(desk_plus):
    with pytest.raises(ValueError, match="shorter than 2048"):
        desk_plus(torch.zeros(1, 1, 2047))


def test_zero_input_gives_zero_embeddings(desk_plus):
    with torch.no_grad():
        out = desk_plus(torch.zeros(1, 1, 4800))
    assert not out.any()


def test_temporal_homogeneity_pase():
    enc = build_encoder(desk_config(PASE), seed=1).double().eval()
    x = torch.randn(1, 1, 16000 + 160 * 20, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    k = 7
    with torch.no_grad():
        a = enc(x[..., : 16000])
        b = enc(x[..., 160 * k: 160 * k + 16000])
    # interior frames, away from the padded edges, see identical receptive fields
    np.testing.assert_allclose(b[0, 20:60].numpy(), a[0, 20 + k:60 + k].numpy(), atol=1e-4)


def test_seeded_build_is_deterministic():
    a = build_encoder(desk_config(), seed=5).state_dict()
    b = build_encoder(desk_config(), seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_functional_forward_matches_module(desk_plus):
    x = torch.randn(1, 1, 4000)
    with torch.no_grad():
        ref = desk_plus(x)
        out = encoder_forward(x, desk_plus.config, desk_plus.state_dict())
    assert torch.equal(ref, out)


def test_config_validation_and_roundtrip():
    cfg = default_config(PASE_PLUS)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="stride product"):
        EncoderConfig(strides=(10, 2, 1, 2, 1, 2, 1)).validate()
    with pytest.raises(ValueError, match="odd"):
        EncoderConfig(sinc_width=250)
    with pytest.raises(ValueError, match="unknown encoder variant"):
        EncoderConfig(variant="PASE++")
