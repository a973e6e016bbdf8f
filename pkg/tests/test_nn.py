import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mtss.encoder import PASE_PLUS, Encoder, EncoderConfig
from mtss.nn import (
    QRNN,
    SameConv1d,
    SincConv,
    UpConv1d,
    batch_norm_forward,
    conv1d_forward,
    conv1d_transpose_forward,
    fo_pool,
    gradient_check,
    prelu_forward,
    qrnn_forward,
    same_padding,
    sinc_kernel,
    state_digest,
)
from mtss.workers import RegressionHead

TOL = 1e-3


def rand(*shape, seed=0, requires_grad=True):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64).requires_grad_(requires_grad)


def projected(out, seed=99):
    # random projection gives a scalar whose gradient exercises every output entry
    return (out * rand(*out.shape, seed=seed, requires_grad=False)).sum()


def assert_grads_ok(errors):
    bad = {k: v for k, v in errors.items() if not v <= TOL}
    assert not bad, f"gradient mismatch: {bad}"


# -- forward oracles ------------------------------------------------------------

def naive_conv1d(x, w, b, stride):
    B, C, T = x.shape
    O, _, K = w.shape
    n = (T - K) // stride + 1
    out = np.zeros((B, O, n))
    for i in range(n):
        seg = x[:, :, i * stride:i * stride + K]
        out[:, :, i] = np.einsum("bck,ock->bo", seg, w) + b
    return out


def test_conv1d_matches_naive():
    x, w, b = rand(2, 3, 17), rand(4, 3, 5, seed=1), rand(4, seed=2)
    out = conv1d_forward(x, w, b, stride=2).detach().numpy()
    np.testing.assert_allclose(out, naive_conv1d(x.detach().numpy(), w.detach().numpy(), b.detach().numpy(), 2),
                               rtol=1e-10, atol=1e-10)


def test_conv1d_examples():
    x = torch.tensor([[[1.0, 2.0, 3.0]]])
    assert conv1d_forward(x, torch.ones(1, 1, 1)).tolist() == [[[1.0, 2.0, 3.0]]]
    with pytest.raises(ValueError, match="shorter than kernel"):
        conv1d_forward(torch.zeros(1, 1, 3), torch.zeros(1, 1, 5))
    with pytest.raises(ValueError, match="channel mismatch"):
        conv1d_forward(torch.zeros(1, 2, 8), torch.zeros(1, 3, 3))


def naive_fo_pool(z, f, o):
    c = np.zeros(z.shape[:-1])
    hs = []
    for t in range(z.shape[-1]):
        c = f[..., t] * c + (1 - f[..., t]) * z[..., t]
        hs.append(o[..., t] * c)
    return np.stack(hs, axis=-1)


def test_fo_pool_matches_loop():
    z = torch.tanh(rand(2, 3, 11))
    f = torch.sigmoid(rand(2, 3, 11, seed=1))
    o = torch.sigmoid(rand(2, 3, 11, seed=2))
    h, _ = fo_pool(z, f, o)
    ref = naive_fo_pool(*(t.detach().numpy() for t in (z, f, o)))
    np.testing.assert_allclose(h.detach().numpy(), ref, rtol=1e-12, atol=1e-12)


def test_fo_pool_memory_examples():
    z = torch.ones(1, 1, 5, dtype=torch.float64)
    h, c = fo_pool(z, torch.ones_like(z), torch.ones_like(z))
    assert not h.any()  # f = 1 keeps the zero initial cell
    h, c = fo_pool(z, torch.zeros_like(z), torch.ones_like(z))
    assert torch.equal(h, z)  # f = 0 copies the candidate


def test_sinc_kernel_is_band_pass():
    # oracle: frequency response of the impulse response, via a long zero-padded FFT
    h = sinc_kernel(1000.0, 2000.0, 251, 16000).numpy()
    H = np.abs(np.fft.rfft(h, 16000))
    freqs = np.arange(H.size)
    assert np.all(np.abs(H[(freqs > 1150) & (freqs < 1850)] - 1) < 0.05)
    assert np.all(H[(freqs < 700) | (freqs > 2300)] < 0.05)


def test_sinc_kernel_validation():
    with pytest.raises(ValueError, match="odd"):
        sinc_kernel(100.0, 200.0, 250, 16000)
    with pytest.raises(ValueError):
        sinc_kernel(300.0, 200.0, 251, 16000)
    with pytest.raises(ValueError):
        sinc_kernel(100.0, 9000.0, 251, 16000)


def test_sinc_conv_cutoffs_stay_in_band():
    conv = SincConv(16, 65)
    with torch.no_grad():
        conv.low_hz[0] = -50.0
        conv.band_hz[-1] = 1e5
    low, high = conv.cutoffs()
    assert low.min() >= 30.0 and high.max() <= 8000.0 and torch.all(high >= low)


@given(st.integers(1, 25), st.integers(1, 6), st.integers(1, 300))
def test_same_padding_frame_law(kernel, stride, length):
    if kernel < stride:
        return
    conv = SameConv1d(1, 1, kernel, stride)
    if length + sum(same_padding(kernel, stride)) < kernel:
        return
    assert conv(torch.zeros(1, 1, length)).shape[-1] == length // stride


@given(st.integers(2, 25), st.integers(1, 10), st.integers(1, 50))
def test_upconv_exact_upsampling(kernel, stride, length):
    if kernel < stride:
        return
    up = UpConv1d(2, 1, kernel, stride)
    assert up(torch.zeros(1, 2, length)).shape[-1] == length * stride


def test_batch_norm_identity_in_eval():
    x = rand(3, 4, 5, requires_grad=False)
    out = batch_norm_forward(x, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64),
                             torch.zeros(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64), False)
    np.testing.assert_allclose(out.numpy(), x.numpy() / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_training_statistics():
    x = rand(3, 4, 5, requires_grad=False)
    rm, rv = torch.zeros(4, dtype=torch.float64), torch.ones(4, dtype=torch.float64)
    out = batch_norm_forward(x, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64), rm, rv, True)
    xn = x.numpy()
    mu = xn.mean(axis=(0, 2))
    var = xn.var(axis=(0, 2))
    ref = (xn - mu[None, :, None]) / np.sqrt(var[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.numpy(), ref, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(rm.numpy(), 0.1 * mu, rtol=1e-10)


def test_prelu_examples():
    x = torch.tensor([[-2.0, 3.0]]).reshape(1, 1, 2)
    assert prelu_forward(x, torch.tensor([0.25])).flatten().tolist() == [-0.5, 3.0]


# -- gradient checks (central differences, f64) ------------------------------------

def test_grad_conv1d():
    x, w, b = rand(2, 3, 20), rand(4, 3, 5, seed=1), rand(4, seed=2)
    assert_grads_ok(gradient_check(lambda: projected(conv1d_forward(x, w, b, stride=3)),
                                   {"x": x, "w": w, "b": b}))


def test_grad_conv1d_transpose():
    x, w, b = rand(2, 3, 7), rand(3, 2, 5, seed=1), rand(2, seed=2)
    assert_grads_ok(gradient_check(lambda: projected(conv1d_transpose_forward(x, w, b, stride=2, output_padding=1)),
                                   {"x": x, "w": w, "b": b}))


def test_grad_sinc_conv():
    conv = SincConv(6, 33, stride=2).double()
    with torch.no_grad():
        conv.low_hz += 20.0  # keep away from the f_min clamp, where the map has a kink
    x = rand(2, 1, 80, requires_grad=False)
    errors = gradient_check(lambda: projected(conv(x)), {"low_hz": conv.low_hz, "band_hz": conv.band_hz},
                            step=1e-3)
    assert_grads_ok(errors)
    assert conv.low_hz.grad.abs().sum() > 0 and conv.band_hz.grad.abs().sum() > 0


def test_grad_sinc_kernel_direct():
    lo = torch.tensor([300.0, 1200.0], dtype=torch.float64, requires_grad=True)
    hi = torch.tensor([900.0, 2500.0], dtype=torch.float64, requires_grad=True)
    assert_grads_ok(gradient_check(lambda: projected(sinc_kernel(lo, hi, 31, 16000)), {"lo": lo, "hi": hi},
                                   step=1e-3))


def test_grad_batch_norm():
    x, g, b = rand(4, 3, 6), rand(3, seed=1), rand(3, seed=2)
    rm, rv = torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64)
    assert_grads_ok(gradient_check(lambda: projected(batch_norm_forward(x, g, b, rm, rv, True)),
                                   {"x": x, "gamma": g, "beta": b}))


def test_grad_prelu():
    x = rand(2, 3, 10)
    with torch.no_grad():
        x += torch.sign(x) * 0.05  # keep entries off the kink at 0
    a = torch.tensor([0.1, 0.25, -0.3], dtype=torch.float64, requires_grad=True)
    assert_grads_ok(gradient_check(lambda: projected(prelu_forward(x, a)), {"x": x, "alpha": a}))


def test_grad_linear():
    x, w, b = rand(5, 7), rand(3, 7, seed=1), rand(3, seed=2)
    assert_grads_ok(gradient_check(lambda: projected(torch.nn.functional.linear(x, w, b)),
                                   {"x": x, "w": w, "b": b}))


def test_grad_qrnn():
    x, w, b = rand(2, 4, 9), rand(15, 4, 2, seed=1), rand(15, seed=2)
    assert_grads_ok(gradient_check(lambda: projected(qrnn_forward(x, w, b, hidden=5)),
                                   {"x": x, "weight": w, "bias": b}))


def test_qrnn_module_matches_functional():
    q = QRNN(4, 5, max_timescale=20).double()
    x = rand(2, 4, 9, requires_grad=False)
    np.testing.assert_allclose(q(x).detach().numpy(),
                               qrnn_forward(x, q.gates.weight, q.gates.bias, 5).detach().numpy(), rtol=1e-12)


def test_qrnn_chrono_forget_bias():
    q = QRNN(4, 50, max_timescale=100)
    fb = q.gates.bias[50:100].detach()
    assert torch.all(fb >= 0) and torch.all(fb <= np.log(99) + 1e-6)
    assert not q.gates.bias[:50].any() and not q.gates.bias[100:].any()


def miniature():
    cfg = EncoderConfig(variant=PASE_PLUS, sinc_filters=4, sinc_width=9, kernels=(4, 3), strides=(2, 2),
                        channels=(6, 8), emb_dim=8, qrnn_hidden=8, min_input=16, qrnn_timescale=10)
    torch.manual_seed(0)
    enc = Encoder(cfg).double()
    with torch.no_grad():
        enc.sinc.low_hz += 20.0
    head = RegressionHead(3, emb_dim=8, hidden=5).double()
    return enc, head


def test_grad_miniature_encoder_and_head():
    enc, head = miniature()
    x = rand(2, 1, 48, requires_grad=False)
    params = dict(enc.named_parameters()) | {f"head.{k}": v for k, v in head.named_parameters()}
    errors = gradient_check(lambda: projected(head(enc(x))), params, step=1e-5, max_entries=12)
    assert_grads_ok(errors)
    assert set(errors) >= {"sinc.low_hz", "sinc.band_hz", "qrnn.gates.weight", "blocks.0.bn.weight",
                           "blocks.1.act.weight", "skips.0.weight", "head.net.0.weight"}


def test_state_digest_sensitivity():
    enc, _ = miniature()
    d = state_digest(enc)
    assert d == state_digest(enc)
    with torch.no_grad():
        enc.sinc.band_hz[0] += 1e-9
    assert state_digest(enc) != d
