"""Layer primitives for the encoders and worker heads.

Standard layers are torch modules; the SincNet band-pass front-end and the
fo-pooling QRNN are implemented here. ``numeric_gradient`` and
``gradient_check`` provide a central-difference oracle for the autograd
gradients.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SINC_F_MIN = 30.0


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _sinc_bank(f_low: torch.Tensor, f_high: torch.Tensor, width: int, sr: float) -> torch.Tensor:
    f_low = f_low.reshape(-1, 1)
    f_high = f_high.reshape(-1, 1)
    n = torch.arange(width, dtype=f_low.dtype) - width // 2
    # torch.sinc(x) = sin(pi x)/(pi x)
    band = 2 * (f_high / sr) * torch.sinc(2 * f_high * n / sr) - 2 * (f_low / sr) * torch.sinc(2 * f_low * n / sr)
    return band * torch.as_tensor(np.hamming(width), dtype=f_low.dtype)


def sinc_kernel(f_low, f_high, width: int, sr: float) -> torch.Tensor:
    """Hamming-windowed band-pass impulse response(s) of ``width`` taps.

    ``f_low``/``f_high`` are scalars or 1-D tensors (one filter per entry) in
    Hz; gradients flow to both.
    """
    if width % 2 != 1:
        raise ValueError(f"sinc kernel width must be odd, got {width}")
    f_low = torch.as_tensor(f_low, dtype=torch.float64 if not torch.is_tensor(f_low) else None)
    f_high = torch.as_tensor(f_high, dtype=f_low.dtype)
    lo, hi = f_low.detach(), f_high.detach()
    if torch.any(lo < 0) or torch.any(hi > sr / 2) or torch.any(lo >= hi):
        raise ValueError("sinc kernel needs 0 <= f_low < f_high <= sr/2")
    out = _sinc_bank(f_low, f_high, width, sr)
    return out[0] if f_low.dim() == 0 else out


def same_padding(kernel: int, stride: int) -> tuple[int, int]:
    """Left/right padding giving ``floor(T / stride)`` output frames."""
    total = kernel - stride
    if total < 0:
        raise ValueError(f"kernel {kernel} shorter than stride {stride}")
    return total // 2, total - total // 2


class SincConv(nn.Module):
    """Convolution with learnable band-pass (f_low, bandwidth) sinc filters."""

    def __init__(self, n_filters: int, width: int, sr: int = 16000, stride: int = 1,
                 f_min: float = SINC_F_MIN, f_max: float | None = None):
        super().__init__()
        if width % 2 != 1:
            raise ValueError("sinc width must be odd")
        self.n_filters = n_filters
        self.width = width
        self.sr = sr
        self.stride = stride
        self.f_min = f_min
        self.f_max = sr / 2 if f_max is None else f_max
        top = sr / 2 - f_min
        edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(top), n_filters + 1))
        self.low_hz = nn.Parameter(torch.tensor(edges[:-1], dtype=torch.float32))
        self.band_hz = nn.Parameter(torch.tensor(np.diff(edges), dtype=torch.float32))
        self.padding = same_padding(width, stride)

    def cutoffs(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Projected (f_low, f_high); keeps every filter inside [f_min, f_max]."""
        low = torch.clamp(self.low_hz, self.f_min, self.f_max)
        high = torch.clamp(low + self.band_hz.abs(), max=self.f_max)
        return low, high

    def filters(self) -> torch.Tensor:
        low, high = self.cutoffs()
        return _sinc_bank(low, high, self.width, self.sr).unsqueeze(1)

    def forward(self, x):
        x = F.pad(x, self.padding)
        return F.conv1d(x, self.filters().to(x.dtype), stride=self.stride)

    def extra_repr(self):
        return f"{self.n_filters}, width={self.width}, stride={self.stride}, sr={self.sr}"


class SameConv1d(nn.Conv1d):
    """Conv1d padded so that T_out == floor(T_in / stride)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, bias=True):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, bias=bias)
        self.same = same_padding(kernel_size, stride)

    def forward(self, x):
        return super().forward(F.pad(x, self.same))


class UpConv1d(nn.ConvTranspose1d):
    """Transposed conv with T_out == T_in * stride exactly.

    Pads ``floor((K - s) / 2)`` on both sides; an odd ``K - s`` leaves one
    surplus trailing sample, which is trimmed.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, bias=True):
        total = kernel_size - stride
        if total < 0:
            raise ValueError(f"kernel {kernel_size} shorter than stride {stride}")
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=total // 2, bias=bias)

    def forward(self, x):
        return super().forward(x)[..., : x.shape[-1] * self.stride[0]]


def fo_pool(z: torch.Tensor, f: torch.Tensor, o: torch.Tensor, c0: torch.Tensor | None = None):
    """fo-pooling over the last axis: c_t = f_t c_{t-1} + (1 - f_t) z_t, h_t = o_t c_t.

    Inputs are (B, H, T) activated gates. Returns (h, c), both (B, H, T).
    """
    c = torch.zeros_like(z[..., 0]) if c0 is None else c0
    cs = []
    for f_t, fz_t in zip(f.unbind(-1), ((1 - f) * z).unbind(-1)):
        c = f_t * c + fz_t
        cs.append(c)
    cells = torch.stack(cs, dim=-1)
    return o * cells, cells


class QRNN(nn.Module):
    """Single-layer QRNN: width-2 causal gate convolutions + fo-pooling.

    With ``max_timescale`` set, forget-gate biases get chrono initialization,
    ``log U(1, max_timescale - 1)``, so cell memories start spread over
    2..max_timescale frames instead of all at two frames.
    """

    def __init__(self, in_channels: int, hidden: int, width: int = 2, max_timescale: int | None = None):
        super().__init__()
        self.hidden = hidden
        self.width = width
        self.max_timescale = max_timescale
        self.gates = nn.Conv1d(in_channels, 3 * hidden, width)
        self.reset_forget_bias()

    def reset_forget_bias(self):
        with torch.no_grad():
            self.gates.bias.zero_()
            if self.max_timescale is not None and self.max_timescale > 2:
                u = torch.empty(self.hidden).uniform_(1.0, self.max_timescale - 1.0)
                self.gates.bias[self.hidden:2 * self.hidden] = torch.log(u)

    def forward(self, x, c0=None):
        g = self.gates(F.pad(x, (self.width - 1, 0)))
        z, f, o = g.chunk(3, dim=1)
        h, _ = fo_pool(torch.tanh(z), torch.sigmoid(f), torch.sigmoid(o), c0)
        return h


# -- functional forms ---------------------------------------------------------

def conv1d_forward(x, weight, bias=None, stride: int = 1):
    """Valid cross-correlation: T' = floor((T - K) / stride) + 1."""
    if x.shape[-1] < weight.shape[-1]:
        raise ValueError(f"input length {x.shape[-1]} shorter than kernel {weight.shape[-1]}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {weight.shape[1]}")
    return F.conv1d(x, weight, bias, stride=stride)


def conv1d_transpose_forward(x, weight, bias=None, stride: int = 1, output_padding: int = 0):
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {weight.shape[0]}")
    return F.conv_transpose1d(x, weight, bias, stride=stride, output_padding=output_padding)


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                       momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel batch norm; updates the running stats in place when training."""
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def prelu_forward(x, alpha):
    return torch.where(x > 0, x, alpha.reshape(1, -1, *([1] * (x.dim() - 2))) * x)


def qrnn_forward(x, weight, bias, hidden: int, c0=None):
    """QRNN with explicit gate-conv parameters (weight: 3H x C x 2)."""
    g = F.conv1d(F.pad(x, (weight.shape[-1] - 1, 0)), weight, bias)
    z, f, o = g.split(hidden, dim=1)
    h, _ = fo_pool(torch.tanh(z), torch.sigmoid(f), torch.sigmoid(o), c0)
    return h


# -- gradient oracle ----------------------------------------------------------

def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = 1e-4,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``."""
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    grads = np.zeros(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(fn())
            flat[i] = orig - step
            minus = float(fn())
            flat[i] = orig
            grads[k] = (plus - minus) / (2 * step)
    return grads


def gradient_check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], step: float = 1e-4,
                   max_entries: int | None = 40, seed: int = 0) -> dict[str, float]:
    """Relative error between autograd and central differences per tensor.

    The error for a tensor is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``
    over the checked entries (all, or a seeded sample of ``max_entries``).
    """
    for t in tensors.values():
        if t.grad is not None:
            t.grad = None
    out = fn()
    out.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in tensors.items():
        analytic = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
        n = t.numel()
        if max_entries is not None and n > max_entries:
            indices = sorted(rng.choice(n, max_entries, replace=False).tolist())
        else:
            indices = list(range(n))
        numeric = numeric_gradient(fn, t, step, indices)
        a = analytic.view(-1)[indices].double().numpy()
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(a)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric)) / scale)
    return errors


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def state_digest(module_or_state) -> str:
    """SHA-256 over names, shapes and raw bytes of a module's floating-point state.

    Integer buffers (batch-norm step counters) are bookkeeping and are skipped.
    """
    state = module_or_state.state_dict() if isinstance(module_or_state, nn.Module) else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if not t.is_floating_point():
            continue
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def init_weights(module: nn.Module) -> None:
    """Zero every conv/linear bias (layers keep torch's default weight init).

    QRNN gate biases are left alone so their chrono initialization survives.
    """
    skip = {id(m.gates) for m in module.modules() if isinstance(m, QRNN)}
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)) and m.bias is not None and id(m) not in skip:
            nn.init.zeros_(m.bias)

