"""PASE and PASE+ waveform encoders: 16 kHz audio -> 512-d frames every 10 ms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .nn import QRNN, SameConv1d, SincConv, count_parameters, init_weights

PASE = "PASE"
PASE_PLUS = "PASE_PLUS"
VARIANTS = (PASE, PASE_PLUS)
HOP = 160
EMB_DIM = 512
N_BLOCKS = 7
MIN_INPUT = 2048


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = PASE_PLUS
    sinc_filters: int = 64
    sinc_width: int = 251
    sinc_stride: int = 1
    kernels: tuple = (20, 11, 11, 11, 11, 11, 11)
    strides: tuple = (10, 2, 1, 2, 1, 2, 2)
    channels: tuple = (64, 128, 128, 256, 256, 512, 512)
    emb_dim: int = EMB_DIM
    qrnn_hidden: int | None = 512
    qrnn_timescale: int | None = 100  # frames; chrono init of forget gates
    skip_connections: bool = True
    sr: int = 16000
    min_input: int = field(default=MIN_INPUT)

    def __post_init__(self):
        for name in ("kernels", "strides", "channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        if not (len(self.kernels) == len(self.strides) == len(self.channels) >= 1):
            raise ValueError("kernels, strides and channels must have the same non-zero length")
        if any(s < 1 for s in self.strides) or self.sinc_stride < 1:
            raise ValueError("strides must be >= 1")
        if self.sinc_width % 2 != 1:
            raise ValueError("sinc kernel width must be odd")
        if self.channels[-1] != self.emb_dim and self.variant == PASE:
            raise ValueError("PASE: last block must output emb_dim channels")
        if self.variant == PASE_PLUS and not self.qrnn_hidden:
            raise ValueError("PASE_PLUS needs qrnn_hidden")
        if self.variant == PASE_PLUS and self.qrnn_hidden != self.emb_dim:
            raise ValueError("qrnn_hidden must equal emb_dim")

    @property
    def hop(self) -> int:
        return self.sinc_stride * math.prod(self.strides)

    def validate(self) -> "EncoderConfig":
        """Check the full-size architecture contract (7 blocks, 10 ms hop, 512-d)."""
        if len(self.kernels) != N_BLOCKS:
            raise ValueError(f"expected {N_BLOCKS} conv blocks, got {len(self.kernels)}")
        if self.hop != HOP:
            raise ValueError(f"stride product must be {HOP}, got {self.hop}")
        if self.emb_dim != EMB_DIM:
            raise ValueError(f"emb_dim must be {EMB_DIM}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("kernels", "strides", "channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def default_config(variant: str = PASE_PLUS) -> EncoderConfig:
    if variant == PASE:
        return EncoderConfig(variant=PASE, qrnn_hidden=None, skip_connections=False).validate()
    if variant == PASE_PLUS:
        return EncoderConfig(variant=PASE_PLUS).validate()
    raise ValueError(f"unknown encoder variant {variant!r}")


def desk_config(variant: str = PASE_PLUS) -> EncoderConfig:
    """Narrow encoder with the same block/stride/embedding contract, for CPU-scale runs."""
    base = dict(sinc_filters=16, sinc_width=129, channels=(32, 32, 64, 64, 128, 128, 512))
    if variant == PASE:
        return EncoderConfig(variant=PASE, qrnn_hidden=None, skip_connections=False, **base).validate()
    return EncoderConfig(variant=PASE_PLUS, **base).validate()


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, kernel, stride):
        super().__init__()
        self.conv = SameConv1d(cin, cout, kernel, stride)
        self.bn = nn.BatchNorm1d(cout)
        self.act = nn.PReLU(cout)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Encoder(nn.Module):
    """sinc -> N x (conv -> BN -> PReLU) [-> mean of skip projections -> QRNN].

    Input (B, 1, T) or (B, T); output (B, floor(T / hop), emb_dim).
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.sinc = SincConv(config.sinc_filters, config.sinc_width, config.sr, config.sinc_stride)
        blocks = []
        cin = config.sinc_filters
        for k, s, c in zip(config.kernels, config.strides, config.channels):
            blocks.append(ConvBlock(cin, c, k, s))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.plus = config.variant == PASE_PLUS
        if self.plus:
            if config.skip_connections:
                self.skips = nn.ModuleList(nn.Conv1d(c, config.emb_dim, 1) for c in config.channels)
            else:
                self.skips = None
                if cin != config.emb_dim:
                    raise ValueError("without skip connections the last block must output emb_dim")
            self.qrnn = QRNN(config.emb_dim, config.qrnn_hidden, max_timescale=config.qrnn_timescale)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.shape[-1] < self.config.min_input:
            raise ValueError(f"input of {x.shape[-1]} samples is shorter than {self.config.min_input}")
        n_out = x.shape[-1] // self.config.hop
        h = self.sinc(x)
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        if self.plus:
            if self.skips is not None:
                pooled = []
                for proj, o in zip(self.skips, outs):
                    r = o.shape[-1] // n_out
                    # pooling commutes with the K=1 projection; pool first
                    if r > 1:
                        o = F.avg_pool1d(o, r, r)
                    pooled.append(proj(o[..., :n_out]))
                h = torch.stack(pooled).mean(dim=0)
            h = self.qrnn(h)
        return h[..., :n_out].transpose(1, 2)


def build_encoder(config: EncoderConfig, seed: int | None = None) -> Encoder:
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return Encoder(config)
    return Encoder(config)


def encoder_forward(batch: torch.Tensor, config: EncoderConfig, params: dict | None = None,
                    training: bool = False) -> torch.Tensor:
    """Functional entry point: run ``config`` with the given state dict."""
    enc = Encoder(config)
    if params is not None:
        enc.load_state_dict(params)
    enc.train(training)
    return enc(batch)


def count_params(obj) -> int:
    """Trainable parameter count of an ``EncoderConfig`` or any module."""
    if isinstance(obj, EncoderConfig):
        obj = Encoder(obj)
    return count_parameters(obj)
