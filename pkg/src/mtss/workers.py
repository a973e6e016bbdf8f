"""Pretext worker heads and their losses."""

from __future__ import annotations

import torch
from torch import nn

from .encoder import Encoder, EncoderConfig
from .features import DEFAULT_SPEC, WORKER_ORDER, ExtractionSpec, Worker, parse_workers
from .nn import UpConv1d, init_weights

HEAD_HIDDEN = 256


class RegressionHead(nn.Module):
    """Per-frame MLP: K=1 conv emb->256, PReLU, K=1 conv 256->D."""

    def __init__(self, out_dim: int, emb_dim: int = 512, hidden: int = HEAD_HIDDEN):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(emb_dim, hidden, 1),
            nn.PReLU(hidden),
            nn.Conv1d(hidden, out_dim, 1),
        )
        init_weights(self)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        # (B, T, E) -> (B, D, T)
        return self.net(emb.transpose(1, 2))


class WaveformDecoder(nn.Module):
    """Transposed-conv mirror of the encoder conv stack; upsamples by the encoder hop."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        layers = []
        ins = list(config.channels)
        outs = [config.sinc_filters] + list(config.channels[:-1])
        cin = config.emb_dim
        for k, s, c_out, c_in in reversed(list(zip(config.kernels, config.strides, outs, ins))):
            if cin != c_in:
                raise ValueError("decoder input width must match the last block")
            layers += [UpConv1d(cin, c_out, k, s), nn.BatchNorm1d(c_out), nn.PReLU(c_out)]
            cin = c_out
        layers.append(UpConv1d(cin, 1, config.sinc_width, config.sinc_stride))
        self.net = nn.Sequential(*layers)
        self.hop = config.hop
        init_weights(self)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.net(emb.transpose(1, 2))


def build_head(worker, config: EncoderConfig, spec: ExtractionSpec = DEFAULT_SPEC) -> nn.Module:
    worker = Worker(worker)
    if worker is Worker.W:
        return WaveformDecoder(config)
    return RegressionHead(spec.dim(worker), config.emb_dim)


def regression_head_forward(emb, worker, params=None, spec: ExtractionSpec = DEFAULT_SPEC):
    worker = Worker(worker)
    if worker is Worker.W:
        raise ValueError("the waveform worker uses the decoder, not a regression head")
    head = RegressionHead(spec.dim(worker), emb.shape[-1])
    if params is not None:
        head.load_state_dict(params)
    return head(emb)


def decoder_forward(emb, config: EncoderConfig, params=None, training: bool = False):
    dec = WaveformDecoder(config)
    if params is not None:
        dec.load_state_dict(params)
    dec.train(training)
    return dec(emb)


def align(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Truncate both to the shorter time axis; other dims must agree."""
    if pred.shape[:-1] != target.shape[:-1]:
        raise ValueError(f"incompatible shapes {tuple(pred.shape)} and {tuple(target.shape)}")
    n = min(pred.shape[-1], target.shape[-1])
    return pred[..., :n], target[..., :n]


def worker_loss(pred: torch.Tensor, target: torch.Tensor, worker) -> torch.Tensor:
    """MAE for the waveform worker, MSE for every other worker."""
    pred, target = align(torch.as_tensor(pred), torch.as_tensor(target))
    diff = pred - target.to(pred.dtype)
    if Worker(worker) is Worker.W:
        return diff.abs().mean()
    return (diff * diff).mean()


class PretextModel(nn.Module):
    """Encoder plus one head per worker."""

    def __init__(self, config: EncoderConfig, workers, spec: ExtractionSpec = DEFAULT_SPEC, seed: int = 0):
        super().__init__()
        self.config = config
        self.workers = parse_workers(workers)
        if not self.workers:
            raise ValueError("at least one worker is required")
        # every module gets its own seed so dropping a worker leaves the rest unchanged
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = Encoder(config)
            heads = {}
            for w in self.workers:
                torch.manual_seed(seed * 7919 + 1 + WORKER_ORDER.index(w))
                heads[w.value] = build_head(w, config, spec)
        self.heads = nn.ModuleDict(heads)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict[Worker, torch.Tensor]]:
        emb = self.encoder(x)
        return emb, {w: self.heads[w.value](emb) for w in self.workers}
