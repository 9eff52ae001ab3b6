"""Single-channel time-domain speaker extraction network.

Spectral encoder -> TCN extractor with multiplicative speaker adaptation ->
mask -> fully connected decoder with overlap-add. Tensors are laid out as
[batch, channels, frames] throughout.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio_io import AudioSignal
from .errors import CheckpointError, ConfigurationError, ShapeError

NORM_EPS = 1e-8


@dataclass(frozen=True)
class SpxConfig:
    N: int = 256
    L: int = 20
    B: int = 256
    H: int = 512
    P: int = 3
    X: int = 8
    R: int = 4
    adaptation_index: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"{f.name} must be a positive integer, got {v!r}")
        if self.L % 2:
            raise ConfigurationError(f"L must be even so that hop = L/2 is an integer, got {self.L}")
        if self.P % 2 == 0:
            raise ConfigurationError(f"P must be odd for length-preserving dilated convolution, got {self.P}")
        if not 1 <= self.adaptation_index <= self.num_blocks:
            raise ConfigurationError(
                f"adaptation_index must lie in [1, {self.num_blocks}], got {self.adaptation_index}")

    @property
    def hop(self) -> int:
        return self.L // 2

    @property
    def num_blocks(self) -> int:
        return self.X * self.R

    def dilation(self, i: int) -> int:
        return 2 ** (i % self.X)

    def num_frames(self, length: int) -> int:
        if length < self.L:
            return 0
        return (length - self.L) // self.hop + 1

    @classmethod
    def from_dict(cls, d: dict) -> "SpxConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


TINY_CONFIG = SpxConfig(N=8, L=20, B=8, H=16, P=3, X=2, R=1, adaptation_index=2)


def global_norm(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Zero-mean, unit-variance normalisation over channels and time, per instance."""
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


class GlobalLayerNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        return global_norm(x) * self.gain + self.bias


class ChannelNorm(nn.Module):
    """Per-channel normalisation over time with trainable gain and bias."""

    def __init__(self, channels: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(1, channels, 1))
        self.bias = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        mean = x.mean(dim=2, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=2, keepdim=True)
        return (x - mean) / torch.sqrt(var + NORM_EPS) * self.gain + self.bias


class TCNBlock(nn.Module):
    """1x1 conv -> PReLU -> gLN -> dilated depthwise conv -> PReLU -> gLN -> 1x1 conv.

    The input is added back to the output when channel counts agree.
    """

    def __init__(self, in_channels: int, hidden: int, out_channels: int, kernel: int, dilation: int):
        super().__init__()
        self.dilation = dilation
        self.conv_in = nn.Conv1d(in_channels, hidden, 1)
        self.act1 = nn.PReLU(init=0.25)
        self.norm1 = GlobalLayerNorm(hidden)
        self.dconv = nn.Conv1d(hidden, hidden, kernel, dilation=dilation,
                               padding=dilation * (kernel - 1) // 2, groups=hidden)
        self.act2 = nn.PReLU(init=0.25)
        self.norm2 = GlobalLayerNorm(hidden)
        self.conv_out = nn.Conv1d(hidden, out_channels, 1)
        self.residual = in_channels == out_channels

    def forward(self, x):
        y = self.norm1(self.act1(self.conv_in(x)))
        y = self.norm2(self.act2(self.dconv(y)))
        y = self.conv_out(y)
        return x + y if self.residual else y


class SpeakerEncoder(nn.Module):
    def __init__(self, cfg: SpxConfig):
        super().__init__()
        self.conv = nn.Conv1d(1, cfg.N, cfg.L, stride=cfg.hop, bias=False)
        self.act = nn.ReLU()
        self.tcn = TCNBlock(cfg.N, cfg.H, cfg.B, cfg.P, dilation=1)

    def forward(self, enrolment):
        h = self.tcn(self.act(self.conv(enrolment.unsqueeze(1))))
        return h.mean(dim=2)


class Extractor(nn.Module):
    def __init__(self, cfg: SpxConfig):
        super().__init__()
        self.adaptation_index = cfg.adaptation_index
        self.norm = ChannelNorm(cfg.N)
        self.bottleneck = nn.Conv1d(cfg.N, cfg.B, 1)
        self.blocks = nn.ModuleList(
            TCNBlock(cfg.B, cfg.H, cfg.B, cfg.P, cfg.dilation(i)) for i in range(cfg.num_blocks))
        self.mask_conv = nn.Conv1d(cfg.B, cfg.N, 1)
        self.mask_act = nn.ReLU()

    def forward(self, rep, embedding):
        h = self.bottleneck(self.norm(rep))
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i == self.adaptation_index:
                h = h * embedding.unsqueeze(2)
        return self.mask_act(self.mask_conv(h))


class SpxModel(nn.Module):
    def __init__(self, cfg: SpxConfig = SpxConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Conv1d(1, cfg.N, cfg.L, stride=cfg.hop, bias=False)
        self.encoder_act = nn.ReLU()
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.extractor = Extractor(cfg)
        self.decoder = nn.Linear(cfg.N, cfg.L, bias=False)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv1d, nn.Linear)):
                w = module.weight
                bound = 1.0 / math.sqrt(w[0].numel())
                w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
                if module.bias is not None:
                    module.bias.copy_(torch.rand(module.bias.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
            elif isinstance(module, nn.PReLU):
                module.weight.fill_(0.25)
            elif isinstance(module, (GlobalLayerNorm, ChannelNorm)):
                module.gain.fill_(1.0)
                module.bias.fill_(0.0)
        # Decoder starts as the encoder transpose: each output frame then has a
        # non-negative inner product with its input frame, so the untrained
        # estimate has the mixture's polarity. SI-SDR cannot see a sign flip,
        # but remixing with the mixture can.
        self.decoder.weight.copy_(self.encoder.weight[:, 0, :].T)

    def _check_length(self, length: int, what: str) -> None:
        if length < self.cfg.L:
            raise ShapeError(f"{what} has {length} samples; need at least L = {self.cfg.L}")

    def encode_spectral(self, x: torch.Tensor) -> torch.Tensor:
        """[batch, T] -> non-negative [batch, N, F]."""
        self._check_length(x.shape[-1], "signal")
        return self.encoder_act(self.encoder(x.unsqueeze(1)))

    def encode_speaker(self, enrolment: torch.Tensor) -> torch.Tensor:
        """[batch, T] -> [batch, B]"""
        self._check_length(enrolment.shape[-1], "enrolment")
        return self.speaker_encoder(enrolment)

    def extract(self, rep: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        if rep.dim() != 3 or rep.shape[1] != self.cfg.N:
            raise ShapeError(f"representation must be [batch, {self.cfg.N}, frames], got {tuple(rep.shape)}")
        if embedding.shape != (rep.shape[0], self.cfg.B):
            raise ShapeError(f"embedding must be [{rep.shape[0]}, {self.cfg.B}], got {tuple(embedding.shape)}")
        return self.extractor(rep, embedding)

    def decode(self, masked: torch.Tensor) -> torch.Tensor:
        """[batch, N, F] -> [batch, (F - 1) * hop + L] via per-frame linear map and overlap-add."""
        if masked.dim() != 3 or masked.shape[1] != self.cfg.N:
            raise ShapeError(f"masked representation must be [batch, {self.cfg.N}, frames], got {tuple(masked.shape)}")
        frames = self.decoder(masked.transpose(1, 2))  # [batch, F, L]
        n = frames.shape[1]
        length = (n - 1) * self.cfg.hop + self.cfg.L
        out = F.fold(frames.transpose(1, 2), output_size=(1, length),
                     kernel_size=(1, self.cfg.L), stride=(1, self.cfg.hop))
        return out.reshape(frames.shape[0], length)

    def forward(self, mixture: torch.Tensor, enrolment: torch.Tensor | None = None,
                embedding: torch.Tensor | None = None, embedding_scale: float = 1.0) -> torch.Tensor:
        """Estimate the target speaker, zero-padded to the mixture length.

        Pass either ``enrolment`` waveforms or a precomputed ``embedding``.
        """
        if embedding is None:
            if enrolment is None:
                raise ShapeError("either enrolment or embedding is required")
            embedding = self.encode_speaker(enrolment)
        rep = self.encode_spectral(mixture)
        mask = self.extract(rep, embedding * embedding_scale)
        est = self.decode(rep * mask)
        pad = mixture.shape[-1] - est.shape[-1]
        return F.pad(est, (0, pad)) if pad else est

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# -- AudioSignal-level helpers ------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpeakerEmbedding:
    values: np.ndarray


def _tensor(model: SpxModel, x) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    arr = x.samples if isinstance(x, AudioSignal) else x
    return torch.tensor(np.asarray(arr), dtype=dtype).unsqueeze(0)


@torch.no_grad()
def encode_spectral(model: SpxModel, signal: AudioSignal) -> np.ndarray:
    return model.encode_spectral(_tensor(model, signal))[0].numpy().astype(np.float64)


@torch.no_grad()
def encode_speaker(model: SpxModel, enrolment: AudioSignal) -> SpeakerEmbedding:
    return SpeakerEmbedding(model.encode_speaker(_tensor(model, enrolment))[0].numpy().astype(np.float64))


@torch.no_grad()
def extract(model: SpxModel, mixture_rep: np.ndarray, embedding: SpeakerEmbedding) -> np.ndarray:
    emb = torch.as_tensor(embedding.values, dtype=next(model.parameters()).dtype).unsqueeze(0)
    return model.extract(_tensor(model, mixture_rep), emb)[0].numpy().astype(np.float64)


@torch.no_grad()
def decode(model: SpxModel, masked_rep: np.ndarray, sample_rate: int = 16000) -> AudioSignal:
    return AudioSignal(model.decode(_tensor(model, masked_rep))[0].numpy(), sample_rate)


@torch.no_grad()
def forward(model: SpxModel, mixture: AudioSignal, enrolment: AudioSignal) -> AudioSignal:
    if mixture.sample_rate != enrolment.sample_rate:
        raise ShapeError(f"sample rates differ: mixture {mixture.sample_rate}, enrolment {enrolment.sample_rate}")
    was_training = model.training
    model.eval()
    try:
        out = model(_tensor(model, mixture), _tensor(model, enrolment))
    finally:
        model.train(was_training)
    return AudioSignal(out[0].numpy(), mixture.sample_rate)


# -- checkpoint container ---------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"SPXCKPT\0"
#   uint32    format version
#   uint64    header length in bytes
#   header    UTF-8 JSON: {"config": {...}, "meta": {...},
#             "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
#   payload   tensors back to back in header order, C order, little-endian

CHECKPOINT_MAGIC = b"SPXCKPT\0"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(model: SpxModel, path, meta: dict | None = None) -> None:
    """Write ``model`` atomically: a temporary file is renamed over ``path``."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        dt = _DTYPES[t.dtype]
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": asdict(model.cfg), "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    raw = fh.read(12)
    if len(raw) != 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        return json.loads(fh.read(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc


def load_checkpoint(path) -> SpxModel:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    model = SpxModel(SpxConfig.from_dict(header["config"]))
    state = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    if any(t.dtype == torch.float64 for t in state.values()):
        model = model.double()
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.eval()
    return model
