"""Losses, gradient verification and the optimisation loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .audio_io import AudioSignal, load_wav, resample_ratio, resampled_length, resampling_filter
from .errors import (
    ConfigurationError,
    NumericalError,
    PreconditionError,
    ShapeError,
    SpxError,
    TooShortError,
)
from .manifest import ManifestEntry, read_manifest
from .model import SpxModel
from .signal_ops import STOI_FFT, STOI_FRAME, STOI_HOP, STOI_RATE, hann_window, third_octave_matrix

log = logging.getLogger(__name__)

SISDR_EPS = 1e-12
ENVELOPE_EPS = 1e-12


@dataclass(frozen=True)
class LossSpec:
    kind: str = "sisdr_only"
    stoi_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sisdr_only", "sisdr_plus_stoi"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if not self.stoi_weight >= 0:
            raise ConfigurationError(f"stoi_weight must be >= 0, got {self.stoi_weight}")

    @property
    def uses_stoi(self) -> bool:
        return self.kind == "sisdr_plus_stoi"


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    chunk_seconds: float = 4.0
    batch_size: int = 8
    lr_halving_patience: int = 3
    max_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0 or self.chunk_seconds <= 0:
            raise ConfigurationError("initial_lr and chunk_seconds must be positive")
        if self.batch_size < 1 or self.lr_halving_patience < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size, lr_halving_patience and max_epochs must be >= 1")


# -- SI-SDR ---------------------------------------------------------------------

def sisdr_torch(target: torch.Tensor, estimate: torch.Tensor, eps: float = SISDR_EPS) -> torch.Tensor:
    """Batched SI-SDR in dB over the last axis (uncapped, differentiable)."""
    dot = (estimate * target).sum(-1, keepdim=True)
    proj = dot / (target * target).sum(-1, keepdim=True) * target
    err = proj - estimate
    return 10 * torch.log10((proj * proj).sum(-1) / ((err * err).sum(-1) + eps))


def sisdr_loss_torch(target, estimate):
    # clamping zeroes the gradient on examples already at the cap
    return -torch.clamp(sisdr_torch(target, estimate), -metrics.DB_CAP, metrics.DB_CAP)


def loss_sisdr(target: AudioSignal, estimate: AudioSignal) -> tuple[float, np.ndarray]:
    """Negated SI-SDR and its gradient with respect to ``estimate``.

    The value comes from :func:`metrics.sisdr`; the gradient is the closed
    form of d/ds' [-10 log10(d^2 / (|s'|^2 |s|^2 - d^2))] with d = <s', s>,
    and is zero where the metric is capped.
    """
    m = metrics.sisdr(target, estimate)
    if m.capped:
        return -m.value, np.zeros(len(estimate))
    s, e = target.samples, estimate.samples
    d = float(np.dot(e, s))
    ss = float(np.dot(s, s))
    ee = float(np.dot(e, e))
    resid = ee * ss - d * d
    grad_db = (10.0 / math.log(10.0)) * (2.0 * s / d - (2.0 * ss * e - 2.0 * d * s) / resid)
    return -m.value, -grad_db


# -- differentiable STOI ------------------------------------------------------------

@lru_cache(maxsize=8)
def _polyphase_plan(source_rate: int, target_rate: int):
    """Per-output-phase kernels reproducing :func:`audio_io.resample_array`.

    Output sample m is ``up * sum_k x[k] h[m*down + c - k*up]`` with c the
    filter's group delay. Outputs with m = q*up + r share kernel r and read
    the input with stride ``down``.
    """
    up, down = resample_ratio(source_rate, target_rate)
    h = np.asarray(resampling_filter(up, down)) * up
    c = (len(h) - 1) // 2
    phases = []
    for r in range(up):
        n0 = r * down + c
        phi, base = n0 % up, n0 // up
        taps = h[phi::up]  # taps[j] multiplies x[q*down + base - j]
        phases.append((base, taps[::-1].copy()))
    return up, down, phases


class TorchResampler:
    def __init__(self, source_rate: int, target_rate: int):
        self.source_rate, self.target_rate = source_rate, target_rate
        self.up, self.down, phases = _polyphase_plan(source_rate, target_rate)
        self._phases = [(base, torch.from_numpy(k)) for base, k in phases]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """[batch, T] -> [batch, round(T * target / source)]"""
        if self.source_rate == self.target_rate:
            return x
        n_in = x.shape[-1]
        n_out = resampled_length(n_in, self.source_rate, self.target_rate)
        out = x.new_zeros(x.shape[0], n_out)
        for r, (base, kernel) in enumerate(self._phases):
            count = len(range(r, n_out, self.up))
            if count == 0:
                continue
            J = kernel.shape[0]
            start = base - J + 1  # first input index touched by output q = 0
            last = (count - 1) * self.down + base  # last input index touched
            pad_left = max(0, -start)
            pad_right = max(0, last + 1 - n_in)
            xp = F.pad(x, (pad_left, pad_right))
            seg = xp[:, start + pad_left: last + pad_left + 1]
            y = F.conv1d(seg.unsqueeze(1), kernel.to(x.dtype).view(1, 1, -1), stride=self.down)
            out[:, r::self.up] = y[:, 0, :count]
        return out


def _band_envelopes_torch(x: torch.Tensor) -> torch.Tensor:
    """[batch, T] at 10 kHz -> [batch, 15, frames]"""
    # same frame starts as metrics.stoi: the final sample is never framed
    frames = x[..., :-1].unfold(-1, STOI_FRAME, STOI_HOP) * torch.tensor(hann_window(STOI_FRAME), dtype=x.dtype)
    power = torch.fft.rfft(frames, n=STOI_FFT).abs() ** 2  # [batch, frames, bins]
    obm = torch.tensor(third_octave_matrix(), dtype=x.dtype)
    return torch.sqrt(torch.einsum("kb,nfb->nkf", obm, power) + ENVELOPE_EPS)


def _rownorm(x):
    return torch.sqrt((x * x).sum(-1, keepdim=True) + ENVELOPE_EPS)


def stoi_torch(target: torch.Tensor, estimate: torch.Tensor, sample_rate: int,
               branches: list | None = None) -> torch.Tensor:
    """Differentiable STOI, [batch, T] -> [batch].

    Same front end and segment statistics as :func:`metrics.stoi`, but every
    frame is kept (no silence gate) and the envelope clipping is a plain
    ``minimum`` whose gradient follows the active branch. When ``branches``
    is given, the boolean clipping pattern is appended to it.
    """
    resampler = TorchResampler(sample_rate, STOI_RATE)
    x = _band_envelopes_torch(resampler(target))
    y = _band_envelopes_torch(resampler(estimate))
    if x.shape[-1] < metrics.STOI_SEGMENT:
        raise TooShortError(f"{x.shape[-1]} STOI frames; need at least {metrics.STOI_SEGMENT}")
    xs = x.unfold(-1, metrics.STOI_SEGMENT, 1)  # [batch, bands, segs, 30]
    ys = y.unfold(-1, metrics.STOI_SEGMENT, 1)
    yn = ys * (_rownorm(xs) / (_rownorm(ys) + metrics.STOI_EPS))
    clip = xs * metrics.STOI_CLIP
    if branches is not None:
        branches.append((yn < clip).detach())
    yp = torch.minimum(yn, clip)
    yp = yp - yp.mean(-1, keepdim=True)
    xc = xs - xs.mean(-1, keepdim=True)
    corr = (yp / (_rownorm(yp) + metrics.STOI_EPS)) * (xc / (_rownorm(xc) + metrics.STOI_EPS))
    return corr.sum(-1).mean(dim=(-2, -1))


def min_stoi_samples(sample_rate: int) -> int:
    """Shortest input giving one full 30-frame STOI segment after resampling."""
    need = STOI_FRAME + (metrics.STOI_SEGMENT - 1) * STOI_HOP + 1
    n = math.ceil(need * sample_rate / STOI_RATE)
    while resampled_length(n, sample_rate, STOI_RATE) < need:
        n += 1
    return n


def _as_tensors(target: AudioSignal, estimate: AudioSignal):
    if len(target) != len(estimate):
        raise ShapeError(f"length mismatch: {len(target)} vs {len(estimate)}")
    if target.sample_rate != estimate.sample_rate:
        raise ShapeError("sample rates differ")
    t = torch.tensor(target.samples, dtype=torch.float64).unsqueeze(0)
    e = torch.tensor(estimate.samples, dtype=torch.float64).unsqueeze(0).requires_grad_(True)
    return t, e


def loss_stoi(target: AudioSignal, estimate: AudioSignal) -> tuple[float, np.ndarray]:
    if len(target) < min_stoi_samples(target.sample_rate):
        raise TooShortError(f"need at least {min_stoi_samples(target.sample_rate)} samples for the STOI loss")
    t, e = _as_tensors(target, estimate)
    value = -stoi_torch(t, e, target.sample_rate)[0]
    value.backward()
    return float(value.detach()), e.grad[0].numpy().copy()


def loss_composite(target: AudioSignal, estimate: AudioSignal, spec: LossSpec) -> tuple[float, np.ndarray]:
    value, grad = loss_sisdr(target, estimate)
    if spec.uses_stoi:
        sv, sg = loss_stoi(target, estimate)
        value = value + spec.stoi_weight * sv
        grad = grad + spec.stoi_weight * sg
    return value, grad


def batch_loss(target: torch.Tensor, estimate: torch.Tensor, spec: LossSpec, sample_rate: int,
               valid: Sequence[int] | None = None, branches: list | None = None):
    """Mean composite loss over a batch plus its per-term means.

    ``valid`` gives each example's unpadded length; samples beyond it are
    excluded from both terms.
    """
    n, T = target.shape
    if valid is None:
        valid = [T] * n
    mask = (torch.arange(T)[None, :] < torch.as_tensor(list(valid))[:, None]).to(estimate.dtype)
    l_sisdr = sisdr_loss_torch(target * mask, estimate * mask).mean()
    terms = {"sisdr_loss": float(l_sisdr.detach())}
    total = l_sisdr
    if spec.uses_stoi:
        min_len = min_stoi_samples(sample_rate)
        vals = [-stoi_torch(target[i:i + 1, :v], estimate[i:i + 1, :v], sample_rate, branches)[0]
                for i, v in enumerate(valid) if v >= min_len]
        if vals:
            l_stoi = torch.stack(vals).mean()
            total = total + spec.stoi_weight * l_stoi
            terms["stoi_loss"] = float(l_stoi.detach())
    return total, terms


# -- learning-rate schedule -------------------------------------------------------

class PlateauHalving:
    """Halve the learning rate after ``patience`` consecutive epochs without a new best CV loss."""

    def __init__(self, initial_lr: float, patience: int = 3):
        self.lr = initial_lr
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, cv_loss: float) -> bool:
        if cv_loss < self.best:
            self.best = cv_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr /= 2
            self.bad_epochs = 0
            return True
        return False


def lr_schedule(cv_history: Sequence[float], initial_lr: float, patience: int = 3) -> list[float]:
    """Learning rate in effect after each epoch of ``cv_history``."""
    sched = PlateauHalving(initial_lr, patience)
    out = []
    for v in cv_history:
        sched.step(v)
        out.append(sched.lr)
    return out


# -- data ---------------------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    mixture: np.ndarray
    target: np.ndarray
    enrolment: np.ndarray
    sample_rate: int


def load_utterances(entries: Sequence[ManifestEntry], what: str = "manifest") -> list[Utterance]:
    """Load audio for each entry, skipping unreadable ones; fail when more than 10% are skipped."""
    out, skipped = [], 0
    for e in entries:
        try:
            if e.target_path is None:
                raise PreconditionError("no target reference")
            mix, tgt, enr = load_wav(e.mixture_path), load_wav(e.target_path), load_wav(e.enrolment_path)
            if len(mix) != len(tgt) or not (mix.sample_rate == tgt.sample_rate == enr.sample_rate):
                raise ShapeError("mixture/target/enrolment lengths or rates disagree")
        except (OSError, SpxError) as exc:
            warnings.warn(f"{what}: skipping {e.id}: {exc}", stacklevel=2)
            skipped += 1
            continue
        out.append(Utterance(e.id, np.array(mix.samples), np.array(tgt.samples), np.array(enr.samples), mix.sample_rate))
    if not entries:
        raise PreconditionError(f"{what} is empty")
    if skipped > 0.1 * len(entries):
        raise PreconditionError(f"{what}: {skipped} of {len(entries)} entries unreadable (more than 10%)")
    return out


def _crop(utt: Utterance, chunk: int, rng: np.random.Generator):
    n = len(utt.mixture)
    if n >= chunk:
        start = int(rng.integers(0, n - chunk + 1))
        return utt.mixture[start:start + chunk], utt.target[start:start + chunk], chunk
    pad = chunk - n
    return np.pad(utt.mixture, (0, pad)), np.pad(utt.target, (0, pad)), n


def _embeddings(model: SpxModel, enrolments: Sequence[np.ndarray], dtype) -> torch.Tensor:
    return torch.cat([model.encode_speaker(torch.as_tensor(e, dtype=dtype).unsqueeze(0)) for e in enrolments])


def _check_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value):
        raise NumericalError(f"non-finite loss ({float(value.detach())}) at {where}")


def _means(totals: dict, counts: dict, spec: LossSpec) -> dict:
    out = {k: totals[k] / counts[k] for k in totals}
    if spec.uses_stoi:
        # None when no example reached the STOI minimum length
        out.setdefault("stoi_loss", None)
    return out


@torch.no_grad()
def evaluate_loss(model: SpxModel, utts: Sequence[Utterance], spec: LossSpec) -> dict:
    """Mean loss over full-length utterances (no cropping)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    totals: dict[str, float] = {}
    counts: dict[str, int] = {}
    for u in utts:
        mix = torch.as_tensor(u.mixture, dtype=dtype).unsqueeze(0)
        tgt = torch.as_tensor(u.target, dtype=dtype).unsqueeze(0)
        est = model(mix, embedding=_embeddings(model, [u.enrolment], dtype))
        loss, terms = batch_loss(tgt, est, spec, u.sample_rate)
        _check_finite(loss, f"evaluation of {u.id}")
        for k, v in {"loss": float(loss), **terms}.items():
            totals[k] = totals.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
    return _means(totals, counts, spec)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    cv_loss: float
    lr_halved: bool
    terms: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d.update(d.pop("terms"))
        return json.dumps(d, sort_keys=True)


def make_optimizer(model: SpxModel, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def train(model: SpxModel, train_manifest, cv_manifest, loss: LossSpec = LossSpec(),
          cfg: TrainConfig = TrainConfig(), log_path=None) -> tuple[SpxModel, list[EpochRecord]]:
    """Adam training with random chunk crops and plateau learning-rate halving.

    ``train_manifest``/``cv_manifest`` may be paths or already-loaded
    :class:`Utterance` lists. Each epoch appends one JSON line to ``log_path``.
    """
    train_utts = _resolve(train_manifest, "training manifest")
    cv_utts = _resolve(cv_manifest, "CV manifest")
    rate = train_utts[0].sample_rate
    if any(u.sample_rate != rate for u in train_utts + cv_utts):
        raise ShapeError("all utterances must share one sample rate")
    chunk = int(round(cfg.chunk_seconds * rate))
    if chunk < model.cfg.L:
        raise ConfigurationError(f"chunk of {chunk} samples is shorter than L = {model.cfg.L}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = make_optimizer(model, cfg.initial_lr)
    sched = PlateauHalving(cfg.initial_lr, cfg.lr_halving_patience)
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        lr = sched.lr
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(train_utts))
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        n_batches = 0
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_utts[i] for i in order[b0:b0 + cfg.batch_size]]
            crops = [_crop(u, chunk, rng) for u in batch]
            mix = torch.as_tensor(np.stack([c[0] for c in crops]), dtype=dtype)
            tgt = torch.as_tensor(np.stack([c[1] for c in crops]), dtype=dtype)
            valid = [c[2] for c in crops]
            est = model(mix, embedding=_embeddings(model, [u.enrolment for u in batch], dtype))
            value, terms = batch_loss(tgt, est, loss, rate, valid)
            _check_finite(value, f"epoch {epoch}, batch {n_batches + 1} ({', '.join(u.id for u in batch)})")
            opt.zero_grad()
            value.backward()
            opt.step()
            n_batches += 1
            for k, v in {"loss": float(value.detach()), **terms}.items():
                sums[k] = sums.get(k, 0.0) + v
                counts[k] = counts.get(k, 0) + 1
        train_stats = _means(sums, counts, loss)
        cv_stats = evaluate_loss(model, cv_utts, loss)
        halved = sched.step(cv_stats["loss"])
        terms = {f"train_{k}": v for k, v in train_stats.items() if k != "loss"}
        terms.update({f"cv_{k}": v for k, v in cv_stats.items() if k != "loss"})
        rec = EpochRecord(epoch, lr, train_stats["loss"], cv_stats["loss"], halved, terms)
        history.append(rec)
        log.info("epoch %d lr %.3g train %.4f cv %.4f", epoch, lr, rec.train_loss, rec.cv_loss)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
    model.eval()
    return model, history


def _resolve(manifest, what):
    if isinstance(manifest, (str, Path)):
        return load_utterances(read_manifest(manifest), what)
    utts = list(manifest)
    if not utts:
        raise PreconditionError(f"{what} is empty")
    return utts


# -- gradient verification --------------------------------------------------------

GRAD_CHECK_MAX_SAMPLES = 8000


@dataclass
class TensorCheck:
    name: str
    numel: int
    checked: int  # probes scored (at the nominal or a reduced step)
    reduced: int  # of those, probes that needed a reduced step
    kinks: int  # probes excluded: a kink within every tried step
    max_rel_error: float
    max_abs_grad: float


@dataclass
class GradCheckReport:
    loss: str
    step: float
    tensors: list[TensorCheck]

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol

    def format(self) -> str:
        lines = [f"loss={self.loss} step={self.step:g}"]
        for t in self.tensors:
            lines.append(f"  {t.name:<40} n={t.numel:<6} checked={t.checked:<3} reduced={t.reduced:<3} kinks={t.kinks:<3} "
                         f"max_rel={t.max_rel_error:.2e} max|g|={t.max_abs_grad:.2e}")
        lines.append(f"max relative error {self.max_rel_error:.3e}")
        return "\n".join(lines)


def grad_check(model: SpxModel, mixture: AudioSignal, enrolment: AudioSignal, target: AudioSignal,
               loss: LossSpec = LossSpec(), per_tensor: int = 50, step: float = 1e-4, seed: int = 0,
               embedding_scale: float = 1.0, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd parameter gradients with central finite differences.

    Runs on a float64 copy of ``model``; up to ``per_tensor`` entries of each
    tensor are probed. The sign pattern of every ReLU/PReLU input and the
    STOI clipping branch is recorded at the probe's +step and -step points;
    if either differs from the unperturbed pattern, a non-differentiable
    point lies inside the difference interval. Such a probe is retried with
    the step divided by 4, 16 and 64, and counted as a kink (not scored)
    only if every step straddles one.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``.
    """
    if len(mixture) > GRAD_CHECK_MAX_SAMPLES:
        raise PreconditionError(f"grad_check needs short inputs (<= {GRAD_CHECK_MAX_SAMPLES} samples)")
    if len(target) != len(mixture):
        raise ShapeError("mixture and target lengths differ")
    m = SpxModel(model.cfg).double()
    m.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
    m.eval()
    rate = mixture.sample_rate
    mix = torch.tensor(mixture.samples, dtype=torch.float64).unsqueeze(0)
    enr = torch.tensor(enrolment.samples, dtype=torch.float64).unsqueeze(0)
    tgt = torch.tensor(target.samples, dtype=torch.float64).unsqueeze(0)

    pattern: list[torch.Tensor] = []

    def record(_module, inputs, _output):
        pattern.append((inputs[0] > 0).detach())

    hooks = [mod.register_forward_hook(record) for mod in m.modules()
             if isinstance(mod, (torch.nn.ReLU, torch.nn.PReLU))]

    def objective():
        pattern.clear()
        est = m(mix, enr, embedding_scale=embedding_scale)
        value = batch_loss(tgt, est, loss, rate, branches=pattern)[0]
        return value, list(pattern)

    def same(a, b):
        return all(torch.equal(x, y) for x, y in zip(a, b))

    try:
        m.zero_grad()
        value, base_pattern = objective()
        value.backward()
        rng = np.random.default_rng(seed)
        checks = []
        with torch.no_grad():
            for name, p in m.named_parameters():
                g = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
                flat = p.data.view(-1)
                if flat.numel() <= per_tensor:
                    idx = np.arange(flat.numel())
                else:
                    idx = np.sort(rng.choice(flat.numel(), per_tensor, replace=False))
                worst, kinks, reduced = 0.0, 0, 0
                for i in idx.tolist():
                    orig = float(flat[i])
                    num = None
                    for h in (step, step / 4, step / 16, step / 64):
                        flat[i] = orig + h
                        f_plus, pat_plus = objective()
                        flat[i] = orig - h
                        f_minus, pat_minus = objective()
                        flat[i] = orig
                        if same(pat_plus, base_pattern) and same(pat_minus, base_pattern):
                            num = (float(f_plus) - float(f_minus)) / (2 * h)
                            reduced += h != step
                            break
                    if num is None:
                        kinks += 1
                        continue
                    ana = float(g[i])
                    worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), abs_floor))
                checks.append(TensorCheck(name, flat.numel(), len(idx) - kinks, reduced, kinks, worst,
                                          float(g.abs().max())))
    finally:
        for h in hooks:
            h.remove()
    return GradCheckReport(loss.kind, step, checks)
