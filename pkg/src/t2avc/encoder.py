"""Content encoder: mel -> speaker-independent mel, phoneme posteriors, log durations."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import N_MELS, MelSpectrogram
from .checkpoint import load_checkpoint, save_checkpoint, state_digest
from .diffusion import TrainLog, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    n_phonemes: int
    n_mels: int = N_MELS
    d_model: int = 192
    n_heads: int = 2
    n_blocks: int = 6
    d_ff: int = 768
    prenet_kernel: int = 5
    prenet_layers: int = 3
    head_channels: int = 256
    head_kernel: int = 3
    dropout: float = 0.1
    lr: float = 5e-4
    batch_size: int = 128
    epochs: int = 200
    max_steps: int | None = None
    lambda_phon: float = 1.0
    lambda_dur: float = 1.0
    grad_clip: float = 1.0

    def arch_dict(self) -> dict:
        keep = ("n_phonemes", "n_mels", "d_model", "n_heads", "n_blocks", "d_ff", "prenet_kernel",
                "prenet_layers", "head_channels", "head_kernel", "dropout")
        return {k: v for k, v in asdict(self).items() if k in keep}


class ConvLayer(nn.Module):
    """Conv1d over frames + LayerNorm + GELU + dropout; input/output (B, F, C)."""

    def __init__(self, c_in, c_out, kernel, dropout):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, padding=kernel // 2)
        self.norm = nn.LayerNorm(c_out)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.conv((x * mask).transpose(1, 2)).transpose(1, 2)
        return self.drop(F.gelu(self.norm(h))) * mask


class PreNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.inp = nn.Linear(cfg.n_mels, cfg.d_model)
        self.layers = nn.ModuleList(
            ConvLayer(cfg.d_model, cfg.d_model, cfg.prenet_kernel, cfg.dropout) for _ in range(cfg.prenet_layers))
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, mask):
        x = self.inp(x) * mask
        h = x
        for layer in self.layers:
            h = layer(h, mask)
        return (x + self.proj(h)) * mask


class TransformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = nn.MultiheadAttention(cfg.d_model, cfg.n_heads, dropout=cfg.dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Dropout(cfg.dropout), nn.Linear(cfg.d_ff, cfg.d_model))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask, pad_mask):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.drop(h)
        x = x + self.drop(self.ff(self.norm2(x)))
        return x * mask


class VariancePredictor(nn.Module):
    """Two conv layers and a linear projection."""

    def __init__(self, d_in, channels, kernel, out_dim, dropout):
        super().__init__()
        self.conv1 = ConvLayer(d_in, channels, kernel, dropout)
        self.conv2 = ConvLayer(channels, channels, kernel, dropout)
        self.proj = nn.Linear(channels, out_dim)

    def forward(self, x, mask):
        return self.proj(self.conv2(self.conv1(x, mask), mask)) * mask


def sinusoid_table(n, d):
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float32) * -(math.log(10000.0) / d))
    pe = torch.zeros(n, d)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d // 2])
    return pe


class ContentEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.prenet = PreNet(cfg)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.sims_proj = nn.Linear(cfg.d_model, cfg.n_mels)
        self.phoneme_head = VariancePredictor(cfg.d_model, cfg.head_channels, cfg.head_kernel, cfg.n_phonemes,
                                              cfg.dropout)
        self.duration_head = VariancePredictor(cfg.d_model, cfg.head_channels, cfg.head_kernel, 1, cfg.dropout)

    def forward(self, mel, lengths=None):
        """``mel``: (B, F, n_mels). Returns (sims, logits, log_dur) each (B, F, ·)."""
        b, f, n_mels = mel.shape
        if n_mels != self.cfg.n_mels:
            raise ValueError(f"encoder expects {self.cfg.n_mels} mel bins, got {n_mels}")
        if lengths is None:
            lengths = torch.full((b,), f, dtype=torch.long)
        pad_mask = torch.arange(f)[None, :] >= lengths[:, None]
        mask = (~pad_mask).to(mel.dtype)[:, :, None]
        h = self.prenet(mel, mask)
        h = (h + sinusoid_table(f, self.cfg.d_model).to(h.dtype)) * mask
        for block in self.blocks:
            h = block(h, mask, pad_mask)
        h = self.norm(h) * mask
        return self.sims_proj(h) * mask, self.phoneme_head(h, mask), self.duration_head(h, mask)


@dataclass
class EncoderOutput:
    sims_pred: np.ndarray
    phoneme_logits: np.ndarray
    log_dur_pred: np.ndarray


def encode(model: ContentEncoder, m: MelSpectrogram) -> EncoderOutput:
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(m.frames[None], dtype=torch.float32)
        sims, logits, log_dur = model(x)
    return EncoderOutput(sims[0].double().numpy(), logits[0].double().numpy(), log_dur[0].double().numpy())


@dataclass
class EncoderLosses:
    sims: torch.Tensor
    phon: torch.Tensor
    dur: torch.Tensor
    total: torch.Tensor


def encoder_loss(sims_pred, logits, log_dur_pred, gt_sims, gt_labels, gt_log_dur, dur_mask,
                 frame_mask=None, lambda_phon: float = 1.0, lambda_dur: float = 1.0) -> EncoderLosses:
    """MSE to the SIMS target, frame cross-entropy and masked log-duration MSE.

    Shapes: ``sims_pred``/``gt_sims`` (B, F, n_mels), ``logits`` (B, F, P),
    ``log_dur_pred`` (B, F, 1), ``gt_labels``/``gt_log_dur``/``dur_mask`` (B, F).
    ``dur_mask`` is False on silence frames; ``frame_mask`` on padding.
    """
    if frame_mask is None:
        frame_mask = torch.ones(gt_labels.shape, dtype=torch.bool)
    fm = frame_mask.to(sims_pred.dtype)
    n_valid = fm.sum()
    l_sims = (((sims_pred - gt_sims) ** 2).mean(-1) * fm).sum() / n_valid
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gt_labels.reshape(-1), reduction="none")
    l_phon = (ce.view_as(fm) * fm).sum() / n_valid
    dm = (dur_mask & frame_mask).to(sims_pred.dtype)
    if dm.sum() > 0:
        l_dur = (((log_dur_pred[..., 0] - gt_log_dur) ** 2) * dm).sum() / dm.sum()
    else:
        l_dur = log_dur_pred.sum() * 0.0
    total = l_sims + lambda_phon * l_phon + lambda_dur * l_dur
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite encoder loss: sims={l_sims.item()}, phon={l_phon.item()}, dur={l_dur.item()}")
    return EncoderLosses(l_sims, l_phon, l_dur, total)


@dataclass
class EncoderItem:
    """Training targets for one typical utterance (all arrays frame-aligned)."""

    mel: np.ndarray
    sims: np.ndarray
    labels: np.ndarray
    log_dur: np.ndarray
    dur_mask: np.ndarray


def collate_encoder(items: Sequence[EncoderItem]):
    lengths = torch.tensor([it.mel.shape[0] for it in items])
    f = int(lengths.max())
    b = len(items)
    n_mels = items[0].mel.shape[1]
    mel = torch.zeros(b, f, n_mels)
    sims = torch.zeros(b, f, n_mels)
    labels = torch.zeros(b, f, dtype=torch.long)
    log_dur = torch.zeros(b, f)
    dur_mask = torch.zeros(b, f, dtype=torch.bool)
    for i, it in enumerate(items):
        n = it.mel.shape[0]
        mel[i, :n] = torch.as_tensor(it.mel)
        sims[i, :n] = torch.as_tensor(it.sims)
        labels[i, :n] = torch.as_tensor(it.labels)
        log_dur[i, :n] = torch.as_tensor(it.log_dur)
        dur_mask[i, :n] = torch.as_tensor(it.dur_mask)
    frame_mask = torch.arange(f)[None, :] < lengths[:, None]
    return mel, lengths, sims, labels, log_dur, dur_mask, frame_mask


def batch_losses(model: ContentEncoder, batch, cfg: EncoderConfig) -> EncoderLosses:
    mel, lengths, sims, labels, log_dur, dur_mask, frame_mask = batch
    pred_sims, logits, pred_dur = model(mel, lengths)
    return encoder_loss(pred_sims, logits, pred_dur, sims, labels, log_dur, dur_mask, frame_mask,
                        cfg.lambda_phon, cfg.lambda_dur)


def train_encoder(items: Sequence[EncoderItem], cfg: EncoderConfig, seed: int = 0,
                  model: ContentEncoder | None = None) -> tuple[ContentEncoder, TrainLog]:
    """Adam training on typical speech; returns the model and its loss log."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = model if model is not None else ContentEncoder(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log_ = TrainLog()
    step = 0
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    model.train()
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = collate_encoder([items[j] for j in order[i:i + cfg.batch_size]])
            try:
                losses = batch_losses(model, batch, cfg)
            except FloatingPointError as exc:
                model.load_state_dict(last_good)
                raise TrainingDiverged(f"encoder training diverged at step {step}: {exc}", last_good) from exc
            opt.zero_grad()
            losses.total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            log_.step_losses.append(losses.total.item())
            epoch_losses.append(losses.total.item())
            step += 1
            if step % 50 == 0:
                last_good = {k: v.clone() for k, v in model.state_dict().items()}
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        log_.epoch_losses.append(float(np.mean(epoch_losses)))
        log.info("encoder epoch %d: loss %.4f", epoch, log_.epoch_losses[-1])
        if done:
            break
    model.eval()
    return model, log_


@dataclass
class DurationQuery:
    phoneme_set: frozenset[int]
    t_s: float
    t_t: float | None = None

    @property
    def n_phonemes(self) -> int:
        return len(self.phoneme_set)


class NoPhoneticContent(ValueError):
    pass


def segments(labels: Sequence[int]) -> list[tuple[int, int, int]]:
    """Runs of equal labels as ``(label, start, stop)``."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [len(labels)]])
    return [(int(labels[a]), int(a), int(b)) for a, b in zip(starts, stops)]


def source_duration_query(out: EncoderOutput) -> DurationQuery:
    """Predicted phoneme set and mean phoneme duration ``t_s`` of an utterance."""
    labels = out.phoneme_logits.argmax(axis=1)
    log_dur = np.asarray(out.log_dur_pred).reshape(-1)
    durs = [math.exp(log_dur[a:b].mean()) for p, a, b in segments(labels) if p != 0]
    if not durs:
        raise NoPhoneticContent("no phonetic content: every frame was predicted as silence")
    phones = frozenset(int(p) for p in labels if p != 0)
    return DurationQuery(phones, math.fsum(durs) / len(durs))


def save_encoder(path, model: ContentEncoder, inventory_digest: str, meta: dict | None = None) -> None:
    state = model.state_dict()
    info = {"inventory": inventory_digest, "digest": state_digest(state),
            "params": sum(p.numel() for p in model.parameters()), **(meta or {})}
    save_checkpoint(path, "encoder", model.cfg.arch_dict(), state, info)


def load_encoder(path) -> tuple[ContentEncoder, dict]:
    arch, state, meta = load_checkpoint(path, "encoder")
    model = ContentEncoder(EncoderConfig(**arch))
    model.load_state_dict(state)
    model.eval()
    return model, meta
