"""Data-dependent-prior diffusion decoder.

Forward process (mean-reverting towards the prior ``xbar``)::

    dX_t = 0.5 * (xbar - X_t) * beta(t) dt + sqrt(beta(t)) dW_t,   t in [0, 1]

with a linear schedule ``beta(t) = beta0 + (beta1 - beta0) t``. Its transition
kernel is Gaussian with mean ``xbar + (x0 - xbar) exp(-B(t)/2)`` and variance
``1 - exp(-B(t))`` where ``B`` is the integral of ``beta``. The score network
is trained with lambda-weighted denoising score matching and sampled by
integrating the reverse-time SDE with Euler-Maruyama.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import LOG_FLOOR, N_MELS
from .checkpoint import load_checkpoint, save_checkpoint, state_digest

log = logging.getLogger(__name__)

T_MIN = 1e-5


def _exp(x):
    return torch.exp(x) if torch.is_tensor(x) else np.exp(x)


def _expm1(x):
    return torch.expm1(x) if torch.is_tensor(x) else np.expm1(x)


@dataclass(frozen=True)
class NoiseSchedule:
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta0 < self.beta1:
            raise ValueError(f"need 0 < beta0 < beta1, got ({self.beta0}, {self.beta1})")

    def beta(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * t

    def integral(self, t):
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t ** 2

    def variance(self, t):
        """lambda(t) = 1 - exp(-B(t))."""
        return -_expm1(-self.integral(t))

    def mean_coef(self, t):
        return _exp(-0.5 * self.integral(t))

    def kernel_mean(self, x0, xbar, t):
        """``xbar + (x0 - xbar) exp(-B/2)``, written so t = 0 returns ``x0`` exactly."""
        return x0 * self.mean_coef(t) - xbar * _expm1(-0.5 * self.integral(t))


def _check_time(t, lo=0.0):
    tt = t if torch.is_tensor(t) else np.asarray(t)
    if tt.min() < lo or tt.max() > 1.0:
        raise ValueError(f"diffusion time must lie in [{lo}, 1]")


def B_integral(s: NoiseSchedule, t):
    _check_time(t)
    return s.integral(t)


def _bcast(t, like):
    """Reshape a per-batch time to broadcast against ``like``."""
    if torch.is_tensor(t) and t.ndim == 1 and torch.is_tensor(like) and like.ndim > 1:
        return t.view(-1, *([1] * (like.ndim - 1)))
    if isinstance(t, np.ndarray) and t.ndim == 1 and np.ndim(like) > 1:
        return t.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return t


def forward_sample(x0, xbar, t, noise, s: NoiseSchedule = NoiseSchedule()):
    """Draw ``x_t | x0`` from the exact transition kernel given a standard-normal ``noise``."""
    if np.shape(x0) != np.shape(xbar) or np.shape(x0) != np.shape(noise):
        raise ValueError(f"shape mismatch: x0 {np.shape(x0)}, xbar {np.shape(xbar)}, noise {np.shape(noise)}")
    _check_time(t)
    tb = _bcast(t, x0)
    lam = s.variance(tb)
    root = torch.sqrt(lam) if torch.is_tensor(lam) else np.sqrt(lam)
    return s.kernel_mean(x0, xbar, tb) + root * noise


def score_target(x_t, x0, xbar, t, s: NoiseSchedule = NoiseSchedule(), t_min: float = T_MIN):
    """Exact conditional score ``-(x_t - mean_t) / lambda(t)``."""
    _check_time(t, lo=t_min)
    tb = _bcast(t, x0)
    return -(x_t - s.kernel_mean(x0, xbar, tb)) / s.variance(tb)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass
class DecoderConfig:
    n_mels: int = N_MELS
    spk_dim: int = 256
    base_width: int = 64
    dim_mults: tuple[int, ...] = (1, 2, 4, 8)
    cond_channels: int = 128
    groups: int = 8
    attention: bool = True
    crop_frames: int = 128
    cond_frames: int = 64
    beta0: float = 0.05
    beta1: float = 20.0
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    max_steps: int | None = None
    grad_clip: float = 1.0

    def __post_init__(self):
        self.dim_mults = tuple(self.dim_mults)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.beta0, self.beta1)

    def arch_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items()
                if k in ("n_mels", "spk_dim", "base_width", "dim_mults", "cond_channels", "groups",
                         "attention", "beta0", "beta1")}


class SinusoidalPosEmb(nn.Module):
    def __init__(self, dim: int, scale: float = 1000.0):
        super().__init__()
        self.dim = dim
        self.scale = scale

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(torch.arange(half, device=t.device, dtype=t.dtype) * -(math.log(10000.0) / (half - 1)))
        arg = self.scale * t[:, None] * freqs[None, :]
        return torch.cat([arg.sin(), arg.cos()], dim=-1)


class SpeakerConditioner(nn.Module):
    """Maps (speaker embedding, diffusion time) to a ``cond_channels`` vector."""

    def __init__(self, spk_dim: int, out_dim: int = 128, pe_dim: int = 64):
        super().__init__()
        self.spk_dim = spk_dim
        self.pos = SinusoidalPosEmb(pe_dim)
        hidden = 4 * out_dim
        self.mlp = nn.Sequential(
            nn.Linear(spk_dim + pe_dim, hidden), nn.Mish(),
            nn.Linear(hidden, hidden), nn.Mish(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, emb, t):
        if emb.shape[-1] != self.spk_dim:
            raise ValueError(f"speaker embedding has {emb.shape[-1]} dims, conditioner expects {self.spk_dim}")
        return self.mlp(torch.cat([emb, self.pos(t)], dim=-1))


class Block(nn.Module):
    def __init__(self, dim, dim_out, groups):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(dim, dim_out, 3, padding=1), nn.GroupNorm(groups, dim_out), nn.Mish())

    def forward(self, x):
        return self.net(x)


class ResnetBlock(nn.Module):
    def __init__(self, dim, dim_out, time_dim, groups):
        super().__init__()
        self.mlp = nn.Sequential(nn.Mish(), nn.Linear(time_dim, dim_out))
        self.block1 = Block(dim, dim_out, groups)
        self.block2 = Block(dim_out, dim_out, groups)
        self.res_conv = nn.Conv2d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x, t_emb):
        h = self.block1(x) + self.mlp(t_emb)[:, :, None, None]
        return self.block2(h) + self.res_conv(x)


class LinearAttention(nn.Module):
    def __init__(self, dim, heads=4, dim_head=32):
        super().__init__()
        self.heads = heads
        hidden = heads * dim_head
        self.to_qkv = nn.Conv2d(dim, hidden * 3, 1, bias=False)
        self.to_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.to_qkv(x).reshape(b, 3, self.heads, -1, h * w).unbind(1)
        k = k.softmax(dim=-1)
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q)
        return self.to_out(out.reshape(b, -1, h, w)) + x


class ScoreNetwork(nn.Module):
    """U-Net estimating the score of ``x_t`` given the prior and a speaker.

    Input channels are ``[x_t, xbar, c(e, t) broadcast]`` where ``c`` has
    ``cond_channels`` entries, i.e. 130 channels at the default width.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_width
        self.time_pos = SinusoidalPosEmb(base)
        self.time_mlp = nn.Sequential(nn.Linear(base, base * 4), nn.Mish(), nn.Linear(base * 4, base))
        self.conditioner = SpeakerConditioner(cfg.spk_dim, cfg.cond_channels, pe_dim=base)
        dims = [2 + cfg.cond_channels, *[base * m for m in cfg.dim_mults]]
        pairs = list(zip(dims[:-1], dims[1:]))
        n = len(pairs)
        attn = (lambda d: LinearAttention(d)) if cfg.attention else (lambda d: nn.Identity())

        self.downs = nn.ModuleList()
        for i, (d_in, d_out) in enumerate(pairs):
            last = i == n - 1
            self.downs.append(nn.ModuleList([
                ResnetBlock(d_in, d_out, base, cfg.groups),
                ResnetBlock(d_out, d_out, base, cfg.groups),
                attn(d_out),
                nn.Conv2d(d_out, d_out, 3, 2, 1) if not last else nn.Identity(),
            ]))
        mid = dims[-1]
        self.mid1 = ResnetBlock(mid, mid, base, cfg.groups)
        self.mid_attn = attn(mid)
        self.mid2 = ResnetBlock(mid, mid, base, cfg.groups)
        self.ups = nn.ModuleList()
        for d_in, d_out in reversed(pairs[1:]):
            self.ups.append(nn.ModuleList([
                ResnetBlock(d_out * 2, d_in, base, cfg.groups),
                ResnetBlock(d_in, d_in, base, cfg.groups),
                attn(d_in),
                nn.ConvTranspose2d(d_in, d_in, 4, 2, 1),
            ]))
        self.final_block = Block(base, base, cfg.groups)
        self.final_conv = nn.Conv2d(base, 1, 1)

    @property
    def internal_multiple(self) -> int:
        return 2 ** (len(self.cfg.dim_mults) - 1)

    def forward(self, x, xbar, t, emb):
        """``x``, ``xbar``: (B, n_mels, F) with F % 4 == 0; ``t``: (B,); ``emb``: (B, spk_dim)."""
        b, n_mels, frames = x.shape
        if frames % 4:
            raise ValueError(f"frame count {frames} is not a multiple of 4; pad before calling the decoder")
        if n_mels != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {n_mels}")
        if t.ndim == 0:
            t = t.expand(b)
        m = self.internal_multiple
        pf, pt = (-n_mels) % m, (-frames) % m
        if pf or pt:
            x = F.pad(x, (0, pt, 0, pf), value=LOG_FLOOR)
            xbar = F.pad(xbar, (0, pt, 0, pf), value=LOG_FLOOR)
        t_emb = self.time_mlp(self.time_pos(t))
        c = self.conditioner(emb, t)
        h = torch.cat([x[:, None], xbar[:, None], c[:, :, None, None].expand(-1, -1, x.shape[1], x.shape[2])], 1)

        skips = []
        for res1, res2, attn, down in self.downs:
            h = res1(h, t_emb)
            h = res2(h, t_emb)
            h = attn(h)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, t_emb)
        h = self.mid_attn(h)
        h = self.mid2(h, t_emb)
        for res1, res2, attn, up in self.ups:
            h = torch.cat([h, skips.pop()], dim=1)
            h = res1(h, t_emb)
            h = res2(h, t_emb)
            h = attn(h)
            h = up(h)
        # the network predicts the injected noise; the score is -eps / sqrt(lambda(t))
        eps = self.final_conv(self.final_block(h))[:, 0][:, :n_mels, :frames]
        lam = self.cfg.schedule.variance(t).to(eps.dtype).view(-1, 1, 1)
        return -eps / torch.sqrt(lam)


def build_speaker_condition(net: ScoreNetwork, emb, t):
    """128-dim conditioning vector(s) for embedding(s) ``emb`` at time(s) ``t``."""
    emb = torch.as_tensor(emb, dtype=torch.float32)
    squeeze = emb.ndim == 1
    emb = emb.reshape(-1, emb.shape[-1])
    t = torch.as_tensor(t, dtype=emb.dtype).reshape(-1).expand(emb.shape[0])
    c = net.conditioner(emb, t)
    return c[0] if squeeze else c


def score_forward(net: ScoreNetwork, x_t, xbar, t, emb):
    return net(x_t, xbar, t, emb)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def decoder_loss(score_fn, x0, xbar, emb, generator: torch.Generator,
                 s: NoiseSchedule = NoiseSchedule(), mask=None, t_min: float = T_MIN):
    """Lambda-weighted denoising score matching.

    ``mean((sqrt(lambda(t)) * score(x_t) + noise) ** 2)`` over unmasked
    elements, with ``t ~ U[t_min, 1]`` per batch item.
    """
    b = x0.shape[0]
    t = t_min + (1.0 - t_min) * torch.rand(b, generator=generator, dtype=x0.dtype)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_sample(x0, xbar, t, noise, s)
    score = score_fn(x_t, xbar, t, emb)
    lam = s.variance(t).view(-1, *([1] * (x0.ndim - 1)))
    err = (torch.sqrt(lam) * score + noise) ** 2
    if mask is None:
        loss = err.mean()
    else:
        mask = mask.expand_as(err)
        loss = (err * mask).sum() / mask.sum()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite decoder loss (t range {t.min():.3g}..{t.max():.3g})")
    return loss


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def reverse_sde_sample(score_fn: Callable, xbar, n_steps: int = 100, seed: int = 0,
                       s: NoiseSchedule = NoiseSchedule(), cond=None, pad_multiple: int = 1,
                       stochastic: bool = True):
    """Integrate the reverse-time SDE from ``N(xbar, I)`` at t=1 down to t≈0.

    ``score_fn(x, xbar, t, cond)`` must return the score of ``x`` at time
    ``t`` (a batch vector). The last axis of ``xbar`` is time; it is padded
    with the log floor to a multiple of ``pad_multiple`` and trimmed again.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    xbar = torch.as_tensor(xbar)
    n = xbar.shape[-1]
    pad = (-n) % pad_multiple
    if pad:
        xbar = F.pad(xbar, (0, pad), value=LOG_FLOOR)
    g = torch.Generator().manual_seed(int(seed))
    batch = xbar.shape[0] if xbar.ndim > 1 else 1
    h = 1.0 / n_steps
    x = xbar + torch.randn(xbar.shape, generator=g, dtype=xbar.dtype)
    with torch.no_grad():
        for i in range(n_steps):
            t = 1.0 - (i + 0.5) * h
            tb = torch.full((batch,), t, dtype=xbar.dtype)
            beta = s.beta(t)
            drift = 0.5 * (xbar - x) - score_fn(x, xbar, tb, cond)
            x = x - h * beta * drift
            if stochastic:
                x = x + math.sqrt(beta * h) * torch.randn(x.shape, generator=g, dtype=x.dtype)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"reverse diffusion diverged at step {i} (t={t:.4f})")
    return x[..., :n]


def decode_mel(net: ScoreNetwork, xbar_frames: np.ndarray, embedding: np.ndarray,
               n_steps: int = 100, seed: int = 0) -> np.ndarray:
    """Sample a ``(F, n_mels)`` mel matrix for prior ``xbar_frames`` and a speaker embedding."""
    net.eval()
    xbar = torch.as_tensor(np.asarray(xbar_frames).T[None], dtype=torch.float32)
    emb = torch.as_tensor(np.asarray(embedding)[None], dtype=torch.float32)
    out = reverse_sde_sample(net, xbar, n_steps, seed, net.cfg.schedule, cond=emb, pad_multiple=4)
    return out[0].T.double().numpy()


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_state):
        super().__init__(message)
        self.last_good_state = last_good_state


@dataclass
class DecoderItem:
    """One utterance: target mel, its prior, and how to obtain a speaker embedding.

    ``embed_frames`` maps a (n, n_mels) mel segment to an embedding; if it is
    ``None``, the fixed ``embedding`` is used instead.
    """

    mel: np.ndarray
    prior: np.ndarray
    embedding: np.ndarray | None = None
    embed_frames: Callable[[np.ndarray], np.ndarray] | None = None


def _crop(arr: np.ndarray, start: int, length: int) -> tuple[np.ndarray, int]:
    seg = arr[start:start + length]
    valid = seg.shape[0]
    if valid < length:
        seg = np.concatenate([seg, np.full((length - valid, arr.shape[1]), LOG_FLOOR)], axis=0)
    return seg, valid


def make_decoder_batch(items: Sequence[DecoderItem], crop: int, cond_frames: int, rng: np.random.Generator):
    """Independent random reconstruction and conditioning crops per utterance."""
    x0s, priors, embs, masks = [], [], [], []
    for it in items:
        n = it.mel.shape[0]
        start = int(rng.integers(0, max(n - crop, 0) + 1))
        x0, valid = _crop(it.mel, start, crop)
        prior, _ = _crop(it.prior, start, crop)
        if it.embed_frames is not None:
            c_len = min(cond_frames, n)
            c_start = int(rng.integers(0, n - c_len + 1))
            emb = it.embed_frames(it.mel[c_start:c_start + c_len])
        else:
            emb = it.embedding
        mask = np.zeros((1, crop))
        mask[:, :valid] = 1.0
        x0s.append(x0.T)
        priors.append(prior.T)
        embs.append(emb)
        masks.append(mask)
    as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)
    return as_t(x0s), as_t(priors), as_t(embs), as_t(masks)


@dataclass
class TrainLog:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def _fit_decoder(net: ScoreNetwork, items: Sequence[DecoderItem], cfg: DecoderConfig, seed: int,
                 lr: float, batch_size: int, epochs: int, max_steps: int | None) -> TrainLog:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    schedule = cfg.schedule
    log_ = TrainLog()
    step = 0
    last_good = {k: v.clone() for k, v in net.state_dict().items()}
    net.train()
    for epoch in range(epochs):
        order = rng.permutation(len(items))
        epoch_losses = []
        for i in range(0, len(order), batch_size):
            batch = [items[j] for j in order[i:i + batch_size]]
            x0, prior, emb, mask = make_decoder_batch(batch, cfg.crop_frames, cfg.cond_frames, rng)
            try:
                loss = decoder_loss(net, x0, prior, emb, gen, schedule, mask)
            except FloatingPointError as exc:
                net.load_state_dict(last_good)
                raise TrainingDiverged(f"decoder training diverged at step {step}: {exc}", last_good) from exc
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            log_.step_losses.append(loss.item())
            epoch_losses.append(loss.item())
            step += 1
            if step % 50 == 0:
                last_good = {k: v.clone() for k, v in net.state_dict().items()}
            if max_steps is not None and step >= max_steps:
                break
        log_.epoch_losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        log.info("decoder epoch %d: loss %.4f", epoch, log_.epoch_losses[-1])
        if max_steps is not None and step >= max_steps:
            break
    net.eval()
    return log_


def train_decoder(items: Sequence[DecoderItem], cfg: DecoderConfig, seed: int = 0,
                  net: ScoreNetwork | None = None) -> tuple[ScoreNetwork, TrainLog]:
    """Pre-train the score network on typical speech (priors: ground-truth SIMS)."""
    torch.manual_seed(seed)
    net = net if net is not None else ScoreNetwork(cfg)
    return net, _fit_decoder(net, items, cfg, seed, cfg.lr, cfg.batch_size, cfg.epochs, cfg.max_steps)


@dataclass
class FinetuneConfig:
    lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 30
    max_steps: int | None = None
    prior: str = "encoder"

    def __post_init__(self):
        if self.prior not in ("encoder", "ground_truth"):
            raise ValueError(f"finetune prior must be 'encoder' or 'ground_truth', got {self.prior!r}")


def finetune_decoder(net: ScoreNetwork, items: Sequence[DecoderItem], ft: FinetuneConfig,
                     seed: int = 0) -> tuple[ScoreNetwork, TrainLog]:
    """Adapt a copy of a pre-trained network to a single target speaker."""
    tuned = ScoreNetwork(net.cfg)
    tuned.load_state_dict(net.state_dict())
    log_ = _fit_decoder(tuned, items, net.cfg, seed, ft.lr, ft.batch_size, ft.epochs, ft.max_steps)
    return tuned, log_


def save_decoder(path, net: ScoreNetwork, speaker: str | None = None, meta: dict | None = None) -> None:
    state = net.state_dict()
    info = {"speaker": speaker, "params": count_parameters(net), "digest": state_digest(state), **(meta or {})}
    save_checkpoint(path, "decoder", net.cfg.arch_dict(), state, info)


def load_decoder(path, cfg: DecoderConfig | None = None) -> tuple[ScoreNetwork, dict]:
    arch, state, meta = load_checkpoint(path, "decoder")
    base = asdict(cfg) if cfg is not None else {}
    base.update(arch)
    net = ScoreNetwork(DecoderConfig(**base))
    net.load_state_dict(state)
    net.eval()
    return net, meta
