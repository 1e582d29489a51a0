"""Compact latent-diffusion video U-Net.

Three encoder blocks, one middle block and three decoder blocks. Every
block carries a ResNet sub-block, spatial self-attention, cross-attention
on the text condition and temporal attention over the frame axis, so the
seven blocks can be addressed 1..7 for adapter placement.

Tensors flowing through the network are laid out ``[F, C, h, w]``: the
frame axis doubles as the batch axis.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError, ValidationError

NORM_KINDS = ("group", "layer")


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------

@dataclass
class VideoClip:
    """Frame sequence ``[F, H, W, C]`` with values in [0, 1]."""

    frames: np.ndarray
    fps: float = 8.0
    id: str = "clip"

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise ShapeError(f"clip {self.id!r}: frames must be [F, H, W, C], got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise ShapeError(f"clip {self.id!r}: no frames")
        if not np.all(np.isfinite(frames)):
            raise NumericError(f"clip {self.id!r}: non-finite pixel values")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValidationError(f"clip {self.id!r}: pixel values outside [0, 1]")
        if self.fps <= 0:
            raise ValidationError(f"clip {self.id!r}: fps must be positive")
        self.frames = frames

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class LatentVideo:
    latents: torch.Tensor  # [F, C_l, h, w]
    timestep: Optional[int] = None

    @property
    def shape(self):
        return tuple(self.latents.shape)


@dataclass
class NoiseSchedule:
    """Cumulative signal rates indexed 0..T, with ``alphas_cumprod[0] == 1``."""

    total_steps: int
    alphas_cumprod: torch.Tensor  # float64, length T + 1

    def __post_init__(self):
        a = self.alphas_cumprod
        if a.shape != (self.total_steps + 1,):
            raise ValidationError("alphas_cumprod must have length T + 1")
        if a[0].item() != 1.0 or not bool(torch.all(a[1:] < a[:-1])) or a[-1].item() <= 0:
            raise ValidationError("alphas_cumprod must start at 1 and decrease strictly in (0, 1]")

    def alpha_bar(self, t):
        if not 0 <= t <= self.total_steps:
            raise ValidationError(f"timestep {t} outside [0, {self.total_steps}]")
        return self.alphas_cumprod[t]


def make_schedule(total_steps=1000, beta_start=0.00085, beta_end=0.012):
    """Scaled-linear beta schedule; ``alphas_cumprod[t] = prod_{s<=t} (1 - beta_s)``."""
    betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, total_steps, dtype=torch.float64) ** 2
    alphas_cumprod = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, 0)])
    return NoiseSchedule(total_steps, alphas_cumprod)


@dataclass
class BackboneConfig:
    image_channels: int = 3
    reduction: int = 8
    base_width: int = 32
    channel_mult: tuple = (1, 2, 2)
    cond_dim: int = 64
    max_tokens: int = 8
    heads: int = 4
    groups: int = 8
    resnet_norm: str = "group"
    attention_norm: str = "layer"
    norm_eps: float = 1e-5
    timesteps: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.validate()

    @property
    def latent_channels(self):
        # lossless patchify: every pixel of a d x d patch becomes a channel
        return self.image_channels * self.reduction ** 2

    @property
    def widths(self):
        return tuple(self.base_width * m for m in self.channel_mult)

    def validate(self):
        ints = dict(image_channels=self.image_channels, reduction=self.reduction,
                    base_width=self.base_width, cond_dim=self.cond_dim,
                    max_tokens=self.max_tokens, heads=self.heads, groups=self.groups,
                    timesteps=self.timesteps)
        for name, value in ints.items():
            if int(value) != value or value <= 0:
                raise ConfigError(f"backbone.{name} must be a positive integer, got {value!r}")
        d = self.reduction
        if d & (d - 1):
            raise ConfigError(f"backbone.reduction must be a power of two, got {d}")
        if len(self.channel_mult) != 3 or any(m <= 0 for m in self.channel_mult):
            raise ConfigError("backbone.channel_mult must hold three positive multipliers")
        for kind in (self.resnet_norm, self.attention_norm):
            if kind not in NORM_KINDS:
                raise ConfigError(f"norm kind must be one of {NORM_KINDS}, got {kind!r}")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"channel width {w} not divisible by groups={self.groups}")
            if w % self.heads:
                raise ConfigError(f"channel width {w} not divisible by heads={self.heads}")
        if self.norm_eps <= 0:
            raise ConfigError("backbone.norm_eps must be positive")

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d


# --------------------------------------------------------------------------
# autoencoder stand-in: lossless patchify
# --------------------------------------------------------------------------

def encode(clip, reduction=8, dtype=torch.float32):
    frames = clip.frames
    f, h, w, c = frames.shape
    d = reduction
    if h % d or w % d:
        raise ShapeError(f"frame size {h}x{w} not divisible by reduction {d}")
    x = frames.reshape(f, h // d, d, w // d, d, c).transpose(0, 5, 2, 4, 1, 3)
    x = np.ascontiguousarray(x).reshape(f, c * d * d, h // d, w // d)
    return LatentVideo(torch.from_numpy(x).to(dtype))


def decode(latent, reduction=8, image_channels=3, fps=8.0, id="decoded"):
    z = latent.latents if isinstance(latent, LatentVideo) else latent
    f, cl, h, w = z.shape
    d = reduction
    if cl != image_channels * d * d:
        raise ShapeError(f"latent has {cl} channels, expected {image_channels * d * d}")
    x = z.detach().cpu().numpy().reshape(f, image_channels, d, d, h, w)
    x = x.transpose(0, 4, 2, 5, 3, 1).reshape(f, h * d, w * d, image_channels)
    x = np.clip(x, 0.0, 1.0)
    return VideoClip(np.ascontiguousarray(x, dtype=np.float32), fps=fps, id=id)


# --------------------------------------------------------------------------
# text conditioning
# --------------------------------------------------------------------------

def _token_vector(token, dim):
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


class HashTextEmbedder:
    """Bag-of-words embedder: each token maps to a hash-seeded Gaussian vector.

    Output is a ``[max_tokens, dim]`` sequence (BOS, tokens, PAD...), so the
    empty string still has a well-defined embedding.
    """

    name = "hash-bow"

    def __init__(self, dim=64, max_tokens=8):
        self.dim = dim
        self.max_tokens = max_tokens

    @staticmethod
    def tokenize(text):
        return re.findall(r"[a-z0-9']+", text.lower())

    def __call__(self, text, dtype=torch.float32):
        tokens = ["<bos>"] + self.tokenize(text)[: self.max_tokens - 1]
        tokens += ["<pad>"] * (self.max_tokens - len(tokens))
        vecs = np.stack([_token_vector(tok, self.dim) for tok in tokens])
        return torch.from_numpy(vecs).to(dtype)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class ChannelNorm(nn.Module):
    """Group or layer normalization over the channel axis of ``[N, C, ...]``.

    ``gamma``/``beta`` are the learnable affine parameters. Layer norm
    normalizes each position over channels only.
    """

    def __init__(self, channels, kind="group", groups=8, eps=1e-5):
        super().__init__()
        if kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {kind!r}")
        self.channels = channels
        self.kind = kind
        self.groups = groups
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def normalize(self, x, gamma, beta):
        if x.shape[1] != self.channels:
            raise ShapeError(f"norm expects {self.channels} channels, got {x.shape[1]}")
        if self.kind == "group":
            return F.group_norm(x, self.groups, gamma, beta, self.eps)
        y = F.layer_norm(x.movedim(1, -1), (self.channels,), gamma, beta, self.eps)
        return y.movedim(-1, 1)

    def forward(self, x):
        return self.normalize(x, self.gamma, self.beta)

    def extra_repr(self):
        return f"{self.channels}, kind={self.kind}, eps={self.eps}"


def timestep_embedding(t, dim, dtype):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)]).to(dtype)


class ResnetBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, cfg):
        super().__init__()
        self.norm1 = ChannelNorm(cin, cfg.resnet_norm, cfg.groups, cfg.norm_eps)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = ChannelNorm(cout, cfg.resnet_norm, cfg.groups, cfg.norm_eps)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[None, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _attend(q, k, v, heads):
    n, lq, c = q.shape
    lk = k.shape[1]
    dh = c // heads
    q = q.reshape(n, lq, heads, dh).transpose(1, 2)
    k = k.reshape(n, lk, heads, dh).transpose(1, 2)
    v = v.reshape(n, lk, heads, dh).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    return (w @ v).transpose(1, 2).reshape(n, lq, c)


class SpatialAttention(nn.Module):
    """Pre-norm residual attention over the h*w tokens of each frame.

    With ``context_dim`` set it becomes cross-attention on the text tokens.
    """

    def __init__(self, channels, cfg, context_dim=None):
        super().__init__()
        self.heads = cfg.heads
        self.norm = ChannelNorm(channels, cfg.attention_norm, cfg.groups, cfg.norm_eps)
        kv_dim = context_dim or channels
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(kv_dim, channels, bias=False)
        self.to_v = nn.Linear(kv_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.is_cross = context_dim is not None

    def forward(self, x, context=None):
        f, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # [F, hw, C]
        if self.is_cross:
            ctx = context.unsqueeze(0).expand(f, -1, -1)
        else:
            ctx = tokens
        out = _attend(self.to_q(tokens), self.to_k(ctx), self.to_v(ctx), self.heads)
        out = self.to_out(out).transpose(1, 2).reshape(f, c, h, w)
        return x + out


class TemporalAttention(nn.Module):
    """Attention across frames at each spatial location."""

    def __init__(self, channels, cfg):
        super().__init__()
        self.heads = cfg.heads
        self.channels = channels
        self.norm = ChannelNorm(channels, cfg.attention_norm, cfg.groups, cfg.norm_eps)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x):
        f, c, h, w = x.shape
        tokens = self.norm(x).permute(2, 3, 0, 1).reshape(h * w, f, c)
        pos = torch.stack([timestep_embedding(i, c, x.dtype) for i in range(f)]).to(x.device)
        qk_in = tokens + pos
        out = _attend(self.to_q(qk_in), self.to_k(qk_in), self.to_v(tokens), self.heads)
        out = self.to_out(out).reshape(h, w, f, c).permute(2, 3, 0, 1)
        return x + out


class UNetBlock(nn.Module):
    """ResNet -> self-attention -> cross-attention -> [adapter] -> temporal attention."""

    def __init__(self, index, cin, cout, temb_dim, cfg):
        super().__init__()
        self.index = index
        self.resnet = ResnetBlock(cin, cout, temb_dim, cfg)
        self.self_attn = SpatialAttention(cout, cfg)
        self.cross_attn = SpatialAttention(cout, cfg, context_dim=cfg.cond_dim)
        self.adapter = None
        self.temporal_attn = TemporalAttention(cout, cfg)

    def forward(self, x, temb, cond):
        x = self.resnet(x, temb)
        x = self.self_attn(x)
        x = self.cross_attn(x, cond)
        if self.adapter is not None:
            x = self.adapter(x)
        return self.temporal_attn(x)


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, size):
        return self.conv(F.interpolate(x, size=size, mode="nearest"))


ConditionHook = Callable[[int, torch.Tensor, int], Optional[torch.Tensor]]


class UNetModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        base = config.base_width
        c1, c2, c3 = config.widths
        cl = config.latent_channels
        temb_dim = 4 * base
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cl, c1, 3, padding=1)

        self.enc1 = UNetBlock(1, c1, c1, temb_dim, config)
        self.down1 = Downsample(c1)
        self.enc2 = UNetBlock(2, c1, c2, temb_dim, config)
        self.down2 = Downsample(c2)
        self.enc3 = UNetBlock(3, c2, c3, temb_dim, config)
        self.mid = UNetBlock(4, c3, c3, temb_dim, config)
        self.dec5 = UNetBlock(5, c3 + c3, c3, temb_dim, config)
        self.up5 = Upsample(c3)
        self.dec6 = UNetBlock(6, c3 + c2, c2, temb_dim, config)
        self.up6 = Upsample(c2)
        self.dec7 = UNetBlock(7, c2 + c1, c1, temb_dim, config)

        self.norm_out = ChannelNorm(c1, "group", config.groups, config.norm_eps)
        self.conv_out = nn.Conv2d(c1, cl, 3, padding=1)

    def blocks(self):
        return [self.enc1, self.enc2, self.enc3, self.mid, self.dec5, self.dec6, self.dec7]

    def forward(self, z, t, cond, hook=None):
        temb = self.time_mlp(timestep_embedding(t, self.config.base_width, z.dtype).to(z.device))
        h1 = self.enc1(self.conv_in(z), temb, cond)
        h2 = self.enc2(self.down1(h1), temb, cond)
        h3 = self.enc3(self.down2(h2), temb, cond)
        h = self.mid(h3, temb, cond)

        h = self._decoder_step(self.dec5, torch.cat([h, h3], 1), temb, cond, t, hook)
        h = self.up5(h, h2.shape[-2:])
        h = self._decoder_step(self.dec6, torch.cat([h, h2], 1), temb, cond, t, hook)
        h = self.up6(h, h1.shape[-2:])
        h = self._decoder_step(self.dec7, torch.cat([h, h1], 1), temb, cond, t, hook)
        return self.conv_out(F.silu(self.norm_out(h)))

    @staticmethod
    def _decoder_step(block, x, temb, cond, t, hook):
        h = block(x, temb, cond)
        if hook is not None:
            residual = hook(block.index, h, t)
            if residual is not None:
                h = h + residual
        return h


class BlockHandle(NamedTuple):
    index: int
    name: str
    block: UNetBlock

    @property
    def cross_attn(self):
        return self.block.cross_attn


def build_unet(config=None, dtype=torch.float32):
    """Build a seeded, randomly initialized U-Net.

    Initialization runs under a forked RNG so the global torch generator is
    left untouched.
    """
    config = config or BackboneConfig()
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = UNetModel(config)
    return model.to(dtype)


def count_parameters(model, trainable_only=False):
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def list_attention_blocks(model):
    names = ["enc1", "enc2", "enc3", "mid", "dec5", "dec6", "dec7"]
    return [BlockHandle(i + 1, n, getattr(model, n)) for i, n in enumerate(names)]


def unet_forward(model, z_t, t, cond, hook=None):
    """Noise prediction eps_theta(z_t, t, c); output shape equals ``z_t``."""
    z = z_t.latents if isinstance(z_t, LatentVideo) else z_t
    cfg = model.config
    if z.ndim != 4 or z.shape[1] != cfg.latent_channels:
        raise ShapeError(f"latent must be [F, {cfg.latent_channels}, h, w], got {tuple(z.shape)}")
    if cond.ndim != 2 or cond.shape[1] != cfg.cond_dim:
        raise ShapeError(f"condition must be [L, {cfg.cond_dim}], got {tuple(cond.shape)}")
    if not 0 <= int(t) <= cfg.timesteps:
        raise ValidationError(f"timestep {t} outside [0, {cfg.timesteps}]")
    if not torch.isfinite(z).all():
        raise NumericError("non-finite latent input")
    return model(z, int(t), cond.to(z.dtype), hook=hook)
