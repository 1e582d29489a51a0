"""Deterministic DDIM sampling/inversion with classifier-free guidance.

Anything callable as ``predictor(z_t, t, cond) -> eps`` can stand in for the
U-Net, which keeps the update rules testable against analytic stubs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .backbone import HashTextEmbedder, LatentVideo, UNetModel, decode, encode, make_schedule, unet_forward
from .errors import NumericError, ShapeError, ValidationError


@dataclass
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    total_steps: int = 1000

    def __post_init__(self):
        if self.eta != 0:
            raise ValidationError("only deterministic DDIM (eta = 0) is supported")
        if int(self.num_steps) != self.num_steps or not 0 <= self.num_steps <= self.total_steps:
            raise ValidationError(f"num_steps must lie in [0, {self.total_steps}], got {self.num_steps}")
        if self.guidance_scale < 0:
            raise ValidationError("guidance_scale must be >= 0")

    def to_dict(self):
        return asdict(self)


def cfg_combine(eps_uncond, eps_cond, scale):
    """eps_u + s (eps_c - eps_u), written as (1 - s) eps_u + s eps_c.

    The second form makes s = 0 and s = 1 return their operand exactly.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"guidance inputs differ in shape: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def timestep_schedule(num_steps, total_steps=1000):
    """Ascending timesteps with uniform stride T/N, ending at T."""
    return [k * total_steps // num_steps for k in range(1, num_steps + 1)]


def ddim_step(x, eps, a_from, a_to):
    """Move ``x`` from signal level ``a_from`` to ``a_to`` along the eta = 0 path."""
    xd, ed = x.double(), eps.double()
    x0 = (xd - (1 - a_from).sqrt() * ed) / a_from.sqrt()
    return (a_to.sqrt() * x0 + (1 - a_to).sqrt() * ed).to(x.dtype)


def _predict(model, z, t, cond, hook=None):
    if isinstance(model, UNetModel):
        return unet_forward(model, z, t, cond, hook=hook)
    return model(z, t, cond)


def _check(x, step, what):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite latent during {what}", step=step)


@torch.no_grad()
def ddim_sample(model, z_T, cond, cfg=None, hook=None, uncond=None, schedule=None):
    cfg = cfg or SamplerConfig()
    x = z_T.latents if isinstance(z_T, LatentVideo) else z_T
    _check(x, 0, "sampling")
    schedule = schedule or make_schedule(cfg.total_steps)
    ts = timestep_schedule(cfg.num_steps, cfg.total_steps) if cfg.num_steps else []
    prev = [0] + ts[:-1]
    guided = cfg.guidance_scale != 1.0
    if guided and uncond is None:
        raise ValidationError("guidance_scale != 1 needs an unconditional embedding")
    for i, (t, t_prev) in enumerate(zip(reversed(ts), reversed(prev))):
        eps = _predict(model, x, t, cond, hook)
        if guided:
            eps = cfg_combine(_predict(model, x, t, uncond, hook), eps, cfg.guidance_scale)
        x = ddim_step(x, eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))
        _check(x, i, "sampling")
    return LatentVideo(x, timestep=0)


@torch.no_grad()
def ddim_invert(model, z_0, cond, cfg=None, schedule=None):
    """Run the DDIM update upward (no guidance) to recover an initial noise."""
    cfg = cfg or SamplerConfig()
    x = z_0.latents if isinstance(z_0, LatentVideo) else z_0
    _check(x, 0, "inversion")
    schedule = schedule or make_schedule(cfg.total_steps)
    ts = timestep_schedule(cfg.num_steps, cfg.total_steps) if cfg.num_steps else []
    prev = [0] + ts[:-1]
    for i, (t_prev, t) in enumerate(zip(prev, ts)):
        eps = _predict(model, x, t, cond)
        x = ddim_step(x, eps, schedule.alpha_bar(t_prev), schedule.alpha_bar(t))
        _check(x, i, "inversion")
    return LatentVideo(x, timestep=ts[-1] if ts else 0)


def edit_video(model, source, source_caption, edit_prompt, cfg=None, hook=None, embedder=None):
    """Invert the source under its caption, then denoise under the edit prompt."""
    cfg = cfg or SamplerConfig()
    mc = model.config
    embedder = embedder or HashTextEmbedder(mc.cond_dim, mc.max_tokens)
    dtype = next(model.parameters()).dtype
    z0 = encode(source, mc.reduction, dtype)
    z_T = ddim_invert(model, z0, embedder(source_caption, dtype), cfg)
    out = ddim_sample(model, z_T, embedder(edit_prompt, dtype), cfg, hook=hook, uncond=embedder("", dtype))
    return decode(out, mc.reduction, mc.image_channels, fps=source.fps, id=f"{source.id}-edit")
