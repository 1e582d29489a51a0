"""One-shot fine-tuning on a single template video.

Noise-prediction objective with a Huber penalty, run either as two
stages (norms, then adapters with the norms frozen) or as a single joint
stage for the ablation.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import torch

from .backbone import HashTextEmbedder, LatentVideo, encode, make_schedule, unet_forward
from .errors import NumericError, ShapeError, ValidationError
from .peft import STAGES, freeze_for_stage, tensor_hash

log = logging.getLogger(__name__)


@dataclass
class TrainStageConfig:
    stage: str = "stage1"
    steps: int = 400
    learning_rate: float = 5e-5
    batch_size: int = 1
    delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValidationError("steps must be a non-negative integer")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if int(self.batch_size) != self.batch_size or self.batch_size <= 0:
            raise ValidationError("batch_size must be a positive integer")
        if self.delta <= 0:
            raise ValidationError("huber delta must be positive")

    @classmethod
    def stage1(cls, **kw):
        return cls(**{"stage": "stage1", "steps": 400, "learning_rate": 5e-5, **kw})

    @classmethod
    def stage2(cls, **kw):
        return cls(**{"stage": "stage2", "steps": 70, "learning_rate": 1e-5, **kw})


@dataclass
class TrainReport:
    stage: str
    losses: list = field(default_factory=list)
    timesteps: list = field(default_factory=list)
    elapsed: list = field(default_factory=list)
    wall_clock: float = 0.0
    param_checksum: str = ""

    def window_means(self, fraction=0.1):
        """Mean loss over the first and last ``fraction`` of steps."""
        n = len(self.losses)
        k = max(1, int(round(n * fraction)))
        return sum(self.losses[:k]) / k, sum(self.losses[-k:]) / k

    def to_jsonl(self):
        """One header line, then ``{step, t, loss, time}`` per optimizer step (time: seconds into the stage)."""
        head = {"kind": "train-report", "stage": self.stage, "steps": len(self.losses),
                "wall_clock": self.wall_clock, "param_checksum": self.param_checksum}
        lines = [json.dumps(head, sort_keys=True)]
        elapsed = self.elapsed or [None] * len(self.losses)
        for i, (t, loss, sec) in enumerate(zip(self.timesteps, self.losses, elapsed)):
            lines.append(json.dumps({"step": i, "t": t, "loss": loss, "time": sec}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        head, steps = rows[0], rows[1:]
        return cls(head["stage"], [r["loss"] for r in steps], [r["t"] for r in steps],
                   [r.get("time") for r in steps], head["wall_clock"], head["param_checksum"])

    def to_dict(self):
        return asdict(self)


def huber_loss(residual, delta=1.0):
    """Mean of 0.5 r^2 for |r| <= delta, delta (|r| - delta/2) otherwise."""
    if delta <= 0:
        raise ValidationError(f"huber delta must be positive, got {delta}")
    r = residual.abs()
    quad = 0.5 * residual * residual
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()


def add_noise(z0, noise, t, schedule):
    a = schedule.alpha_bar(t)
    return (a.sqrt() * z0.double() + (1 - a).sqrt() * noise.double()).to(z0.dtype)


def diffusion_step_loss(model, latent, t, cond, noise, delta=1.0, schedule=None, predictor=None):
    """Huber(eps - eps_theta(z_t, t, c)) with z_t = sqrt(a_t) z0 + sqrt(1 - a_t) eps.

    ``predictor`` overrides the model call, e.g. to stub the noise estimate.
    """
    z0 = latent.latents if isinstance(latent, LatentVideo) else latent
    if noise.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    schedule = schedule or make_schedule(model.config.timesteps)
    if not 1 <= t <= schedule.total_steps:
        raise ValidationError(f"training timestep {t} outside [1, {schedule.total_steps}]")
    z_t = add_noise(z0, noise, t, schedule)
    if predictor is None:
        eps_hat = unet_forward(model, z_t, t, cond)
    else:
        eps_hat = predictor(z_t, t, cond)
    return huber_loss(noise - eps_hat, delta)


def run_stage(model, cfg, clip, caption, embedder=None, schedule=None):
    """Apply exactly ``cfg.steps`` Adam updates to the stage's parameter set."""
    params = freeze_for_stage(model, cfg.stage)
    dtype = next(model.parameters()).dtype
    embedder = embedder or HashTextEmbedder(model.config.cond_dim, model.config.max_tokens)
    schedule = schedule or make_schedule(model.config.timesteps)
    z0 = encode(clip, model.config.reduction, dtype).latents
    cond = embedder(caption, dtype)

    report = TrainReport(cfg.stage)
    start = time.perf_counter()
    if cfg.steps > 0 and params:
        gen = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(list(params.values()), lr=cfg.learning_rate, weight_decay=0.0)
        model.train()
        for step in range(cfg.steps):
            opt.zero_grad(set_to_none=True)
            loss = 0.0
            ts = []
            for _ in range(cfg.batch_size):
                t = int(torch.randint(1, schedule.total_steps + 1, (1,), generator=gen))
                noise = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(dtype)
                loss = loss + diffusion_step_loss(model, z0, t, cond, noise, cfg.delta, schedule)
                ts.append(t)
            loss = loss / cfg.batch_size
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss in {cfg.stage}", step=step)
            loss.backward()
            opt.step()
            report.losses.append(loss.item())
            report.timesteps.append(ts[0] if cfg.batch_size == 1 else ts)
            report.elapsed.append(round(time.perf_counter() - start, 4))
            if step % 50 == 0:
                log.debug("%s step %d t=%s loss=%.6f", cfg.stage, step, ts, report.losses[-1])
    elif cfg.steps > 0:
        log.warning("%s has no trainable parameters; skipping %d steps", cfg.stage, cfg.steps)
    report.wall_clock = time.perf_counter() - start
    report.param_checksum = tensor_hash(params)
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return report


def run_dual_stage(model, cfg1, cfg2, clip, caption, embedder=None, schedule=None):
    """Stage 1 (norm sites) then stage 2 (adapters); stage-1 weights stay frozen in stage 2."""
    if cfg1.stage != "stage1" or cfg2.stage != "stage2":
        raise ValidationError("dual-stage training needs a stage1 config followed by a stage2 config")
    r1 = run_stage(model, cfg1, clip, caption, embedder, schedule)
    r2 = run_stage(model, cfg2, clip, caption, embedder, schedule)
    return r1, r2
