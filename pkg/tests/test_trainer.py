import math

import numpy as np
import pytest
import torch

from dape.backbone import HashTextEmbedder, build_unet, encode, make_schedule, unet_forward
from dape.errors import NumericError, ShapeError, StateError, ValidationError
from dape.peft import PlacementSpec, backbone_parameters, inject_adapters, inject_norm_tuning, tensor_hash, trainable_parameters
from dape.trainer import (TrainReport, TrainStageConfig, add_noise, diffusion_step_loss, huber_loss, run_dual_stage,
                          run_stage)

from conftest import random_clip, tiny_config
from oracles import huber_scalar


def test_stage_defaults():
    s1, s2 = TrainStageConfig.stage1(), TrainStageConfig.stage2()
    assert (s1.steps, s1.learning_rate, s1.batch_size) == (400, 5e-5, 1)
    assert (s2.steps, s2.learning_rate, s2.batch_size) == (70, 1e-5, 1)
    assert s1.delta == 1.0
    for bad in (dict(stage="stage3"), dict(steps=-1), dict(learning_rate=0), dict(batch_size=0), dict(delta=0)):
        with pytest.raises(ValidationError):
            TrainStageConfig(**bad)


@pytest.mark.parametrize("r,expected", [(0.0, 0.0), (1.0, 0.5), (-1.0, 0.5), (2.0, 1.5), (-2.0, 1.5)])
def test_huber_closed_forms(r, expected):
    assert huber_loss(torch.tensor([r], dtype=torch.float64), 1.0).item() == expected


def test_huber_matches_scalar_and_bounds():
    r = torch.randn(1000, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 3
    for delta in (0.3, 1.0, 2.5):
        ref = np.mean([huber_scalar(v, delta) for v in r.tolist()])
        assert abs(huber_loss(r, delta).item() - ref) < 1e-12
    with pytest.raises(ValidationError):
        huber_loss(r, 0.0)


def test_add_noise_boundary():
    sched = make_schedule(1000)
    z0, eps = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    assert torch.equal(add_noise(z0, eps, 0, sched), z0)
    a = sched.alpha_bar(500)
    ref = (a.sqrt() * z0.double() + (1 - a).sqrt() * eps.double()).float()
    assert torch.equal(add_noise(z0, eps, 500, sched), ref)


def test_step_loss_stub_and_oracle(tiny_model64):
    model = tiny_model64
    cfg = model.config
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(2, cfg.latent_channels, 4, 4, generator=gen, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    cond = HashTextEmbedder(cfg.cond_dim, cfg.max_tokens)("a cat", torch.float64)
    exact = diffusion_step_loss(model, z0, 300, cond, eps, predictor=lambda z, t, c: eps)
    assert exact.item() == 0.0

    sched = make_schedule(cfg.timesteps)
    a = sched.alpha_bar(300).item()
    z_t = math.sqrt(a) * z0 + math.sqrt(1 - a) * eps
    pred = unet_forward(model, z_t, 300, cond).detach()
    ref = np.mean([huber_scalar(r, 1.0) for r in (eps - pred).view(-1).tolist()])
    got = diffusion_step_loss(model, z0, 300, cond, eps).item()
    assert abs(got - ref) < 1e-10

    with pytest.raises(ShapeError):
        diffusion_step_loss(model, z0, 300, cond, eps[:1])
    with pytest.raises(ValidationError):
        diffusion_step_loss(model, z0, 0, cond, eps)


def _prepared(placement="5", cfg=None):
    model = build_unet(cfg or tiny_config())
    inject_norm_tuning(model)
    inject_adapters(model, PlacementSpec.parse(placement))
    return model


def _snap(named):
    return {k: v.detach().clone() for k, v in named.items()}


def test_run_stage_updates_only_its_set():
    clip = random_clip(frames=2, size=8)
    model = _prepared()
    bb, s1, s2 = (_snap(d) for d in (backbone_parameters(model), trainable_parameters(model, "stage1"),
                                     trainable_parameters(model, "stage2")))
    rep = run_stage(model, TrainStageConfig(stage="stage1", steps=5, learning_rate=1e-2), clip, "noise")
    assert len(rep.losses) == len(rep.timesteps) == len(rep.elapsed) == 5
    assert all(1 <= t <= 1000 for t in rep.timesteps)
    assert tensor_hash(backbone_parameters(model)) == tensor_hash(bb)
    assert tensor_hash(trainable_parameters(model, "stage2")) == tensor_hash(s2)
    assert tensor_hash(trainable_parameters(model, "stage1")) != tensor_hash(s1)
    assert rep.param_checksum == tensor_hash(trainable_parameters(model, "stage1"))
    assert not any(p.requires_grad for p in model.parameters())


def test_zero_steps_is_noop():
    clip = random_clip(frames=2, size=8)
    model = _prepared()
    before = tensor_hash(dict(model.named_parameters()))
    rep = run_stage(model, TrainStageConfig(stage="stage2", steps=0), clip, "x")
    assert rep.losses == [] and tensor_hash(dict(model.named_parameters())) == before


def test_determinism_and_seed_dependence():
    clip = random_clip(frames=2, size=8)
    reps = []
    for seed in (0, 0, 1):
        model = _prepared()
        reps.append(run_stage(model, TrainStageConfig(stage="one_stage", steps=4, seed=seed), clip, "x"))
    assert reps[0].losses == reps[1].losses and reps[0].param_checksum == reps[1].param_checksum
    assert reps[0].timesteps != reps[2].timesteps


def test_missing_injection_and_nonfinite():
    clip = random_clip(frames=2, size=8)
    with pytest.raises(StateError):
        run_stage(build_unet(tiny_config()), TrainStageConfig(stage="stage1", steps=1), clip, "x")
    model = _prepared()
    with torch.no_grad():
        model.conv_out.bias.fill_(float("inf"))
    with pytest.raises(NumericError) as err:
        run_stage(model, TrainStageConfig(stage="stage1", steps=3), clip, "x")
    assert err.value.step == 0


def test_dual_stage_separation():
    clip = random_clip(frames=2, size=8)
    model = _prepared()
    bb = tensor_hash(backbone_parameters(model))
    n0, a0 = (tensor_hash(trainable_parameters(model, s)) for s in ("stage1", "stage2"))
    r1, r2 = run_dual_stage(model, TrainStageConfig.stage1(steps=3, learning_rate=1e-2),
                            TrainStageConfig.stage2(steps=3, learning_rate=1e-2), clip, "x")
    assert r1.stage == "stage1" and r2.stage == "stage2"
    assert tensor_hash(backbone_parameters(model)) == bb
    assert tensor_hash(trainable_parameters(model, "stage1")) == r1.param_checksum != n0
    assert tensor_hash(trainable_parameters(model, "stage2")) == r2.param_checksum != a0
    with pytest.raises(ValidationError):
        run_dual_stage(model, TrainStageConfig.stage2(), TrainStageConfig.stage1(), clip, "x")


def test_report_serialization():
    rep = TrainReport("stage1", [0.5, 0.25], [3, 9], [0.01, 0.02], 1.5, "abc")
    back = TrainReport.from_jsonl(rep.to_jsonl())
    assert back == rep
    assert rep.window_means(0.5) == (0.5, 0.25)
    lines = rep.to_jsonl().splitlines()
    assert len(lines) == 3 and '"step": 1' in lines[2] and '"time": 0.02' in lines[2]
