"""Glue between config, model, trainer, sampler and metrics used by the CLI."""
from __future__ import annotations

import logging
from pathlib import Path

import torch

from .backbone import build_unet
from .dataset import HttpAnnotationClient, StubAnnotationClient, find_record, read_manifest
from .errors import ValidationError
from .frames import read_frames
from .metrics import EMBEDDERS, FLOW_BACKENDS, PrecomputedFlow, evaluate
from .peft import PlacementSpec, inject_adapters, inject_norm_tuning, peft_state, peft_state_refs
from .sampler import edit_video
from .trainer import run_stage

log = logging.getLogger(__name__)

# adapter placements of the position ablation, in its row order
DEFAULT_PLACEMENTS = ("1-7", "1,2,6,7", "3-5", "1-3", "5-7", "5")


def load_record_clip(manifest_path, video_id):
    """Record plus its clip; relative frame and flow paths resolve against the manifest's directory."""
    manifest_path = Path(manifest_path)
    record = find_record(read_manifest(manifest_path), video_id)
    root = manifest_path.parent
    record.flow_paths = [str(p if Path(p).is_absolute() else root / p) for p in record.flow_paths]
    frames_dir = Path(record.frames_dir)
    if not frames_dir.is_absolute():
        frames_dir = root / frames_dir
    return record, read_frames(frames_dir, fps=record.fps, id=record.video_id)


def prepare_model(cfg, mode=None, placement=None):
    """Build the backbone and inject whatever ``mode`` trains."""
    mode = mode or cfg.data["trainer"]["mode"]
    placement = cfg.placement if placement is None else placement
    peft = cfg.data["peft"]
    model = build_unet(cfg.backbone)
    inject_norm_tuning(model, per_channel=peft["gamma0_per_channel"])
    if mode != "stage1_only":
        inject_adapters(model, placement, peft["ratio"], peft["activation"])
    return model


def train(cfg, clip, caption, mode=None, placement=None):
    """Returns (model, [TrainReport, ...]) for the configured training mode."""
    mode = mode or cfg.data["trainer"]["mode"]
    stages = cfg.stage_configs()
    model = prepare_model(cfg, mode, placement)
    if mode == "one_stage":
        reports = [run_stage(model, stages["one_stage"], clip, caption)]
    elif mode == "stage1_only":
        reports = [run_stage(model, stages["stage1"], clip, caption)]
    else:
        reports = [run_stage(model, stages["stage1"], clip, caption),
                   run_stage(model, stages["stage2"], clip, caption)]
    return model, reports


def make_embedder(cfg):
    name = cfg.data["metrics"]["embedder"]
    if name not in EMBEDDERS:
        raise ValidationError(f"unknown embedder {name!r}; choose from {sorted(EMBEDDERS)}")
    return EMBEDDERS[name]()


def make_flow(cfg, flow_paths=None):
    if flow_paths:
        return PrecomputedFlow(flow_paths)
    name = cfg.data["metrics"]["flow"]
    if name not in FLOW_BACKENDS:
        raise ValidationError(f"unknown flow backend {name!r}; choose from {sorted(FLOW_BACKENDS)}")
    return FLOW_BACKENDS[name]()


def make_annotation_client(cfg):
    ann = cfg.data["dataset"]["annotation"]
    if ann["client"] == "stub":
        return StubAnnotationClient()
    if ann["client"] == "http":
        return HttpAnnotationClient.from_env(ann["endpoint"], ann["timeout"], ann["retries"])
    raise ValidationError(f"unknown annotation client {ann['client']!r}")


def edit_and_evaluate(cfg, model, clip, caption, prompt, label="", hook=None, flow_paths=None):
    edited = edit_video(model, clip, caption, prompt, cfg.sampler, hook=hook)
    report = evaluate(clip, edited, prompt, make_embedder(cfg), make_flow(cfg, flow_paths), cfg.hash, label,
                      pairs=cfg.data["metrics"]["clip_frame_pairs"])
    return edited, report


def sweep_placements(cfg, clip, caption, prompt, placements, flow_paths=None):
    """Shared stage-1 run, then stage 2 + edit + evaluate for each placement."""
    if not placements:
        raise ValidationError("placement sweep needs at least one placement")
    specs = [p if isinstance(p, PlacementSpec) else PlacementSpec.parse(p) for p in placements]
    stages = cfg.stage_configs()
    base = prepare_model(cfg, "stage1_only")
    stage1 = run_stage(base, stages["stage1"], clip, caption)
    norms = peft_state(base)
    rows = []
    for raw, spec in zip(placements, specs):
        model = prepare_model(cfg, "stage1_only")
        with torch.no_grad():
            for name, p in peft_state_refs(model).items():
                p.copy_(norms[name])
        inject_adapters(model, spec, cfg.data["peft"]["ratio"], cfg.data["peft"]["activation"])
        stage2 = run_stage(model, stages["stage2"], clip, caption)
        label = raw if isinstance(raw, str) else spec.label
        _, report = edit_and_evaluate(cfg, model, clip, caption, prompt, label=label, flow_paths=flow_paths)
        rows.append((spec, stage2, report))
        log.info("placement %s: %s", label, report.metrics())
    return stage1, rows


def default_prompt(record):
    return record.prompts[0].text if record.prompts else record.caption
