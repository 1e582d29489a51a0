"""Batch command-line front end.

    dape synth            write the bundled synthetic template clip (or a curation corpus)
    dape train            dual-stage / one-stage fine-tuning -> PEFT checkpoint + reports
    dape edit             invert + re-generate a clip under an edit prompt
    dape evaluate         metric reports for (source, edited, prompt) pairs
    dape sweep-placement  adapter-position ablation from a shared stage-1 run
    dape curate           standardize / filter / annotate a directory of videos
    dape report           aggregate metric reports into a summary table
    dape review           set a manifest record's manual review status

Exit codes: 0 ok, 2 validation, 3 runtime/numeric, 4 external client.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import pipeline, reporting, synthetic
from .config import TRAIN_MODES, RunConfig
from .dataset import (CurationThresholds, REVIEW_STATUSES, Rejection, StubAnnotationClient, annotate,
                      curate_one, generate_prompts, read_manifest, write_manifest)
from .errors import DapeError, ValidationError
from .frames import read_frames, write_frames
from .metrics import evaluate_batch
from .peft import load_peft_checkpoint, save_peft_checkpoint
from .sampler import edit_video

log = logging.getLogger("dape")


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _config(args):
    cfg = RunConfig.load(args.config, args.set or ())
    if getattr(args, "manifest", None):
        cfg.data["paths"]["manifest"] = str(args.manifest)
    return cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    out = _out_dir(args)
    if args.kind == "template":
        clip = synthetic.template_clip(frames=args.frames, size=args.size, id=args.id)
        write_frames(clip, out / "frames" / clip.id)
        client = StubAnnotationClient()
        record = annotate(client, clip, provenance="synthetic")
        record.prompts = generate_prompts(client, record)
        record.frames_dir = f"frames/{clip.id}"
        write_manifest([record], out / "manifest.jsonl")
        print(f"wrote {clip.id} ({clip.num_frames} frames) and {out / 'manifest.jsonl'}")
    else:
        clips = [synthetic.static_clip(args.frames, args.size), synthetic.translation_clip(args.frames, args.size),
                 synthetic.hard_cut_clip(args.frames, args.size)]
        for clip in clips:
            write_frames(clip, out / clip.id)
        print(f"wrote {len(clips)} raw videos under {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args)
    record, clip = pipeline.load_record_clip(cfg.data["paths"]["manifest"], args.video)
    caption = args.caption or record.caption
    mode = args.mode.replace("-", "_") if args.mode else cfg.data["trainer"]["mode"]
    cfg.data["trainer"]["mode"] = mode
    if args.placement is not None:
        cfg.data["peft"]["placement"] = args.placement
    cfg.validate()
    cfg.write(out)

    model, reports = pipeline.train(cfg, clip, caption, mode)
    ckpt = out / "peft.pt"
    save_peft_checkpoint(model, ckpt, cfg.hash)
    for rep in reports:
        (out / f"train_{rep.stage}.jsonl").write_text(rep.to_jsonl())
    reporting.plot_losses(reports, out / "loss.png")
    meta = {"video": args.video, "caption": caption, "mode": mode, "seed": cfg.seed, "config_hash": cfg.hash,
            "checkpoint": ckpt.name, "checkpoint_hash": _file_hash(ckpt),
            "stages": [{"stage": r.stage, "steps": len(r.losses), "param_checksum": r.param_checksum,
                        "first_decile": r.window_means()[0] if r.losses else None,
                        "last_decile": r.window_means()[1] if r.losses else None} for r in reports]}
    if args.evaluate:
        prompt = args.prompt or pipeline.default_prompt(record)
        edited, report = pipeline.edit_and_evaluate(cfg, model, clip, caption, prompt, label=mode,
                                                    flow_paths=record.flow_paths)
        write_frames(edited, out / "edited")
        reporting.write_jsonl([report], out / "metrics.jsonl")
        print(reporting.format_table(reporting.report_rows([report])), end="")
    _write_json(out / "run.json", meta)
    for rep in reports:
        first, last = rep.window_means() if rep.losses else (float("nan"),) * 2
        print(f"{rep.stage}: {len(rep.losses)} steps, loss {first:.5f} -> {last:.5f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_edit(args):
    cfg = _config(args)
    out = _out_dir(args)
    record, clip = pipeline.load_record_clip(cfg.data["paths"]["manifest"], args.video)
    caption = args.caption or record.caption
    prompt = args.prompt or pipeline.default_prompt(record)
    model = pipeline.build_unet(cfg.backbone)
    if args.checkpoint:
        load_peft_checkpoint(model, args.checkpoint, cfg.data["peft"]["gamma0_per_channel"],
                             cfg.data["peft"]["ratio"], cfg.data["peft"]["activation"])
    cfg.write(out)
    edited = edit_video(model, clip, caption, prompt, cfg.sampler)
    write_frames(edited, out / "frames")
    _write_json(out / "run.json", {
        "video": args.video, "source_caption": caption, "prompt": prompt, "seed": cfg.seed,
        "config_hash": cfg.hash, "checkpoint_hash": _file_hash(args.checkpoint) if args.checkpoint else None,
        "sampler": cfg.sampler.to_dict(),
    })
    print(f"edited frames: {out / 'frames'}")
    return 0


def _clip_name(directory):
    # run directories keep their frames in <run>/frames; name the clip after the run then
    p = Path(directory).resolve()
    return p.parent.name if p.name in ("frames", "edited") else p.name


def _evaluation_items(args, cfg):
    if args.pairs:
        items = []
        for lineno, line in enumerate(Path(args.pairs).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                src, edt, prompt = row["source"], row["edited"], row["prompt"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValidationError(f"{args.pairs}:{lineno}: bad pair record ({exc})") from None
            flow = pipeline.make_flow(cfg, row.get("flow_paths")) if row.get("flow_paths") else None
            items.append((read_frames(src, id=_clip_name(src)),
                          read_frames(edt, id=row.get("edited_id") or _clip_name(edt)), prompt, flow))
        return items
    if not (args.source and args.edited and args.prompt is not None):
        raise ValidationError("evaluate needs --pairs or all of --source/--edited/--prompt")
    edited_id = args.edited_id or _clip_name(args.edited)
    return [(read_frames(args.source, id=_clip_name(args.source)), read_frames(args.edited, id=edited_id),
             args.prompt, None)]


def cmd_evaluate(args):
    cfg = _config(args)
    out = _out_dir(args)
    items = _evaluation_items(args, cfg)
    reports = evaluate_batch(items, pipeline.make_embedder(cfg), pipeline.make_flow(cfg), cfg.hash, args.workers,
                             pairs=cfg.data["metrics"]["clip_frame_pairs"])
    cfg.write(out)
    reporting.write_jsonl(reports, out / "metrics.jsonl")
    table, mean = reporting.summary_table(reports)
    reporting.write_jsonl(reporting.report_rows(reports) + [mean], out / "summary.jsonl")
    (out / "summary.txt").write_text(table)
    reporting.plot_metric_rows(reporting.report_rows(reports), out / "metrics.png")
    print(table, end="")
    return 0


def cmd_sweep_placement(args):
    cfg = _config(args)
    out = _out_dir(args)
    placements = args.placements if args.placements is not None else list(pipeline.DEFAULT_PLACEMENTS)
    if not placements:
        raise ValidationError("empty placement list")
    record, clip = pipeline.load_record_clip(cfg.data["paths"]["manifest"], args.video)
    caption = args.caption or record.caption
    prompt = args.prompt or pipeline.default_prompt(record)
    cfg.write(out)
    stage1, rows = pipeline.sweep_placements(cfg, clip, caption, prompt, placements, record.flow_paths)
    reports = [r for _, _, r in rows]
    reporting.write_jsonl(reports, out / "sweep.jsonl")
    table_rows = reporting.report_rows(reports)
    table = reporting.format_table(table_rows, title=f"adapter placement sweep ({args.video})")
    (out / "sweep.txt").write_text(table)
    reporting.plot_metric_rows(table_rows, out / "sweep.png", title="adapter placement")
    reporting.plot_losses([stage1] + [s2 for _, s2, _ in rows[:1]], out / "loss.png")
    print(table, end="")
    return 0


def cmd_curate(args):
    cfg = _config(args)
    out = _out_dir(args)
    ds = cfg.data["dataset"]
    thresholds = CurationThresholds(ds["motion_threshold"], ds["cut_threshold"])
    client = pipeline.make_annotation_client(cfg)
    flow = pipeline.make_flow(cfg)
    dirs = sorted(p for p in Path(args.input).iterdir() if p.is_dir())

    def one(d):
        return curate_one(read_frames(d, fps=args.fps), client, flow, thresholds, provenance=args.provenance)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(one, dirs))
    else:
        results = [one(d) for d in dirs]

    records, rejections = [], []
    for res in results:
        if isinstance(res, Rejection):
            rejections.append(res)
            continue
        clip, record = res
        write_frames(clip, out / "frames" / clip.id)
        record.frames_dir = f"frames/{clip.id}"
        records.append(record)
    cfg.write(out)
    write_manifest(records, out / "manifest.jsonl")
    reporting.write_jsonl([vars(r) for r in rejections], out / "rejections.jsonl")
    print(f"kept {len(records)} of {len(dirs)} videos")
    for r in rejections:
        print(f"  rejected {r.video_id} at {r.stage}: {r.reason}")
    return 0


def cmd_report(args):
    out = _out_dir(args)
    reports = []
    for path in args.reports:
        reports.extend(reporting.read_reports(path))
    if not reports:
        raise ValidationError("no metric reports found")
    table, mean = reporting.summary_table(reports, title=args.title)
    (out / "summary.txt").write_text(table)
    rows = reporting.report_rows(reports)
    reporting.write_jsonl(rows + [mean], out / "summary.jsonl")
    reporting.plot_metric_rows(rows + [mean], out / "summary.png", title=args.title)
    print(table, end="")
    return 0


def cmd_review(args):
    if args.status not in REVIEW_STATUSES:
        raise ValidationError(f"status must be one of {REVIEW_STATUSES}")
    records = read_manifest(args.manifest)
    hit = [r for r in records if r.video_id == args.video]
    if not hit:
        raise ValidationError(f"video {args.video!r} not in manifest")
    hit[0].review_status = args.status
    write_manifest(records, args.manifest)
    print(f"{args.video}: {args.status}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dape", description="Dual-stage PEFT video editing toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, manifest=True):
        sp.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field by dotted path")
        if manifest:
            sp.add_argument("--manifest", help="manifest path (overrides paths.manifest)")
        sp.add_argument("--out", required=True, help="output run directory")

    s = sub.add_parser("synth", help="write synthetic clips")
    s.add_argument("--kind", choices=("template", "curation"), default="template")
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--size", type=int, default=None)
    s.add_argument("--id", default="synthetic")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fine-tune on one manifest video")
    with_config(s)
    s.add_argument("--video", required=True)
    s.add_argument("--caption")
    s.add_argument("--mode", choices=[m.replace("_", "-") for m in TRAIN_MODES])
    s.add_argument("--placement", help="adapter blocks, e.g. 5 or 1-7 or 1,2,6,7")
    s.add_argument("--evaluate", action="store_true", help="edit + evaluate after training")
    s.add_argument("--prompt", help="edit prompt used with --evaluate")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("edit", help="edit a manifest video")
    with_config(s)
    s.add_argument("--video", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--caption")
    s.add_argument("--prompt")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("evaluate", help="metric reports for edited videos")
    with_config(s, manifest=False)
    s.add_argument("--source")
    s.add_argument("--edited")
    s.add_argument("--prompt")
    s.add_argument("--edited-id", help="id recorded for the edited clip (default: its directory name)")
    s.add_argument("--pairs", help="JSONL of {source, edited, prompt[, flow_paths, edited_id]}")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep-placement", help="adapter placement ablation")
    with_config(s)
    s.add_argument("--video", required=True)
    s.add_argument("--caption")
    s.add_argument("--prompt")
    s.add_argument("--placements", nargs="*", help="placements to compare (default: the six ablation rows)")
    s.set_defaults(func=cmd_sweep_placement)

    s = sub.add_parser("curate", help="build a manifest from raw frame directories")
    with_config(s, manifest=False)
    s.add_argument("--input", required=True, help="directory with one frame directory per video")
    s.add_argument("--fps", type=float, default=8.0)
    s.add_argument("--provenance", default="local")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("report", help="aggregate metric reports")
    s.add_argument("reports", nargs="+", help="metrics JSONL files")
    s.add_argument("--title")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("review", help="set manual review status")
    s.add_argument("--manifest", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--status", required=True)
    s.set_defaults(func=cmd_review)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        defaults = (8, 32) if args.kind == "template" else (32, 512)
        args.frames = args.frames or defaults[0]
        args.size = args.size or defaults[1]
    try:
        return args.func(args)
    except DapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
