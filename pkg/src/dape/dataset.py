"""Benchmark curation: standardize -> motion filter -> scene-cut filter -> annotate -> prompts.

Records are persisted in a line-delimited JSON manifest, which binds each
video id to its frame directory, annotations, edit prompts and optional
precomputed flow files.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import cv2
import numpy as np

from .backbone import VideoClip
from .errors import ClientError, ManifestError, ValidationError
from .metrics import BlockMatchingFlow

log = logging.getLogger(__name__)

SUBJECTS = ("people", "animal", "vehicle", "artifact", "food", "environment")
BACKGROUNDS = ("indoor", "urban", "natural", "blur_or_blank")
EVENTS = ("sports", "daily", "performance", "documentary", "cooking")
COMPLEXITIES = ("simple", "moderate", "complex")
EDIT_TYPES = ("subject_modification", "background_alteration", "event_reorganization",
              "style_adjustment", "random_combination")
DIFFICULTIES = ("L1", "L2", "L3", "L4", "L5")
REVIEW_STATUSES = ("pending", "approved", "rejected")

STANDARD_SIZE = 512
STANDARD_LENGTHS = (32, 64, 128)
DEFAULT_MOTION_THRESHOLD = 4.0
DEFAULT_CUT_THRESHOLD = 0.25

MANIFEST_SCHEMA = "dape-manifest"
MANIFEST_VERSION = 1


def _check_enum(value, allowed, what):
    if value not in allowed:
        raise ValidationError(f"{what} {value!r} not in {allowed}")
    return value


@dataclass
class EditPrompt:
    edit_type: str
    text: str
    difficulty: str

    def __post_init__(self):
        _check_enum(self.edit_type, EDIT_TYPES, "edit type")
        _check_enum(self.difficulty, DIFFICULTIES, "difficulty")
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError("edit prompt text must be a non-empty string")


@dataclass
class DatasetRecord:
    video_id: str
    caption: str
    subject: str
    background: str
    event: str
    complexity: dict
    prompts: list = field(default_factory=list)
    provenance: str = ""
    frames_dir: str = ""
    fps: float = 8.0
    num_frames: int = 0
    height: int = 0
    width: int = 0
    flow_paths: list = field(default_factory=list)
    review_status: str = "pending"

    def __post_init__(self):
        if not self.video_id:
            raise ValidationError("record needs a video id")
        _check_enum(self.subject, SUBJECTS, "subject")
        _check_enum(self.background, BACKGROUNDS, "background")
        _check_enum(self.event, EVENTS, "event")
        if set(self.complexity) != {"subject", "background", "event"}:
            raise ValidationError(f"complexity must score subject, background and event, got {sorted(self.complexity)}")
        for k, v in self.complexity.items():
            _check_enum(v, COMPLEXITIES, f"{k} complexity")
        _check_enum(self.review_status, REVIEW_STATUSES, "review status")
        self.prompts = [p if isinstance(p, EditPrompt) else EditPrompt(**p) for p in self.prompts]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# annotation clients
# --------------------------------------------------------------------------

class AnnotationClient(Protocol):
    name: str

    def annotate(self, video_id: str, frames: np.ndarray) -> dict: ...

    def prompts(self, video_id: str, caption: str) -> list: ...


def _digest(*parts):
    return hashlib.sha256("\x1f".join(parts).encode()).digest()


class StubAnnotationClient:
    """Deterministic per video id; never touches the network."""

    name = "stub"

    def annotate(self, video_id, frames):
        h = _digest("annotate", video_id)
        subject, background, event = SUBJECTS[h[0] % 6], BACKGROUNDS[h[1] % 4], EVENTS[h[2] % 5]
        return {
            "caption": f"{'an' if subject[0] in 'aeiou' else 'a'} {subject} scene, {background.replace('_', ' ')} background, {event}",
            "subject": subject,
            "background": background,
            "event": event,
            "complexity": {k: COMPLEXITIES[h[3 + i] % 3] for i, k in enumerate(("subject", "background", "event"))},
        }

    def prompts(self, video_id, caption):
        h = _digest("prompts", video_id, caption)
        texts = {
            "subject_modification": f"{caption}, with the main subject replaced by a robot",
            "background_alteration": f"{caption}, set on a snowy grassland",
            "event_reorganization": f"{caption}, now playing basketball",
            "style_adjustment": f"{caption}, in a watercolor painting style",
            "random_combination": f"{caption}, with a robot subject in watercolor style",
        }
        return [{"edit_type": t, "text": texts[t], "difficulty": DIFFICULTIES[h[i] % 5]}
                for i, t in enumerate(EDIT_TYPES)]


class HttpAnnotationClient:
    """JSON-over-HTTP client for an external vision-language / language model service.

    ``POST {endpoint}/annotate`` with ``{"video_id", "frames": [base64 PNG]}``
    must answer with the annotation dict; ``POST {endpoint}/prompts`` with
    ``{"video_id", "caption"}`` must answer with ``{"prompts": [...]}``.
    Transport errors and 5xx answers are retried with exponential backoff.
    """

    name = "http"

    def __init__(self, endpoint, timeout=30.0, retries=3, api_key=None, transport=None, backoff=0.5):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, endpoint=None, timeout=None, retries=None, **kw):
        endpoint = endpoint or os.environ.get("DAPE_ANNOTATION_ENDPOINT")
        if not endpoint:
            raise ValidationError("no annotation endpoint configured (DAPE_ANNOTATION_ENDPOINT)")
        timeout = timeout if timeout is not None else float(os.environ.get("DAPE_ANNOTATION_TIMEOUT", 30))
        retries = retries if retries is not None else int(os.environ.get("DAPE_ANNOTATION_RETRIES", 3))
        return cls(endpoint, timeout, retries, api_key=os.environ.get("DAPE_ANNOTATION_API_KEY"), **kw)

    def _post(self, route, payload):
        import httpx

        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(f"{self.endpoint}/{route}", json=payload)
                if resp.status_code < 500:
                    resp.raise_for_status()
                    return resp.json()
                last = f"HTTP {resp.status_code}"
            except httpx.HTTPStatusError as exc:
                raise ClientError(f"{route}: {exc}") from exc
            except httpx.TransportError as exc:
                last = repr(exc)
            if attempt < self.retries:
                time.sleep(self.backoff * 2 ** attempt)
        raise ClientError(f"{route}: gave up after {self.retries + 1} attempts ({last})")

    @staticmethod
    def _png(frame):
        from PIL import Image

        buf = io.BytesIO()
        arr = np.round(np.asarray(frame) * 255).astype(np.uint8)
        Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode()

    def annotate(self, video_id, frames):
        return self._post("annotate", {"video_id": video_id, "frames": [self._png(f) for f in frames]})

    def prompts(self, video_id, caption):
        return self._post("prompts", {"video_id": video_id, "caption": caption})["prompts"]


# --------------------------------------------------------------------------
# pipeline stages
# --------------------------------------------------------------------------

@dataclass
class FilterResult:
    keep: bool
    score: float
    stage: str
    reason: str = ""


@dataclass
class Rejection:
    video_id: str
    stage: str
    reason: str
    score: Optional[float] = None


def standardize(video, size=STANDARD_SIZE, lengths=STANDARD_LENGTHS):
    """Center-crop to square, resize to ``size``, trim to the longest allowed length.

    Returns a :class:`Rejection` for clips that are too small or too short.
    """
    f, h, w, c = video.frames.shape
    if min(h, w) < size:
        return Rejection(video.id, "standardize", f"resolution {w}x{h} below {size}x{size}")
    fitting = [n for n in lengths if n <= f]
    if not fitting:
        return Rejection(video.id, "standardize", f"{f} frames, fewer than {min(lengths)}")
    n = max(fitting)
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    frames = video.frames[:n, y0:y0 + side, x0:x0 + side]
    if side != size:
        frames = np.stack([cv2.resize(fr, (size, size), interpolation=cv2.INTER_AREA).reshape(size, size, c)
                           for fr in frames])
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return VideoClip(frames, fps=video.fps, id=video.id)


def motion_filter(clip, threshold=DEFAULT_MOTION_THRESHOLD, flow=None):
    """Mean flow magnitude over consecutive pairs; reject iff it exceeds ``threshold``."""
    if clip.num_frames < 2:
        raise ValidationError("motion filter needs at least 2 frames")
    flow = flow or BlockMatchingFlow()
    flows = flow.pair_flows(clip.frames)
    score = float(np.linalg.norm(flows, axis=-1).mean())
    keep = not score > threshold
    return FilterResult(keep, score, "motion", "" if keep else f"mean motion {score:.3f} > {threshold}")


def scene_cut_filter(clip, threshold=DEFAULT_CUT_THRESHOLD):
    """Largest mean absolute difference between consecutive frames; reject iff above ``threshold``."""
    if clip.num_frames < 2:
        raise ValidationError("scene-cut filter needs at least 2 frames")
    f = clip.frames.astype(np.float64)
    diffs = np.abs(f[1:] - f[:-1]).reshape(len(f) - 1, -1).mean(axis=1)
    score = float(diffs.max())
    keep = not score > threshold
    return FilterResult(keep, score, "scene_cut", "" if keep else f"frame discontinuity {score:.3f} > {threshold}")


def sample_frame_indices(num_frames, count=8):
    """``round(i (F - 1) / (count - 1))`` with halves rounded up."""
    if count == 1:
        return [0]
    return [int(np.floor(i * (num_frames - 1) / (count - 1) + 0.5)) for i in range(count)]


def annotate(client, clip, provenance=""):
    idx = sample_frame_indices(clip.num_frames)
    out = client.annotate(clip.id, clip.frames[idx])
    if not isinstance(out, dict):
        raise ValidationError(f"annotation client returned {type(out).__name__}, expected a mapping")
    try:
        return DatasetRecord(
            video_id=clip.id,
            caption=str(out["caption"]),
            subject=out["subject"],
            background=out["background"],
            event=out["event"],
            complexity=dict(out["complexity"]),
            provenance=provenance,
            fps=float(clip.fps),
            num_frames=int(clip.num_frames),
            height=int(clip.frames.shape[1]),
            width=int(clip.frames.shape[2]),
        )
    except KeyError as exc:
        raise ValidationError(f"annotation for {clip.id!r} lacks field {exc}") from None


def generate_prompts(client, record):
    if not record.caption:
        raise ValidationError(f"record {record.video_id!r} has no caption")
    raw = client.prompts(record.video_id, record.caption)
    try:
        prompts = [EditPrompt(p["edit_type"], p["text"], p["difficulty"]) for p in raw]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed prompt from client: {exc}") from None
    missing = set(EDIT_TYPES) - {p.edit_type for p in prompts}
    if missing:
        raise ValidationError(f"prompts for {record.video_id!r} miss edit types {sorted(missing)}")
    return prompts


@dataclass
class CurationThresholds:
    motion: float = DEFAULT_MOTION_THRESHOLD
    scene_cut: float = DEFAULT_CUT_THRESHOLD


def curate_one(video, client=None, flow=None, thresholds=None, provenance=""):
    """Run the fixed pipeline on one clip; returns (standardized clip, record) or a Rejection."""
    client = client or StubAnnotationClient()
    thresholds = thresholds or CurationThresholds()
    clip = standardize(video)
    if isinstance(clip, Rejection):
        return clip
    for res in (motion_filter(clip, thresholds.motion, flow), scene_cut_filter(clip, thresholds.scene_cut)):
        if not res.keep:
            return Rejection(clip.id, res.stage, res.reason, res.score)
    record = annotate(client, clip, provenance)
    record.prompts = generate_prompts(client, record)
    return clip, record


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

def manifest_lines(records):
    records = sorted(records, key=lambda r: r.video_id)
    ids = [r.video_id for r in records]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ManifestError(f"duplicate video ids {dup}")
    head = {"schema": MANIFEST_SCHEMA, "schema_version": MANIFEST_VERSION, "count": len(records)}
    return [json.dumps(head, sort_keys=True)] + [json.dumps(r.to_dict(), sort_keys=True) for r in records]


def write_manifest(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(manifest_lines(records)) + "\n")
    return path


def parse_manifest(text, source="<manifest>"):
    records, seen = [], set()
    header_seen = False
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{source}: invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{source}: expected an object", lineno)
        if not header_seen:
            if obj.get("schema") != MANIFEST_SCHEMA:
                raise ManifestError(f"{source}: missing manifest header", lineno)
            if obj.get("schema_version") != MANIFEST_VERSION:
                raise ManifestError(f"{source}: unsupported schema version {obj.get('schema_version')}", lineno)
            header_seen = True
            continue
        try:
            rec = DatasetRecord.from_dict(obj)
        except (TypeError, ValidationError) as exc:
            raise ManifestError(f"{source}: bad record ({exc})", lineno) from None
        if rec.video_id in seen:
            raise ManifestError(f"{source}: duplicate video id {rec.video_id!r}", lineno)
        seen.add(rec.video_id)
        records.append(rec)
    return sorted(records, key=lambda r: r.video_id)


def read_manifest(path):
    path = Path(path)
    return parse_manifest(path.read_text(), str(path))


def find_record(records, video_id):
    for r in records:
        if r.video_id == video_id:
            return r
    raise ValidationError(f"video {video_id!r} not in manifest")
