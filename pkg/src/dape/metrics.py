"""Temporal-consistency and text-alignment metrics for edited videos.

CLIP-Frame, interpolation error/PSNR, warping error and CLIP-Text, computed
over pluggable embedding and optical-flow backends. The defaults are
deterministic and offline; real CLIP/RAFT output can be supplied through
the client and precomputed-flow slots.

Flow convention: ``backend(a, b)`` returns ``[H, W, 2]`` offsets ``(dx, dy)``
on the grid of ``a`` such that ``a[y, x] ~ b[y + dy, x + dx]``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .backbone import HashTextEmbedder, _token_vector
from .errors import NumericError, ShapeError, ValidationError

PSNR_CAP = 99.0
METRIC_KEYS = ("clip_f", "int_err", "int_psnr", "warp_err", "clip_t")
# presentation scale per column; values are stored raw
METRIC_SCALES = {"clip_f": 1e-2, "int_err": 1e-2, "int_psnr": 1.0, "warp_err": 1e-2, "clip_t": 1e-2}
METRIC_LABELS = {"clip_f": "CLIP-F", "int_err": "Int. Err.", "int_psnr": "Int. PSNR",
                 "warp_err": "War. Err.", "clip_t": "CLIP-T"}


# --------------------------------------------------------------------------
# embedders
# --------------------------------------------------------------------------

class ProjectionEmbedder:
    """Deterministic stand-in for an image/text encoder.

    Frames are area-pooled to ``grid x grid``, a bias term is appended and a
    fixed Gaussian projection maps them to ``dim``. Text uses the mean of
    hash-seeded token vectors.
    """

    name = "projection-stub"

    def __init__(self, dim=64, grid=8, seed=0):
        self.dim = dim
        self.grid = grid
        self.seed = seed
        self._proj = {}

    def _matrix(self, n):
        if n not in self._proj:
            rng = np.random.default_rng([self.seed, n])
            self._proj[n] = rng.standard_normal((self.dim, n)) / math.sqrt(n)
        return self._proj[n]

    def embed_frame(self, frame):
        frame = np.asarray(frame, np.float32)
        pooled = cv2.resize(frame, (self.grid, self.grid), interpolation=cv2.INTER_AREA)
        feat = np.append(pooled.reshape(-1).astype(np.float64), 1.0)
        return self._matrix(feat.size) @ feat

    def embed_text(self, text):
        tokens = HashTextEmbedder.tokenize(text) or ["<empty>"]
        return np.mean([_token_vector(t, self.dim) for t in tokens], axis=0)


class ConstantEmbedder:
    """Maps every frame and every text to the same vector."""

    name = "constant-stub"

    def __init__(self, dim=8):
        self.dim = dim
        self.vector = np.ones(dim)

    def embed_frame(self, frame):
        return self.vector.copy()

    def embed_text(self, text):
        return self.vector.copy()


def _unit(v, what):
    v = np.asarray(v, np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise NumericError(f"zero-norm or non-finite embedding for {what}")
    return v / n


# --------------------------------------------------------------------------
# flow backends
# --------------------------------------------------------------------------

class FlowBackend:
    name = "flow"

    def __call__(self, frame_a, frame_b):
        raise NotImplementedError

    def pair_flows(self, frames):
        """Flow from each frame t+1 back into frame t, stacked ``[F-1, H, W, 2]``."""
        return np.stack([self(frames[t + 1], frames[t]) for t in range(len(frames) - 1)])


class ZeroFlow(FlowBackend):
    name = "zero"

    def __call__(self, frame_a, frame_b):
        return np.zeros(frame_a.shape[:2] + (2,))


class ConstantFlow(FlowBackend):
    """Same offset everywhere.

    Content moving ``+k`` px/frame to the right has backward pair flow ``(-k, 0)``.
    """

    name = "constant"

    def __init__(self, dx, dy=0.0):
        self.dx, self.dy = dx, dy

    def __call__(self, frame_a, frame_b):
        out = np.empty(frame_a.shape[:2] + (2,))
        out[..., 0], out[..., 1] = self.dx, self.dy
        return out


class BlockMatchingFlow(FlowBackend):
    """Exhaustive block matching (sum of absolute differences) on a pooled grey image.

    Frames larger than ``max_side`` are area-downsampled by an integer factor
    first; flow is returned at full resolution in full-resolution pixels.
    Ties go to the smaller displacement.
    """

    name = "block-matching"

    def __init__(self, block=8, radius=4, max_side=128):
        self.block = block
        self.radius = radius
        self.max_side = max_side

    def __call__(self, frame_a, frame_b):
        h, w = frame_a.shape[:2]
        s = max(1, math.ceil(max(h, w) / self.max_side))
        a, b = (self._grey(f, s) for f in (frame_a, frame_b))
        ch, cw = a.shape
        bs, r = self.block, self.radius
        nby, nbx = math.ceil(ch / bs), math.ceil(cw / bs)
        pad_h, pad_w = nby * bs - ch, nbx * bs - cw
        a = np.pad(a, ((0, pad_h), (0, pad_w)), mode="edge")
        b = np.pad(b, ((r, r + pad_h), (r, r + pad_w)), mode="edge")

        offsets = sorted(((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)),
                         key=lambda o: (o[0] ** 2 + o[1] ** 2, o))
        best = np.full((nby, nbx), np.inf)
        flow = np.zeros((nby, nbx, 2))
        for dy, dx in offsets:
            shifted = b[r + dy:r + dy + nby * bs, r + dx:r + dx + nbx * bs]
            sad = np.abs(a - shifted).reshape(nby, bs, nbx, bs).sum(axis=(1, 3))
            better = sad < best - 1e-9
            best[better] = sad[better]
            flow[better] = (dx, dy)
        full = np.repeat(np.repeat(flow, bs, 0), bs, 1)[:ch, :cw] * s
        full = np.repeat(np.repeat(full, s, 0), s, 1)
        out = np.zeros((h, w, 2))
        out[: full.shape[0], : full.shape[1]] = full[:h, :w]
        return out

    @staticmethod
    def _grey(frame, s):
        g = np.asarray(frame, np.float64).mean(axis=-1)
        if s > 1:
            h, w = g.shape
            g = g[: h - h % s, : w - w % s].reshape(h // s, s, w // s, s).mean(axis=(1, 3))
        return g


class PrecomputedFlow(FlowBackend):
    """Flow computed elsewhere (e.g. RAFT), one array file per consecutive pair.

    ``.npy`` files hold ``[H, W, 2]``; ``.txt`` files hold ``H`` rows of
    ``2 W`` numbers (dx, dy interleaved). Pair ``t`` is the flow from frame
    t+1 back into frame t.
    """

    name = "precomputed"

    def __init__(self, paths):
        self.paths = [Path(p) for p in paths]

    def _load(self, path, hw):
        if path.suffix == ".npy":
            arr = np.load(path)
        else:
            arr = np.loadtxt(path, ndmin=2).reshape(hw[0], hw[1], 2)
        if arr.shape != (hw[0], hw[1], 2):
            raise ShapeError(f"{path}: flow shape {arr.shape} does not match frames {hw}")
        return arr.astype(np.float64)

    def pair_flows(self, frames):
        if len(self.paths) != len(frames) - 1:
            raise ValidationError(f"need {len(frames) - 1} flow files, manifest lists {len(self.paths)}")
        return np.stack([self._load(p, frames.shape[1:3]) for p in self.paths])

    def __call__(self, frame_a, frame_b):
        raise ValidationError("precomputed flow is only available per clip via pair_flows")


FLOW_BACKENDS = {"zero": ZeroFlow, "block-matching": BlockMatchingFlow}
EMBEDDERS = {"projection-stub": ProjectionEmbedder, "constant-stub": ConstantEmbedder}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def clip_frame(embedder, clip, pairs="consecutive"):
    frames = clip.frames
    if len(frames) < 2:
        raise ValidationError("CLIP-Frame needs at least 2 frames")
    emb = [_unit(embedder.embed_frame(f), f"frame {i} of {clip.id!r}") for i, f in enumerate(frames)]
    if pairs == "consecutive":
        sims = [emb[i] @ emb[i + 1] for i in range(len(emb) - 1)]
    elif pairs == "all":
        sims = [emb[i] @ emb[j] for i in range(len(emb)) for j in range(i + 1, len(emb))]
    else:
        raise ValidationError(f"pairs must be 'consecutive' or 'all', got {pairs!r}")
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def psnr_from_mse(mse):
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def interpolation_metrics(clip):
    """Two-neighbour average as the interpolated frame; returns (MAE, mean per-frame PSNR)."""
    f = clip.frames.astype(np.float64)
    if len(f) < 3:
        raise ValidationError("interpolation metrics need at least 3 frames")
    pred = 0.5 * (f[:-2] + f[2:])
    diff = pred - f[1:-1]
    int_err = float(np.abs(diff).mean())
    per_frame_mse = (diff ** 2).reshape(len(diff), -1).mean(axis=1)
    int_psnr = float(np.mean([psnr_from_mse(m) for m in per_frame_mse]))
    return int_err, int_psnr


def backward_warp(image, flow):
    """Bilinear sample ``image`` at ``q + flow(q)``; returns (warped, valid mask)."""
    h, w = image.shape[:2]
    img = image.astype(np.float64).reshape(h, w, -1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx, sy = xx + flow[..., 0], yy + flow[..., 1]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
    padded = np.zeros((h + 2, w + 2, img.shape[2]))
    padded[1:-1, 1:-1] = img

    def at(yi, xi):
        return padded[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)]

    warped = ((1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1)
              + (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1))
    return warped, valid


def warping_error(flow, source, edited):
    """Masked MSE between edited frame t warped forward and edited frame t+1, averaged over t."""
    if source.frames.shape != edited.frames.shape:
        raise ValidationError(f"source {source.frames.shape} and edited {edited.frames.shape} differ in shape")
    if len(source.frames) < 2:
        raise ValidationError("warping error needs at least 2 frames")
    flows = flow.pair_flows(source.frames)
    errs = []
    for t in range(len(flows)):
        warped, valid = backward_warp(edited.frames[t], flows[t])
        if not valid.any():
            continue
        nxt = edited.frames[t + 1].astype(np.float64).reshape(warped.shape)
        sq = ((warped - nxt) ** 2)[valid]
        errs.append(float(sq.mean()))
    return float(np.mean(errs)) if errs else 0.0


def clip_text(embedder, clip, prompt):
    text = _unit(embedder.embed_text(prompt), f"prompt {prompt!r}")
    sims = [_unit(embedder.embed_frame(f), f"frame {i} of {clip.id!r}") @ text for i, f in enumerate(clip.frames)]
    return float(np.clip(np.mean(sims), -1.0, 1.0))


@dataclass
class MetricReport:
    clip_f: float
    int_err: float
    int_psnr: float
    warp_err: float
    clip_t: float
    source_id: str = ""
    edited_id: str = ""
    prompt: str = ""
    embedder: str = ""
    flow: str = ""
    config_hash: str = ""
    label: str = ""
    scales: dict = field(default_factory=lambda: dict(METRIC_SCALES))

    def __post_init__(self):
        for k in METRIC_KEYS:
            if not math.isfinite(getattr(self, k)):
                raise NumericError(f"metric {k} is not finite")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, line):
        return cls.from_dict(json.loads(line))

    def metrics(self):
        return {k: getattr(self, k) for k in METRIC_KEYS}


def evaluate(source, edited, prompt, embedder=None, flow=None, config_hash="", label="", pairs="consecutive"):
    embedder = embedder or ProjectionEmbedder()
    flow = flow or BlockMatchingFlow()
    int_err, int_psnr = interpolation_metrics(edited)
    return MetricReport(
        clip_f=clip_frame(embedder, edited, pairs),
        int_err=int_err,
        int_psnr=int_psnr,
        warp_err=warping_error(flow, source, edited),
        clip_t=clip_text(embedder, edited, prompt),
        source_id=source.id,
        edited_id=edited.id,
        prompt=prompt,
        embedder=embedder.name,
        flow=flow.name,
        config_hash=config_hash,
        label=label,
    )


def evaluate_batch(items, embedder=None, flow=None, config_hash="", workers=1, pairs="consecutive"):
    """``items``: iterable of (source, edited, prompt[, flow]). Order of results follows input."""
    def one(item):
        src, edt, prompt, *rest = item
        return evaluate(src, edt, prompt, embedder, rest[0] if rest and rest[0] else flow, config_hash,
                        pairs=pairs)

    items = list(items)
    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, items))


def summarize(reports, label="mean"):
    """Arithmetic mean per metric over ``reports``."""
    if not reports:
        raise ValidationError("cannot summarize zero reports")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_KEYS}
    return {"label": label, "n": len(reports), **means}
