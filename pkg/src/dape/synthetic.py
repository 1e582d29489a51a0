"""Deterministic synthetic clips used by the tests, the CLI demo data and curation checks."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .backbone import VideoClip


def texture(height, width, channels=3, seed=0, smooth=3.0):
    """Smoothed random texture in [0, 1]; unique enough for block matching."""
    rng = np.random.default_rng(seed)
    x = rng.random((height, width, channels)).astype(np.float32)
    if smooth > 0:
        x = gaussian_filter(x, sigma=(smooth, smooth, 0), mode="wrap")
    lo, hi = x.min(), x.max()
    return ((x - lo) / max(hi - lo, 1e-6)).astype(np.float32)


def static_clip(frames=32, size=512, channels=3, seed=0, id="static"):
    tex = texture(size, size, channels, seed)
    return VideoClip(np.repeat(tex[None], frames, 0), id=id)


def translation_clip(frames=32, size=512, channels=3, shift=8, seed=1, id="translate", smooth=3.0):
    """Content moves ``shift`` pixels to the right each frame (periodic wrap)."""
    tex = texture(size, size, channels, seed, smooth)
    out = np.stack([np.roll(tex, shift * i, axis=1) for i in range(frames)])
    return VideoClip(out, id=id)


def hard_cut_clip(frames=32, size=512, channels=3, id="hardcut"):
    """Flat grey shot that cuts to a brighter flat shot halfway through."""
    out = np.full((frames, size, size, channels), 0.2, np.float32)
    out[frames // 2:] = 0.8
    return VideoClip(out, id=id)


def fade_clip(frames=32, size=64, channels=3, start=0.2, stop=0.8, id="fade"):
    levels = np.linspace(start, stop, frames, dtype=np.float32)
    out = np.broadcast_to(levels[:, None, None, None], (frames, size, size, channels))
    return VideoClip(np.ascontiguousarray(out), id=id)


def template_clip(frames=8, size=32, channels=3, seed=0, id="synthetic"):
    """Small moving-blob clip used as the one-shot training template."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    bg = texture(size, size, channels, seed, smooth=2.0) * 0.3 + 0.2
    colour = np.array([0.9, 0.6, 0.2, 0.5][:channels], np.float32)
    out = []
    for i in range(frames):
        cx = size * (0.3 + 0.4 * i / max(frames - 1, 1))
        cy = size * 0.5
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (size / 8) ** 2))[..., None]
        out.append(bg * (1 - blob) + colour * blob)
    return VideoClip(np.clip(np.stack(out), 0, 1).astype(np.float32), id=id)
