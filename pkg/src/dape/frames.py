"""Frame-directory I/O: zero-padded numbered PNGs (``000000.png``, ...)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbone import VideoClip
from .errors import IngestionError


def frame_name(i):
    return f"{i:06d}.png"


def write_frames(clip, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("[0-9]" * 6 + ".png"):
        old.unlink()
    c = clip.frames.shape[-1]
    for i, frame in enumerate(clip.frames):
        arr = np.round(frame * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[..., 0] if c == 1 else arr, mode="L" if c == 1 else "RGB")
        img.save(directory / frame_name(i), optimize=False)
    return directory


def read_frames(directory, fps=8.0, id=None):
    directory = Path(directory)
    paths = sorted(directory.glob("[0-9]" * 6 + ".png"))
    if not paths:
        raise IngestionError(f"{directory}: no numbered PNG frames")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as img:
                arr = np.asarray(img, dtype=np.float32) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise IngestionError(f"{p}: undecodable frame ({exc})") from exc
        frames.append(arr[..., None] if arr.ndim == 2 else arr[..., :3])
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise IngestionError(f"{directory}: frames differ in size {sorted(shapes)}")
    return VideoClip(np.stack(frames), fps=fps, id=id or directory.name)
