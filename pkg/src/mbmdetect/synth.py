"""Seeded procedural test clips.

Each clip is a textured background (random 8x8 blocks plus a sinusoidal
ramp) panned at a constant rate, with a few filled discs moving over it and
a little sensor noise.  Frames go straight into the encoder as raw RGB, so
a clip that has been encoded k times is the output of exactly k encodes.
"""
from __future__ import annotations

import os
import shutil
import subprocess
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np

from .codec import EncodeConfig, encode_args, find_tool, recompress
from .errors import EncoderFailure

N_SHAPES = 5
NOISE_SIGMA = 4.0


def procedural_frames(width: int, height: int, frames: int,
                      rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Yield ``frames`` uint8 RGB arrays of shape (height, width, 3)."""
    yy, xx = np.mgrid[0:height, 0:width]
    bg = rng.random((height // 8 + 1, width // 8 + 1, 3)) * 255
    bg = np.kron(bg, np.ones((8, 8, 1)))[:height, :width]
    period = 5 + rng.random() * 10
    bg = bg * 0.6 + 60 * np.sin(xx[..., None] / period) + 60
    scale = max(width, height) / 320
    shapes = [(rng.random() * width, rng.random() * height,
               rng.normal(0, 3) * scale, rng.normal(0, 3) * scale,
               (10 + rng.random() * 30) * scale, rng.random(3) * 255)
              for _ in range(N_SHAPES)]
    pan = rng.normal(0, 1.5, 2) * scale
    for t in range(frames):
        f = np.roll(bg, (int(t * pan[1]), int(t * pan[0])), axis=(0, 1))
        for x, y, vx, vy, r, colour in shapes:
            inside = (xx - (x + vx * t)) ** 2 + (yy - (y + vy * t)) ** 2 < r * r
            f[inside] = colour
        f = f + rng.normal(0, NOISE_SIGMA, f.shape)
        yield np.clip(f, 0, 255).astype(np.uint8)


def encode_frames(frames: Iterator[np.ndarray], width: int, height: int, fps: int,
                  config: EncodeConfig, dst: str | os.PathLike, tool: str | None = None) -> Path:
    """Pipe raw RGB frames into one encode."""
    tool = find_tool(tool)
    raw_in = ["-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{width}x{height}", "-r", str(fps)]
    proc = subprocess.Popen([tool, *encode_args("-", config, dst, raw_in)],
                            stdin=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        for f in frames:
            proc.stdin.write(f.tobytes())
        proc.stdin.close()
    except BrokenPipeError:
        pass
    stderr = proc.stderr.read().decode(errors="replace")
    if proc.wait() != 0:
        raise EncoderFailure(f"encode of raw frames into {dst} exited {proc.returncode}", stderr)
    return Path(dst)


def make_clip(dst: str | os.PathLike, seed, encodes: int, config: EncodeConfig,
              width: int = 320, height: int = 240, frames: int = 60, fps: int = 30,
              tool: str | None = None) -> Path:
    """Write a clip that went through ``encodes`` successive encodes.

    ``seed`` is anything ``numpy.random.default_rng`` accepts; the same seed
    always gives the same raw frames.
    """
    if encodes < 1:
        raise ValueError("a clip needs at least one encode")
    tool = find_tool(tool)
    dst = Path(dst)
    rng = np.random.default_rng(seed)
    if encodes == 1:
        return encode_frames(procedural_frames(width, height, frames, rng),
                             width, height, fps, config, dst, tool)
    tmp = Path(tempfile.mkdtemp(prefix="clip-", dir=dst.parent))
    try:
        prev = encode_frames(procedural_frames(width, height, frames, rng),
                             width, height, fps, config, tmp / "enc1.mp4", tool)
        for k in range(2, encodes + 1):
            out = dst if k == encodes else tmp / f"enc{k}.mp4"
            prev = recompress(prev, config, out, tool, src_frames=frames)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return dst
