"""Drive the external codec tools: probe, re-encode, dump decoder data.

Every video handled here goes through a child process; nothing is decoded
in-process.  Probing and re-encoding use the ffmpeg executable.  Both
decoder channels (``mb_type`` debug matrices and exported motion vectors)
come from ``python -m mbmdetect.mvexport``, a single-threaded libavcodec
decode through PyAV.
"""
from __future__ import annotations

import configparser
import dataclasses
import functools
import json
import logging
import os
import re
import shutil
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    DecoderFailure,
    EmptyDebugOutput,
    EncoderFailure,
    FrameCountMismatch,
    NotAVideo,
    ToolNotFound,
    ToolVersionMismatch,
    UnsupportedCodec,
)
from .extract import FrameGrid, load_generation

logger = logging.getLogger(__name__)

TOOL_ENV = "MBMDETECT_FFMPEG"
H264_NAMES = ("h264",)


def find_tool(path: str | os.PathLike | None = None) -> str:
    """Resolve the codec tool: explicit path, then $MBMDETECT_FFMPEG, then
    ``ffmpeg`` on PATH, then the binary bundled with imageio-ffmpeg."""
    candidate = path or os.environ.get(TOOL_ENV)
    if candidate:
        resolved = shutil.which(str(candidate))
        if resolved is None:
            raise ToolNotFound(f"codec tool {candidate!r} is not executable")
        return resolved
    resolved = shutil.which("ffmpeg")
    if resolved:
        return resolved
    try:
        import imageio_ffmpeg
        return imageio_ffmpeg.get_ffmpeg_exe()
    except (ImportError, RuntimeError) as exc:
        raise ToolNotFound(f"no ffmpeg found (set {TOOL_ENV})") from exc


@functools.lru_cache(maxsize=None)
def tool_version(tool: str) -> str:
    """Version string pinning both extraction channels."""
    out = subprocess.run([tool, "-hide_banner", "-version"], capture_output=True, text=True)
    first = out.stdout.splitlines()[0] if out.stdout else "unknown"
    try:
        import av
        mv = f"pyav {av.__version__} libavcodec {'.'.join(map(str, av.library_versions['libavcodec']))}"
    except ImportError:
        mv = "pyav unavailable"
    return f"{first} | {mv}"


@dataclass(frozen=True)
class VideoInfo:
    path: Path
    width: int
    height: int
    frame_count: int
    frame_rate: float
    codec_name: str

    @property
    def is_h264(self) -> bool:
        return self.codec_name in H264_NAMES


@dataclass(frozen=True)
class EncodeConfig:
    """Re-encode settings, held fixed for every generation of a ladder.

    ``rate_control`` is ``"qp"`` (constant quantiser, the default) or
    ``"crf"``; ``quality_scale`` is the QP or CRF value.  Scene-cut detection
    and adaptive B-frame placement are always off so the GOP pattern is the
    same in every generation.
    """

    quality_scale: int = 23
    gop_length: int = 12
    b_frames: int = 2
    preset: str = "medium"
    rate_control: str = "qp"

    def __post_init__(self):
        if self.rate_control not in ("qp", "crf"):
            raise ValueError(f"rate_control must be 'qp' or 'crf', not {self.rate_control!r}")
        if not 0 <= self.quality_scale <= 51:
            raise ValueError("quality_scale must be within 0..51")
        if self.gop_length < 1 or self.b_frames < 0:
            raise ValueError("gop_length must be >= 1 and b_frames >= 0")

    def encoder_args(self) -> list[str]:
        return [
            "-c:v", "libx264",
            f"-{self.rate_control}", str(self.quality_scale),
            "-g", str(self.gop_length), "-keyint_min", str(self.gop_length),
            "-bf", str(self.b_frames),
            "-preset", self.preset,
            "-sc_threshold", "0",
            "-x264-params", "scenecut=0:b-adapt=0:open-gop=0",
            "-pix_fmt", "yuv420p",
        ]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "EncodeConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in values and values[f.name] is not None:
                kw[f.name] = type(f.default)(values[f.name])
        return cls(**kw)

    def digest_text(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Read an INI-style settings file.

    Recognised keys (section names are ignored, keys are global)::

        [encode]
        quality_scale = 23
        gop_length = 12
        b_frames = 2
        preset = medium
        rate_control = qp

        [tool]
        codec_tool = /usr/bin/ffmpeg
        jobs = 4
    """
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    values = {}
    for section in parser.sections():
        values.update(parser[section])
    return values


def _run(cmd: list[str], error_cls, what: str, **kw) -> subprocess.CompletedProcess:
    logger.debug("running %s", " ".join(map(str, cmd)))
    proc = subprocess.run(cmd, capture_output=True, **kw)
    if proc.returncode != 0:
        stderr = proc.stderr if isinstance(proc.stderr, str) else proc.stderr.decode(errors="replace")
        raise error_cls(f"{what} failed with exit code {proc.returncode}", stderr[-4000:])
    return proc


_STREAM_RE = re.compile(r"Stream #\d+:\d+.*?: Video: (\w+)")
_SIZE_RE = re.compile(r", (\d{2,5})x(\d{2,5})")
_FPS_RE = re.compile(r", ([\d.]+) (?:fps|tbr)")


def probe_video(path: str | os.PathLike, tool: str | None = None) -> VideoInfo:
    """Describe a video; the frame count comes from decoding every frame."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    tool = find_tool(tool)
    proc = subprocess.run(
        [tool, "-hide_banner", "-nostdin", "-i", str(path), "-map", "0:v:0",
         "-f", "framecrc", "-"], capture_output=True, text=True)
    stream = _STREAM_RE.search(proc.stderr)
    if stream is None:
        raise NotAVideo(f"{path}: no video stream ({proc.stderr.strip().splitlines()[-1:]})")
    codec = stream.group(1)
    if codec not in H264_NAMES:
        raise UnsupportedCodec(f"{path}: stream is {codec}, not H.264")
    if proc.returncode != 0:
        raise NotAVideo(f"{path}: decoder rejected input\n{proc.stderr[-2000:]}")
    line = proc.stderr[stream.start():].splitlines()[0]
    size = _SIZE_RE.search(line)
    fps = _FPS_RE.search(line)
    frames = sum(1 for ln in proc.stdout.splitlines() if ln and not ln.startswith("#"))
    if size is None or frames == 0:
        raise NotAVideo(f"{path}: no decodable frames")
    return VideoInfo(path, int(size.group(1)), int(size.group(2)), frames,
                     float(fps.group(1)) if fps else 0.0, codec)


def encode_args(src: str | os.PathLike, config: EncodeConfig, dst: str | os.PathLike,
                input_args: list[str] | None = None) -> list[str]:
    return [
        "-hide_banner", "-nostdin", "-y", "-v", "error",
        *(input_args or []), "-i", str(src),
        "-map", "0:v:0", "-an", "-sn", "-dn", "-map_metadata", "-1",
        "-fps_mode", "passthrough",
        *config.encoder_args(),
        "-fflags", "+bitexact", "-flags:v", "+bitexact",
        str(dst),
    ]


def recompress(src: str | os.PathLike, config: EncodeConfig, dst: str | os.PathLike,
               tool: str | None = None, *, src_frames: int | None = None) -> Path:
    """Re-encode ``src`` into ``dst`` with ``config``; audio is dropped.

    Raises EncoderFailure on a nonzero exit and FrameCountMismatch when the
    output does not hold exactly as many frames as the input.
    """
    tool = find_tool(tool)
    dst = Path(dst)
    if src_frames is None:
        src_frames = probe_video(src, tool).frame_count
    _run([tool, *encode_args(src, config, dst)], EncoderFailure, f"re-encode of {src}", text=True)
    got = probe_video(dst, tool).frame_count
    if got != src_frames:
        raise FrameCountMismatch(f"{dst}: {got} frames, source has {src_frames}")
    return dst


def dump_channels(video: str | os.PathLike, mb_out: str | os.PathLike | None = None,
                  mv_out: str | os.PathLike | None = None) -> tuple[Path | None, Path | None]:
    """Run the exporter child once and write the requested channels.

    The macroblock-type matrices and the motion vectors come from the same
    single-threaded decode pass, so their frame numbering agrees.
    """
    video = Path(video)
    cmd = [sys.executable, "-m", "mbmdetect.mvexport", str(video)]
    if mb_out:
        cmd += ["--mb-debug", str(mb_out)]
    if mv_out:
        cmd += ["--mv", str(mv_out)]
    _run(cmd, DecoderFailure, f"decoder export of {video}", text=True)
    if mb_out and "New frame, type:" not in Path(mb_out).read_text():
        raise EmptyDebugOutput(f"{video}: decoder printed no macroblock matrices")
    return (Path(mb_out) if mb_out else None), (Path(mv_out) if mv_out else None)


def dump_mb_debug(video: str | os.PathLike, out: str | os.PathLike | None = None) -> Path:
    """Write the decoder's macroblock-type matrices for ``video`` to ``out``."""
    out = out or Path(video).with_suffix(".mbdebug.txt")
    return dump_channels(video, mb_out=out)[0]


def dump_motion_vectors(video: str | os.PathLike, out: str | os.PathLike | None = None) -> Path:
    """Export per-block motion vectors of ``video`` as CSV records."""
    out = out or Path(video).with_suffix(".mv.csv")
    return dump_channels(video, mv_out=out)[1]


# --------------------------------------------------------------------------
# ladders

@dataclass
class Generation:
    index: int
    video_path: Path
    mb_debug_path: Path
    mv_dump_path: Path


@dataclass
class RecompressionLadder:
    """Suspect video (generation 0) followed by ``n`` successive re-encodes."""

    directory: Path
    config: EncodeConfig
    tool_version: str
    width: int
    height: int
    frame_count: int
    generations: list[Generation] = field(default_factory=list)
    owns_directory: bool = True

    METADATA = "ladder.json"

    @property
    def n(self) -> int:
        return len(self.generations) - 1

    def save(self) -> Path:
        meta = {
            "config": self.config.as_dict(),
            "tool_version": self.tool_version,
            "width": self.width, "height": self.height, "frame_count": self.frame_count,
            "generations": [
                {"index": g.index, "video": str(g.video_path), "mb_debug": str(g.mb_debug_path),
                 "mv_dump": str(g.mv_dump_path), "tool_version": self.tool_version}
                for g in self.generations],
        }
        path = self.directory / self.METADATA
        path.write_text(json.dumps(meta, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "RecompressionLadder":
        directory = Path(directory)
        meta = json.loads((directory / cls.METADATA).read_text())
        versions = {g.get("tool_version", meta["tool_version"]) for g in meta["generations"]}
        if len(versions) > 1:
            raise ToolVersionMismatch(f"{directory}: generations built by {sorted(versions)}")
        gens = [Generation(g["index"], Path(g["video"]), Path(g["mb_debug"]), Path(g["mv_dump"]))
                for g in meta["generations"]]
        return cls(directory, EncodeConfig.from_mapping(meta["config"]), meta["tool_version"],
                   meta["width"], meta["height"], meta["frame_count"], gens, owns_directory=False)

    def grids(self) -> list[list[FrameGrid]]:
        """Parse and merge both channels of every generation."""
        out = []
        for g in self.generations:
            frames = load_generation(g.mb_debug_path, g.mv_dump_path, self.width, self.height)
            if len(frames) != self.frame_count:
                raise FrameCountMismatch(
                    f"generation {g.index}: {len(frames)} frames parsed, expected {self.frame_count}")
            out.append(frames)
        return out

    def cleanup(self):
        if self.owns_directory:
            shutil.rmtree(self.directory, ignore_errors=True)


def build_ladder(src: str | os.PathLike, n: int, config: EncodeConfig,
                 workdir: str | os.PathLike | None = None, tool: str | None = None) -> RecompressionLadder:
    """Build generations 0..n of ``src`` and dump both channels for each.

    A fresh temporary directory is used unless ``workdir`` is given.  On any
    failure everything written so far is removed before the error propagates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    src = Path(src)
    tool = find_tool(tool)
    info = probe_video(src, tool)
    if workdir is None:
        directory, owns = Path(tempfile.mkdtemp(prefix="ladder-")), True
    else:
        directory = Path(workdir)
        owns = not directory.exists()
        directory.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    try:
        ladder = RecompressionLadder(directory, config, tool_version(tool), info.width,
                                     info.height, info.frame_count, owns_directory=owns)
        video = src
        for k in range(n + 1):
            if k:
                video = directory / f"gen{k}.mp4"
                created.append(video)
                recompress(ladder.generations[-1].video_path, config, video, tool,
                           src_frames=info.frame_count)
            mb = directory / f"gen{k}.mbdebug.txt"
            mv = directory / f"gen{k}.mv.csv"
            created += [mb, mv]
            dump_channels(video, mb, mv)
            ladder.generations.append(Generation(k, video, mb, mv))
        created.append(ladder.save())
    except BaseException:
        if owns:
            shutil.rmtree(directory, ignore_errors=True)
        else:
            for p in created:
                p.unlink(missing_ok=True)
        raise
    logger.info("built %d-generation ladder for %s in %s", n + 1, src, directory)
    return ladder
