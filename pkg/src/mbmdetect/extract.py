"""Macroblock extraction: decoder debug text + motion-vector dump -> frame grids.

Two channels come out of the external decoder for every video:

* the ``-debug mb_type`` text, one symbol matrix per frame, which gives the
  macroblock type and partition of every cell;
* a tabular motion-vector export (one record per predicted block).

``parse_debug_stream`` and ``parse_mv_dump`` read them, ``merge_mb_and_mv``
joins them into :class:`FrameGrid` objects whose cells are
:class:`MacroblockMode` values.  ``serialize_grids``/``parse_grids`` define the
canonical line-oriented grid format used for golden fixtures and caching.
"""
from __future__ import annotations

import csv
import enum
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple
from urllib.parse import quote, unquote

from .errors import (
    DimensionMismatch,
    GrammarError,
    InvalidBlockSize,
    MvOnIntra,
    OrphanVector,
)

MB_SIZE = 16
VALID_BLOCK_SIZES = (4, 8, 16)


class Kind(enum.Enum):
    INTRA4X4 = "intra4x4"
    INTRA16X16 = "intra16x16"
    SKIP = "skip"
    FORWARD = "forward"
    BACKWARD = "backward"
    BIDIRECTIONAL = "bi"
    OTHER = "other"


class Partition(enum.Enum):
    WHOLE_16X16 = "16x16"
    TWO_16X8 = "16x8"
    TWO_8X16 = "8x16"
    FOUR_8X8 = "8x8"


class Direction(enum.IntEnum):
    PAST = 0
    FUTURE = 1


class FrameType(enum.Enum):
    I = "I"  # noqa: E741
    P = "P"
    B = "B"


_TYPE_CHARS = {
    "i": Kind.INTRA4X4,
    "I": Kind.INTRA16X16,
    "S": Kind.SKIP,
    "d": Kind.SKIP,  # direct + skip (B slices)
    "D": Kind.SKIP,
    ">": Kind.FORWARD,
    "<": Kind.BACKWARD,
    "X": Kind.BIDIRECTIONAL,
}

# FFmpeg's segmentation marks: '-' splits horizontally (two 16x8 blocks),
# '|' vertically (two 8x16 blocks).
_SEG_CHARS = {
    " ": Partition.WHOLE_16X16,
    "+": Partition.FOUR_8X8,
    "-": Partition.TWO_16X8,
    "|": Partition.TWO_8X16,
}

_PICT_TYPES = {"I": FrameType.I, "i": FrameType.I, "P": FrameType.P,
               "p": FrameType.P, "B": FrameType.B, "b": FrameType.B}

_INTRA = (Kind.INTRA4X4, Kind.INTRA16X16)


@dataclass(frozen=True)
class MacroblockType:
    kind: Kind
    partition: Partition = Partition.WHOLE_16X16
    raw: str = ""  # only set for Kind.OTHER

    @property
    def is_intra(self) -> bool:
        return self.kind in _INTRA

    @property
    def is_skip(self) -> bool:
        return self.kind is Kind.SKIP

    @property
    def carries_mvs(self) -> bool:
        """False for skipped and intra macroblocks, whose vectors are never compared."""
        return not (self.is_intra or self.is_skip)


@dataclass(frozen=True)
class MotionVector:
    """One exported block vector, in the decoder's quarter-pel integer units."""

    dx: int
    dy: int
    direction: Direction
    block_x: int
    block_y: int
    block_w: int = 16
    block_h: int = 16

    def __post_init__(self):
        if self.block_w not in VALID_BLOCK_SIZES or self.block_h not in VALID_BLOCK_SIZES:
            raise InvalidBlockSize(f"block size {self.block_w}x{self.block_h}")
        object.__setattr__(self, "direction", Direction(self.direction))

    @property
    def sort_key(self):
        return (self.block_y, self.block_x, self.direction, self.block_h,
                self.block_w, self.dy, self.dx)


def _canonical(mvs: Iterable[MotionVector]) -> tuple[MotionVector, ...]:
    return tuple(sorted(mvs, key=lambda mv: mv.sort_key))


@dataclass(frozen=True, eq=False)
class MacroblockMode:
    """Macroblock mode: type plus the canonically ordered vector list.

    Equality follows the mode-equality rule: types must match, and vectors
    are compared only when the type carries them (not skipped, not intra).
    """

    mb_type: MacroblockType
    mvs: tuple[MotionVector, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mvs", _canonical(self.mvs))

    @property
    def key(self):
        if self.mb_type.carries_mvs:
            return (self.mb_type, self.mvs)
        return (self.mb_type,)

    def __eq__(self, other):
        if not isinstance(other, MacroblockMode):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)


@dataclass(frozen=True)
class FrameGrid:
    frame_index: int
    frame_type: FrameType
    rows: int
    cols: int
    cells: tuple[tuple[MacroblockMode, ...], ...] = field(repr=False)

    def __post_init__(self):
        if len(self.cells) != self.rows or any(len(r) != self.cols for r in self.cells):
            raise DimensionMismatch(
                f"frame {self.frame_index}: cells do not form a {self.rows}x{self.cols} grid")
        if self.frame_type is FrameType.I:
            for row in self.cells:
                for cell in row:
                    if cell.mb_type.kind is not Kind.OTHER and not cell.mb_type.is_intra:
                        raise DimensionMismatch(
                            f"frame {self.frame_index}: I-frame holds a "
                            f"{cell.mb_type.kind.value} macroblock")

    def __iter__(self):
        for y, row in enumerate(self.cells):
            for x, cell in enumerate(row):
                yield y, x, cell

    @property
    def mv_count(self) -> int:
        return sum(len(cell.mvs) for _, _, cell in self)


def grid_shape(width: int, height: int) -> tuple[int, int]:
    """(rows, cols) of the macroblock grid covering a width x height picture."""
    return math.ceil(height / MB_SIZE), math.ceil(width / MB_SIZE)


def classify_symbol(symbol: str) -> MacroblockType:
    """Map one debug-matrix cell (type char, segmentation char, interlace
    char) to a :class:`MacroblockType`.  Never fails: unknown symbols come
    back as ``Kind.OTHER`` with the raw text preserved."""
    if not symbol:
        return MacroblockType(Kind.OTHER, raw=symbol)
    kind = _TYPE_CHARS.get(symbol[0])
    seg = symbol[1] if len(symbol) > 1 else " "
    if kind is None:
        return MacroblockType(Kind.OTHER, raw=symbol.rstrip() or symbol)
    if kind in _INTRA:
        partition = Partition.WHOLE_16X16 if seg == " " else None
    else:
        partition = _SEG_CHARS.get(seg)
    if partition is None:
        return MacroblockType(Kind.OTHER, raw=symbol.rstrip())
    return MacroblockType(kind, partition)


# --------------------------------------------------------------------------
# debug text

class TypeMatrix(NamedTuple):
    frame_index: int
    frame_type: FrameType | None
    types: tuple[tuple[MacroblockType, ...], ...]


_PREFIX_RE = re.compile(r"^\[[^\]]*@ 0x[0-9a-fA-F]+\] ?")
_NEW_FRAME_RE = re.compile(r"^New frame, type: (\S)\s*$")
_COLUMN_HEADER_RE = re.compile(r"^ +\d+( +\d+)* *$")
_ROW_RE = re.compile(r"^ *(\d+) (.*)$")


def strip_log_prefix(line: str) -> str:
    return _PREFIX_RE.sub("", line, count=1)


def is_debug_line(line: str) -> bool:
    """True for lines belonging to the macroblock-type grammar."""
    body = strip_log_prefix(line).rstrip("\n")
    if _NEW_FRAME_RE.match(body) or _COLUMN_HEADER_RE.match(body):
        return True
    m = _ROW_RE.match(body)
    return bool(m) and not m.group(2).strip().isdigit() and bool(m.group(2).strip())


def _split_cells(text: str) -> list[str]:
    if len(text) % 3:
        text = text + " " * (3 - len(text) % 3)
    return [text[i:i + 3] for i in range(0, len(text), 3)]


def parse_debug_stream(text: str) -> list[TypeMatrix]:
    """Parse captured ``-debug mb_type`` text into per-frame type matrices.

    Lines may carry the ``[h264 @ 0x...]`` log prefix or not.  Raises
    GrammarError (with a 1-based line number) for any line outside the
    grammar, and DimensionMismatch when a frame's matrix differs in size from
    the first frame's.
    """
    frames: list[TypeMatrix] = []
    cur_type: FrameType | None = None
    cur_rows: list[tuple[MacroblockType, ...]] | None = None
    started = False
    shape = None

    def finish():
        nonlocal shape
        if cur_rows is None:
            return
        idx = len(frames)
        if not cur_rows:
            raise GrammarError(line_no, "", f"frame {idx} has no macroblock rows")
        this_shape = (len(cur_rows), len(cur_rows[0]))
        if shape is None:
            shape = this_shape
        elif this_shape != shape:
            raise DimensionMismatch(
                f"frame {idx} is {this_shape[0]}x{this_shape[1]} macroblocks, "
                f"first frame was {shape[0]}x{shape[1]}")
        frames.append(TypeMatrix(idx, cur_type, tuple(cur_rows)))

    line_no = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        body = strip_log_prefix(raw)
        if not body.strip():
            continue
        m = _NEW_FRAME_RE.match(body)
        if m:
            finish()
            cur_type = _PICT_TYPES.get(m.group(1))
            cur_rows = []
            started = False
            continue
        if _COLUMN_HEADER_RE.match(body):
            if cur_rows is None or started:
                finish()
                cur_type = None
                cur_rows = []
            started = True
            continue
        m = _ROW_RE.match(body)
        if m and cur_rows is not None and m.group(2).strip():
            y = int(m.group(1))
            if y != MB_SIZE * len(cur_rows):
                raise GrammarError(line_no, raw, f"expected row offset {MB_SIZE * len(cur_rows)}")
            row = tuple(classify_symbol(s) for s in _split_cells(m.group(2)))
            if cur_rows and len(row) != len(cur_rows[0]):
                raise GrammarError(line_no, raw, "ragged macroblock row")
            cur_rows.append(row)
            started = True
            continue
        raise GrammarError(line_no, raw)
    finish()
    return frames


# --------------------------------------------------------------------------
# motion-vector dump

MV_COLUMNS = ("frame", "source", "block_w", "block_h", "src_x", "src_y", "dst_x", "dst_y")
MV_EXACT_COLUMNS = MV_COLUMNS + ("motion_x", "motion_y", "motion_scale")


def _mv_from_record(rec: dict[str, int]) -> MotionVector:
    w, h = rec["block_w"], rec["block_h"]
    if w not in VALID_BLOCK_SIZES or h not in VALID_BLOCK_SIZES:
        raise InvalidBlockSize(f"frame {rec['frame']}: block size {w}x{h}")
    if "motion_x" in rec:
        scale = rec["motion_scale"]
        if scale <= 0 or (4 * rec["motion_x"]) % scale or (4 * rec["motion_y"]) % scale:
            raise ValueError(f"motion scale {scale} does not map to quarter-pel units")
        dx, dy = 4 * rec["motion_x"] // scale, 4 * rec["motion_y"] // scale
    else:
        dx, dy = 4 * (rec["src_x"] - rec["dst_x"]), 4 * (rec["src_y"] - rec["dst_y"])
    return MotionVector(
        dx=dx, dy=dy,
        direction=Direction.PAST if rec["source"] < 0 else Direction.FUTURE,
        # dst_x/dst_y locate the block centre
        block_x=rec["dst_x"] - w // 2, block_y=rec["dst_y"] - h // 2,
        block_w=w, block_h=h,
    )


def parse_mv_dump(text: str) -> dict[int, list[MotionVector]]:
    """Parse a motion-vector CSV export into ``{frame_index: [MotionVector]}``.

    The required columns are ``frame,source,block_w,block_h,src_x,src_y,
    dst_x,dst_y``; the optional ``motion_x,motion_y,motion_scale`` columns
    give sub-pel exact vectors.  Lines starting with ``#`` are comments.
    """
    out: dict[int, list[MotionVector]] = {}
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1)
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        return out
    header_no, header_line = lines[0]
    header = [h.strip() for h in next(csv.reader([header_line]))]
    missing = [c for c in MV_COLUMNS if c not in header]
    if missing:
        raise GrammarError(header_no, header_line, f"missing columns {missing}")
    wanted = [c for c in MV_EXACT_COLUMNS if c in header]
    pos = {c: header.index(c) for c in wanted}
    for line_no, line in lines[1:]:
        fields = next(csv.reader([line]))
        if len(fields) != len(header):
            raise GrammarError(line_no, line, f"expected {len(header)} fields")
        try:
            rec = {c: int(fields[i]) for c, i in pos.items()}
            mv = _mv_from_record(rec)
        except ValueError as exc:
            raise GrammarError(line_no, line, str(exc)) from None
        except InvalidBlockSize as exc:
            raise InvalidBlockSize(f"line {line_no}: {exc}") from None
        out.setdefault(rec["frame"], []).append(mv)
    return out


def _infer_frame_type(types, mvs) -> FrameType:
    if all(t.is_intra for row in types for t in row):
        return FrameType.I
    if any(mv.direction is Direction.FUTURE for mv in mvs):
        return FrameType.B
    return FrameType.P


def merge_mb_and_mv(matrices: list[TypeMatrix], mv_map: dict[int, list[MotionVector]],
                    width: int, height: int) -> list[FrameGrid]:
    """Attach every vector to the macroblock containing its block origin.

    Vectors landing on skipped cells are dropped (the decoder exports the
    inferred skip vector, which never takes part in mode comparison).  A vector
    on an intra cell means the two channels are out of step and aborts with
    MvOnIntra; one outside the grid raises OrphanVector.
    """
    rows, cols = grid_shape(width, height)
    stray = sorted(set(mv_map) - set(range(len(matrices))))
    if stray:
        raise OrphanVector(f"vectors for frame {stray[0]} but only {len(matrices)} frames decoded")
    grids = []
    for mat in matrices:
        if len(mat.types) != rows or any(len(r) != cols for r in mat.types):
            raise DimensionMismatch(
                f"frame {mat.frame_index}: {len(mat.types)}x{len(mat.types[0]) if mat.types else 0} "
                f"macroblocks, expected {rows}x{cols} for {width}x{height}")
        frame_mvs = mv_map.get(mat.frame_index, [])
        buckets: list[list[list[MotionVector]]] = [[[] for _ in range(cols)] for _ in range(rows)]
        for mv in frame_mvs:
            r, c = mv.block_y // MB_SIZE, mv.block_x // MB_SIZE
            if not (0 <= r < rows and 0 <= c < cols) or mv.block_x < 0 or mv.block_y < 0:
                raise OrphanVector(
                    f"frame {mat.frame_index}: block at ({mv.block_x},{mv.block_y}) outside grid")
            t = mat.types[r][c]
            if t.is_intra:
                raise MvOnIntra(
                    f"frame {mat.frame_index}: vector attached to intra macroblock ({r},{c})")
            if not t.is_skip:
                buckets[r][c].append(mv)
        ftype = mat.frame_type or _infer_frame_type(mat.types, frame_mvs)
        cells = tuple(
            tuple(MacroblockMode(t, tuple(b)) for t, b in zip(trow, brow))
            for trow, brow in zip(mat.types, buckets))
        grids.append(FrameGrid(mat.frame_index, ftype, rows, cols, cells))
    return grids


def load_generation(mb_debug_path, mv_dump_path, width: int, height: int) -> list[FrameGrid]:
    matrices = parse_debug_stream(Path(mb_debug_path).read_text())
    mv_map = parse_mv_dump(Path(mv_dump_path).read_text())
    return merge_mb_and_mv(matrices, mv_map, width, height)


# --------------------------------------------------------------------------
# canonical grid serialization
#
#   frame <index> <I|P|B> <rows>x<cols>
#   <r> <c> <kind> <partition> [<dx>,<dy>,<past|future>,<bx>,<by>,<bw>,<bh> ...]
#
# one cell per line, row-major; kind "other" is written as other:<raw> with
# the raw symbol percent-encoded.

_FRAME_HEADER_RE = re.compile(r"^frame (\d+) ([IPB]) (\d+)x(\d+)$")


def _kind_token(t: MacroblockType) -> str:
    if t.kind is Kind.OTHER:
        return "other:" + quote(t.raw, safe="")
    return t.kind.value


def _mv_token(mv: MotionVector) -> str:
    direction = "past" if mv.direction is Direction.PAST else "future"
    return f"{mv.dx},{mv.dy},{direction},{mv.block_x},{mv.block_y},{mv.block_w},{mv.block_h}"


def serialize_grids(grids: Iterable[FrameGrid]) -> str:
    buf = io.StringIO()
    for g in grids:
        buf.write(f"frame {g.frame_index} {g.frame_type.value} {g.rows}x{g.cols}\n")
        for y, x, cell in g:
            parts = [str(y), str(x), _kind_token(cell.mb_type), cell.mb_type.partition.value]
            parts.extend(_mv_token(mv) for mv in cell.mvs)
            buf.write(" ".join(parts) + "\n")
    return buf.getvalue()


def _parse_cell(line_no: int, line: str):
    parts = line.split(" ")
    if len(parts) < 4:
        raise GrammarError(line_no, line, "cell needs row, col, kind, partition")
    try:
        y, x = int(parts[0]), int(parts[1])
        if parts[2].startswith("other:"):
            kind, raw = Kind.OTHER, unquote(parts[2][6:])
        else:
            kind, raw = Kind(parts[2]), ""
        mb_type = MacroblockType(kind, Partition(parts[3]), raw)
        mvs = []
        for tok in parts[4:]:
            dx, dy, d, bx, by, bw, bh = tok.split(",")
            direction = {"past": Direction.PAST, "future": Direction.FUTURE}[d]
            mvs.append(MotionVector(int(dx), int(dy), direction, int(bx), int(by), int(bw), int(bh)))
    except (ValueError, KeyError, InvalidBlockSize) as exc:
        raise GrammarError(line_no, line, f"bad cell: {exc}") from None
    return y, x, MacroblockMode(mb_type, tuple(mvs))


def parse_grids(text: str) -> list[FrameGrid]:
    grids = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        m = _FRAME_HEADER_RE.match(lines[i])
        if not m:
            raise GrammarError(i + 1, lines[i], "expected frame header")
        index, ftype, rows, cols = int(m[1]), FrameType(m[2]), int(m[3]), int(m[4])
        cells = [[None] * cols for _ in range(rows)]
        for k in range(rows * cols):
            line_no = i + 2 + k
            if line_no > len(lines):
                raise GrammarError(line_no, "", "truncated frame")
            y, x, mode = _parse_cell(line_no, lines[line_no - 1])
            if (y, x) != divmod(k, cols):
                raise GrammarError(line_no, lines[line_no - 1], "cells out of row-major order")
            cells[y][x] = mode
        grids.append(FrameGrid(index, ftype, rows, cols, tuple(tuple(r) for r in cells)))
        i += 1 + rows * cols
    return grids
