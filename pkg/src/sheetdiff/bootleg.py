"""Bootleg scores: data model, byte-group token codec and the ``.bsc`` file format.

A bootleg score is a binary ``w x 62`` matrix; column t marks the staff
positions of the noteheads detected at event t, index 0 being the lowest
position. For the byte tokenization each column is zero-padded to 64 bits and
split into eight bytes, bottom group first, least significant bit = lowest
staff position. The two pad bits (positions 62, 63) live in the top of byte 7
and must stay zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_POSITIONS = 62
N_GROUPS = 8
VOCAB_SIZE = 256
_PAD_MASK = 0b1100_0000  # bits 62, 63 inside byte 7

BSC_MAGIC = b"BSCR"
BSC_VERSION = 1


class BootlegError(ValueError):
    """Invalid bootleg data."""


class CorruptTokenError(BootlegError):
    """A byte group has pad bits set or is out of [0, 255]."""


class BscParseError(BootlegError):
    """Base class for malformed ``.bsc`` files."""


class BadMagicError(BscParseError):
    pass


class UnsupportedVersionError(BscParseError):
    pass


class TruncatedFileError(BscParseError):
    pass


class TrailingBytesError(BscParseError):
    pass


class PadBitsError(BscParseError, CorruptTokenError):
    pass


def _as_columns(columns) -> np.ndarray:
    arr = np.asarray(columns)
    if arr.size == 0:
        return np.zeros((0, N_POSITIONS), dtype=np.uint8)
    if arr.ndim != 2 or arr.shape[1] != N_POSITIONS:
        raise BootlegError(f"bootleg score must be w x {N_POSITIONS}, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise BootlegError("bootleg cells must be 0 or 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class BootlegScore:
    columns: np.ndarray
    piece_id: str = ""

    def __post_init__(self):
        cols = _as_columns(self.columns)
        cols.setflags(write=False)
        object.__setattr__(self, "columns", cols)

    @property
    def w(self) -> int:
        return int(self.columns.shape[0])

    @property
    def noteheads(self) -> int:
        return int(self.columns.sum())

    def __eq__(self, other):
        if not isinstance(other, BootlegScore):
            return NotImplemented
        return self.piece_id == other.piece_id and np.array_equal(self.columns, other.columns)

    def __hash__(self):
        return hash((self.piece_id, self.columns.tobytes()))

    def __repr__(self):
        return f"BootlegScore(piece_id={self.piece_id!r}, w={self.w})"


@dataclass(frozen=True)
class ByteTokenSequence:
    tokens: tuple
    source_w: int

    def __post_init__(self):
        if len(self.tokens) != N_GROUPS * self.source_w:
            raise BootlegError(f"{len(self.tokens)} tokens cannot come from w={self.source_w}")

    def __len__(self):
        return len(self.tokens)


# ---------------------------------------------------------------- column codec


def column_to_bytes(column) -> list[int]:
    col = np.asarray(column)
    if col.shape != (N_POSITIONS,):
        raise BootlegError(f"column must have {N_POSITIONS} entries, got shape {col.shape}")
    if not np.isin(col, (0, 1)).all():
        raise BootlegError("column entries must be 0 or 1")
    padded = np.zeros(N_GROUPS * 8, dtype=np.uint8)
    padded[:N_POSITIONS] = col
    return [int(b) for b in np.packbits(padded, bitorder="little")]


def bytes_to_column(values) -> np.ndarray:
    vals = np.asarray(values)
    if vals.shape != (N_GROUPS,):
        raise CorruptTokenError(f"need {N_GROUPS} byte values, got shape {vals.shape}")
    if (vals < 0).any() or (vals > 255).any():
        raise CorruptTokenError("byte values must lie in [0, 255]")
    if int(vals[-1]) & _PAD_MASK:
        raise CorruptTokenError(f"pad bits set in top byte group (value {int(vals[-1])})")
    bits = np.unpackbits(vals.astype(np.uint8), bitorder="little")
    return bits[:N_POSITIONS].copy()


def columns_to_bytes(columns: np.ndarray) -> np.ndarray:
    """Vectorized column codec: ``[w, 62]`` bits -> ``[w, 8]`` uint8."""
    w = columns.shape[0]
    padded = np.zeros((w, N_GROUPS * 8), dtype=np.uint8)
    padded[:, :N_POSITIONS] = columns
    return np.packbits(padded, axis=1, bitorder="little")


def bytes_to_columns(groups: np.ndarray) -> np.ndarray:
    groups = np.asarray(groups)
    if groups.size == 0:
        return np.zeros((0, N_POSITIONS), dtype=np.uint8)
    if (groups < 0).any() or (groups > 255).any():
        raise CorruptTokenError("byte values must lie in [0, 255]")
    groups = groups.astype(np.uint8).reshape(-1, N_GROUPS)
    if (groups[:, -1] & _PAD_MASK).any():
        raise CorruptTokenError("pad bits set in top byte group")
    return np.unpackbits(groups, axis=1, bitorder="little")[:, :N_POSITIONS]


def tokenize_emb(score: BootlegScore) -> ByteTokenSequence:
    toks = columns_to_bytes(score.columns).reshape(-1)
    return ByteTokenSequence(tuple(int(t) for t in toks), score.w)


def token_array(score: BootlegScore) -> np.ndarray:
    """Byte tokens of ``score`` as a flat int64 array of length 8w."""
    return columns_to_bytes(score.columns).reshape(-1).astype(np.int64)


def detokenize_emb(seq, piece_id: str = "") -> BootlegScore:
    toks = np.asarray(seq.tokens if isinstance(seq, ByteTokenSequence) else seq, dtype=np.int64)
    if toks.size % N_GROUPS:
        raise CorruptTokenError(f"token count {toks.size} is not a multiple of {N_GROUPS}")
    return BootlegScore(bytes_to_columns(toks), piece_id)


# ---------------------------------------------------------------- .bsc files


def encode_bsc(score: BootlegScore) -> bytes:
    pid = score.piece_id.encode("utf-8")
    if len(pid) > 0xFFFF:
        raise BootlegError("piece_id too long for .bsc header")
    head = BSC_MAGIC + struct.pack("<BH", BSC_VERSION, len(pid)) + pid + struct.pack("<I", score.w)
    return head + columns_to_bytes(score.columns).tobytes()


def decode_bsc(blob: bytes) -> BootlegScore:
    if len(blob) < 4 or blob[:4] != BSC_MAGIC:
        raise BadMagicError("not a .bsc file (bad magic)")
    pos = 4
    if len(blob) < pos + 3:
        raise TruncatedFileError("header truncated")
    version, n = struct.unpack_from("<BH", blob, pos)
    if version != BSC_VERSION:
        raise UnsupportedVersionError(f"unsupported .bsc version {version}")
    pos += 3
    if len(blob) < pos + n + 4:
        raise TruncatedFileError("header truncated")
    try:
        piece_id = blob[pos : pos + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BscParseError(f"piece_id is not UTF-8: {exc}") from None
    pos += n
    (w,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    end = pos + N_GROUPS * w
    if len(blob) < end:
        raise TruncatedFileError(f"payload truncated: need {N_GROUPS * w} bytes, have {len(blob) - pos}")
    if len(blob) > end:
        raise TrailingBytesError(f"{len(blob) - end} trailing bytes after payload")
    groups = np.frombuffer(blob, dtype=np.uint8, count=N_GROUPS * w, offset=pos).reshape(w, N_GROUPS)
    if (groups[:, -1] & _PAD_MASK).any():
        raise PadBitsError("pad bits set in payload")
    return BootlegScore(np.unpackbits(groups, axis=1, bitorder="little")[:, :N_POSITIONS], piece_id)


def write_bsc(score: BootlegScore, path) -> None:
    Path(path).write_bytes(encode_bsc(score))


def read_bsc(path) -> BootlegScore:
    return decode_bsc(Path(path).read_bytes())


# ---------------------------------------------------------------- statistics


def corpus_stats(scores) -> dict:
    scores = list(scores)
    widths = [s.w for s in scores]
    hist: dict[int, int] = {}
    for w in widths:
        hist[w] = hist.get(w, 0) + 1
    return {
        "pieces": len(widths),
        "noteheads": int(sum(s.noteheads for s in scores)),
        "length_histogram": dict(sorted(hist.items())),
        "mean_w": float(np.mean(widths)) if widths else 0.0,
        "max_w": int(max(widths)) if widths else 0,
    }
