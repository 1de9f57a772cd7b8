"""Image containers, patch geometry and binary file I/O.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` holding floats in
``[0, 1]`` (``C`` is 1 or 3).  Gate masks and anomaly maps are 2-D ``(H, W)``
arrays.  Three on-disk formats are supported: binary PPM (``P6``), binary PGM
(``P5``, 8 or 16 bit) and ``FMAP1``, a small lossless float32 container.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "PayloadLengthError",
    "CellRef",
    "PatchGrid",
    "read_image",
    "write_image",
    "encode_float_map",
    "decode_float_map",
    "read_float_map",
    "write_float_map",
    "build_grid",
    "pad_to_grid",
    "crop_to",
    "extract_patch",
]

FMAP_MAGIC = b"FMAP1"


class ImageFormatError(ValueError):
    """Malformed header; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class PayloadLengthError(ValueError):
    """Payload shorter or longer than the header promises."""

    def __init__(self, expected: int, actual: int):
        super().__init__(f"payload length mismatch: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


def as_image(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# PNM


def _parse_pnm_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    if len(buf) < 2 or buf[:1] != b"P":
        raise ImageFormatError("missing 'P' magic", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", 0)
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        # whitespace and '#' comments between tokens
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch == b"#":
                nl = buf.find(b"\n", pos)
                if nl < 0:
                    raise ImageFormatError("unterminated comment", pos)
                pos = nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ImageFormatError("expected decimal header field", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte", pos)
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError("non-positive image dimensions", pos - 1)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} outside 1..65535", pos - 1)
    return magic, width, height, maxval, pos


def read_image(path: str | Path) -> np.ndarray:
    """Read a binary PPM/PGM file into a float32 ``(H, W, C)`` array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _parse_pnm_header(buf)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    payload = buf[offset:]
    if len(payload) != expected:
        raise PayloadLengthError(expected, len(payload))
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    if raw.max(initial=0) > maxval:
        raise ImageFormatError("sample exceeds declared maxval", offset)
    return (raw.astype(np.float64) / maxval).astype(np.float32)


def write_image(img: np.ndarray, path: str | Path, bit_depth: int = 8) -> None:
    """Write ``img`` as P6 (3 channels) or P5 (1 channel), quantised by round(v * maxval)."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    a = as_image(img).astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    h, w, c = a.shape
    maxval = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval)
    payload = q.astype(">u2" if bit_depth == 16 else "u1").tobytes()
    magic = "P6" if c == 3 else "P5"
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# FMAP1 float maps


def encode_float_map(img: np.ndarray) -> bytes:
    a = as_image(img)
    h, w, c = a.shape
    header = FMAP_MAGIC + b"\n" + f"{h} {w} {c}\n".encode("ascii")
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_float_map(buf: bytes, offset: int = 0, exact: bool = False) -> tuple[np.ndarray, int]:
    """Decode one float map starting at ``offset``; return (image, end offset).

    With ``exact`` the payload must run to the end of ``buf``.
    """
    nl = buf.find(b"\n", offset)
    if nl < 0 or buf[offset:nl] != FMAP_MAGIC:
        raise ImageFormatError("bad FMAP1 magic", offset)
    hdr_end = buf.find(b"\n", nl + 1)
    if hdr_end < 0:
        raise ImageFormatError("unterminated FMAP1 size line", nl + 1)
    try:
        h, w, c = (int(t) for t in buf[nl + 1 : hdr_end].split())
    except ValueError:
        raise ImageFormatError("size line must be 'H W C'", nl + 1) from None
    if min(h, w, c) <= 0:
        raise ImageFormatError("non-positive size", nl + 1)
    start = hdr_end + 1
    n = h * w * c * 4
    avail = len(buf) - start
    if avail < n or (exact and avail != n):
        raise PayloadLengthError(n, avail)
    data = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=start)
    return data.reshape(h, w, c).astype(np.float32), start + n


def read_float_map(path: str | Path) -> np.ndarray:
    img, _ = decode_float_map(Path(path).read_bytes(), 0, exact=True)
    return img


def write_float_map(img: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_float_map(img))


# ---------------------------------------------------------------------------
# Patch geometry


@dataclass(frozen=True)
class CellRef:
    cell_row: int
    cell_col: int
    covering_patches: tuple[int, ...]


@dataclass(frozen=True)
class PatchGrid:
    """Half-stride patch tiling of a reflect-padded image.

    Cells are ``stride x stride`` blocks; each interior cell lies under four
    patches, edge cells under two and corner cells under one.
    """

    height: int
    width: int
    patch_size: int
    stride: int
    padded_height: int
    padded_width: int
    origins: tuple[tuple[int, int], ...]
    n_patch_rows: int
    n_patch_cols: int
    cells: tuple[CellRef, ...]

    @property
    def n_cell_rows(self) -> int:
        return self.padded_height // self.stride

    @property
    def n_cell_cols(self) -> int:
        return self.padded_width // self.stride

    def cell(self, row: int, col: int) -> CellRef:
        return self.cells[row * self.n_cell_cols + col]

    def cell_slice(self, cell: CellRef) -> tuple[slice, slice]:
        s = self.stride
        return slice(cell.cell_row * s, (cell.cell_row + 1) * s), slice(cell.cell_col * s, (cell.cell_col + 1) * s)

    def cell_slice_in_patch(self, cell: CellRef, k: int) -> tuple[slice, slice]:
        r0, c0 = self.origins[k]
        s = self.stride
        r = cell.cell_row * s - r0
        c = cell.cell_col * s - c0
        if not (0 <= r <= self.patch_size - s and 0 <= c <= self.patch_size - s):
            raise ValueError(f"cell ({cell.cell_row}, {cell.cell_col}) outside patch {k}")
        return slice(r, r + s), slice(c, c + s)


def _padded_extent(n: int, patch_size: int, stride: int) -> int:
    return max(patch_size, -(-n // stride) * stride)


def build_grid(height: int, width: int, patch_size: int) -> PatchGrid:
    if patch_size % 2 or patch_size < 8:
        raise ValueError(f"patch_size must be even and >= 8, got {patch_size}")
    if height <= 0 or width <= 0:
        raise ValueError("image dimensions must be positive")
    stride = patch_size // 2
    ph = _padded_extent(height, patch_size, stride)
    pw = _padded_extent(width, patch_size, stride)
    # reflect padding cannot extend an axis by more than its own length - 1
    if ph - height >= height or pw - width >= width:
        raise ValueError(f"patch_size {patch_size} too large for a {height}x{width} image")
    nr = (ph - patch_size) // stride + 1
    nc = (pw - patch_size) // stride + 1
    origins = tuple((i * stride, j * stride) for i in range(nr) for j in range(nc))
    cells = []
    for ci in range(ph // stride):
        rows = [p for p in (ci - 1, ci) if 0 <= p < nr]
        for cj in range(pw // stride):
            cols = [p for p in (cj - 1, cj) if 0 <= p < nc]
            cover = tuple(r * nc + c for r in rows for c in cols)
            cells.append(CellRef(ci, cj, cover))
    return PatchGrid(height, width, patch_size, stride, ph, pw, origins, nr, nc, tuple(cells))


def pad_to_grid(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    a = np.asarray(img)
    pads = [(0, grid.padded_height - a.shape[0]), (0, grid.padded_width - a.shape[1])]
    pads += [(0, 0)] * (a.ndim - 2)
    return np.pad(a, pads, mode="reflect")


def crop_to(img: np.ndarray, grid: PatchGrid) -> np.ndarray:
    return img[: grid.height, : grid.width]


def extract_patch(img: np.ndarray, grid: PatchGrid, k: int) -> np.ndarray:
    if not 0 <= k < len(grid.origins):
        raise IndexError(f"patch index {k} out of range (0..{len(grid.origins) - 1})")
    if img.shape[0] != grid.padded_height or img.shape[1] != grid.padded_width:
        raise ValueError("image is not padded to the grid dimensions")
    r, c = grid.origins[k]
    p = grid.patch_size
    return img[r : r + p, c : c + p].copy()
