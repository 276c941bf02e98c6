"""Object keypoints from binary masks: Pavlidis contour tracing plus
equal arc-length resampling of the traced outline."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

Pixel = tuple[int, int]  # (x, y), y grows downward

# headings in clockwise order (image coordinates)
_UP, _RIGHT, _DOWN, _LEFT = (0, -1), (1, 0), (0, 1), (-1, 0)
_HEADINGS = (_UP, _RIGHT, _DOWN, _LEFT)


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.size == 0:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @classmethod
    def from_rows(cls, rows: list[str]) -> "BinaryMask":
        """Build from strings like ``".##."``; ``#`` is foreground."""
        return cls(np.array([[c == "#" for c in row] for row in rows]))


def boundary_oracle(mask: BinaryMask) -> set[Pixel]:
    """Foreground pixels with a background 4-neighbour or on the image border."""
    padded = np.pad(mask.bits, 1, constant_values=False)
    inner = padded[1:-1, 1:-1]
    all_fg = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    edge = inner & ~all_fg
    edge[0, :] |= inner[0, :]
    edge[-1, :] |= inner[-1, :]
    edge[:, 0] |= inner[:, 0]
    edge[:, -1] |= inner[:, -1]
    ys, xs = np.nonzero(edge)
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


def _component(mask: BinaryMask, seed: Pixel) -> np.ndarray:
    labels, _ = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=int))
    return labels == labels[seed[1], seed[0]]


def trace_contour(mask: BinaryMask, seed: Pixel) -> list[Pixel]:
    """Outer contour of the 8-connected component containing ``seed``.

    The trace starts at the component's uppermost-leftmost pixel heading
    right, keeps the exterior on its left and stops when that start state
    recurs. A lone pixel yields a one-element contour.
    """
    if not mask.bits.any():
        raise ValueError("mask has no foreground pixels")
    x0, y0 = seed
    if not (0 <= x0 < mask.width and 0 <= y0 < mask.height) or not mask.bits[y0, x0]:
        raise ValueError(f"seed {seed} is not a foreground pixel")

    comp = _component(mask, seed)
    h, w = comp.shape

    def fg(x: int, y: int) -> bool:
        return 0 <= x < w and 0 <= y < h and bool(comp[y, x])

    ys, xs = np.nonzero(comp)
    top = ys.min()
    start = (int(xs[ys == top].min()), int(top))
    start_dir = 1  # right

    pos, d = start, start_dir
    contour = [start]
    rotations = 0
    limit = 16 * comp.size + 16
    for _ in range(limit):
        hx, hy = _HEADINGS[d]
        lx, ly = _HEADINGS[(d - 1) % 4]
        rx, ry = _HEADINGS[(d + 1) % 4]
        x, y = pos
        p1 = (x + hx + lx, y + hy + ly)
        p2 = (x + hx, y + hy)
        p3 = (x + hx + rx, y + hy + ry)
        if fg(*p1):
            pos, d = p1, (d - 1) % 4
        elif fg(*p2):
            pos = p2
        elif fg(*p3):
            pos = p3
        else:
            d = (d + 1) % 4
            rotations += 1
            if rotations == 3:
                return [start]
            if pos == start and d == start_dir:
                break
            continue
        rotations = 0
        if pos == start and d == start_dir:
            break
        contour.append(pos)
    else:
        raise RuntimeError(f"contour trace from {start} did not close")
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    return contour


def trace_mask(mask: BinaryMask) -> list[Pixel]:
    """Contour of the component holding the first foreground pixel in raster order."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise ValueError("mask has no foreground pixels")
    return trace_contour(mask, (int(xs[0]), int(ys[0])))


def sample_equidistant(contour, k: int) -> np.ndarray:
    """``k`` points at equal Euclidean arc-length steps around the closed contour.

    The first point is ``contour[0]``. Returns a ``(k, 2)`` float array of (x, y).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("empty contour")
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    total = seg.sum()
    if total == 0.0:
        return np.repeat(pts[:1], k, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.arange(k) * (total / k)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(seg) - 1)
    # zero-length segments never get picked: side="right" skips past them
    frac = (targets - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0)
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def object_keypoints(mask: BinaryMask, k: int = 8) -> np.ndarray:
    return sample_equidistant(trace_mask(mask), k)


# ---------------------------------------------------------------- PGM files


def read_pgm(path) -> BinaryMask:
    """Read binary (P5) or ASCII (P2) PGM; values >= 128 (of 255) are foreground."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[pos:end])
        pos = end
    magic = tokens[0]
    width, height, maxval = (int(t) for t in tokens[1:])
    count = width * height
    if magic == b"P5":
        pos += 1
        if maxval < 256:
            values = np.frombuffer(raw, dtype=np.uint8, count=count, offset=pos)
        else:
            values = np.frombuffer(raw, dtype=">u2", count=count, offset=pos)
    elif magic == b"P2":
        values = np.array(raw[pos:].split()[:count], dtype=np.int64)
        if values.size != count:
            raise ValueError(f"{path}: expected {count} samples, found {values.size}")
    else:
        raise ValueError(f"{path}: unsupported PGM magic {magic!r}")
    values = values.astype(np.int64).reshape(height, width)
    return BinaryMask(values * 255 >= 128 * maxval)


def write_pgm(path, mask: BinaryMask, ascii: bool = False) -> None:
    values = np.where(mask.bits, 255, 0).astype(np.uint8)
    header = f"{'P2' if ascii else 'P5'}\n{mask.width} {mask.height}\n255\n".encode()
    if ascii:
        body = "\n".join(" ".join(str(v) for v in row) for row in values).encode() + b"\n"
    else:
        body = values.tobytes()
    Path(path).write_bytes(header + body)
