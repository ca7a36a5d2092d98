"""Grayscale image handling: I/O, neighborhoods, label masks, regions, patches."""

from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

# Sentinel label for border / unsegmented pixels, both in memory and in PGM masks.
UNLABELED = 255


class ImageFormatError(ValueError):
    """Unsupported or malformed image input."""


@dataclass
class Micrograph:
    """An 8-bit grayscale image held as float64 values in [0, 255]."""

    pixels: np.ndarray
    id: str = ""
    scale: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if self.pixels.min() < 0 or self.pixels.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class NeighborhoodSample:
    """One pixel's value plus its window of neighbors (center excluded)."""

    target: float
    neighbors: np.ndarray
    row: int
    col: int


class NeighborhoodSamples:
    """All interior-pixel neighborhood samples of a micrograph, in raster order.

    ``neighbors`` rows follow row-major order over the (2*l_s+1)^2 window with
    the center pixel skipped; this ordering is part of the contract and is
    relied on by the score computation.
    """

    def __init__(self, targets, neighbors, rows, cols, l_s):
        self.targets = targets          # (n,)
        self.neighbors = neighbors      # (n, (2*l_s+1)**2 - 1)
        self.rows = rows                # (n,)
        self.cols = cols
        self.l_s = l_s

    def __len__(self) -> int:
        return self.targets.shape[0]

    def sample(self, i: int) -> NeighborhoodSample:
        return NeighborhoodSample(
            target=float(self.targets[i]),
            neighbors=self.neighbors[i],
            row=int(self.rows[i]),
            col=int(self.cols[i]),
        )


@dataclass
class LabelMask:
    """Per-pixel integer class map; UNLABELED marks border/invalid pixels."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be 2-D")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        self.labels = self.labels.astype(np.int32)
        bad = (self.labels < 0) | ((self.labels > 254) & (self.labels != UNLABELED))
        if bad.any():
            raise ValueError("labels must be in [0, 254] or UNLABELED (255)")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_ids(self) -> list[int]:
        vals = np.unique(self.labels)
        return [int(v) for v in vals if v != UNLABELED]


@dataclass
class Region:
    """A 4-connected same-label component of a LabelMask."""

    label: int
    pixels: np.ndarray                  # (n, 2) int (row, col)
    bbox: tuple[int, int, int, int]     # top, left, bottom, right (inclusive)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Patch:
    """Square pixel window cut from a micrograph at a recorded offset."""

    pixels: np.ndarray
    row: int
    col: int
    region_label: int = -1
    source_id: str = ""


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _read_pgm_tokens(data: bytes, count: int):
    """Read `count` whitespace/comment-separated header tokens, return (tokens, offset)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ImageFormatError("truncated PGM header")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def _load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"P2" or data[:2] == b"P3" or data[:2] == b"P6":
        raise ImageFormatError(f"unsupported format {data[:2].decode('ascii', 'replace')}; "
                               "only binary grayscale P5 is accepted")
    if data[:2] != b"P5":
        raise ImageFormatError("not a PGM file")
    tokens, offset = _read_pgm_tokens(data[2:], 3)
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ImageFormatError(f"unsupported bit depth (maxval {maxval}); expected 255")
    n = width * height
    raster = data[2 + offset: 2 + offset + n]
    if len(raster) != n:
        raise ImageFormatError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64)


def _load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageFormatError(f"unsupported format: PNG mode {im.mode}; "
                                   "only 8-bit grayscale is accepted")
        return np.asarray(im, dtype=np.uint8).astype(np.float64)


def load_micrograph(path) -> Micrograph:
    """Load an 8-bit grayscale PGM (P5) or PNG file. Color inputs are rejected."""
    path = str(path)
    lower = path.lower()
    if lower.endswith(".pgm"):
        px = _load_pgm(path)
    elif lower.endswith(".png"):
        px = _load_png(path)
    else:
        raise ImageFormatError(f"unsupported file extension: {path}")
    name = path.replace("\\", "/").rsplit("/", 1)[-1]
    stem = name.rsplit(".", 1)[0]
    return Micrograph(pixels=px, id=stem)


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def save_micrograph(m: Micrograph, path) -> None:
    """Write as PGM (P5) or 8-bit grayscale PNG depending on extension."""
    path = str(path)
    u8 = _to_uint8(m.pixels)
    if path.lower().endswith(".pgm"):
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (m.width, m.height))
            f.write(u8.tobytes())
    elif path.lower().endswith(".png"):
        Image.fromarray(u8, mode="L").save(path, format="PNG")
    else:
        raise ImageFormatError(f"unsupported file extension: {path}")


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode a grayscale pixel grid as PNG bytes (used by the review service)."""
    buf = io.BytesIO()
    Image.fromarray(_to_uint8(pixels), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_mask(mask: LabelMask, path) -> None:
    """Write a LabelMask as PGM; labels 0..k-1, UNLABELED stored as 255."""
    if mask.labels.max(initial=0) > 254 and (mask.labels[mask.labels > 254] != UNLABELED).any():
        raise ValueError("mask labels above 254 are reserved")
    with open(str(path), "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (mask.width, mask.height))
        f.write(mask.labels.astype(np.uint8).tobytes())


def load_mask(path) -> LabelMask:
    px = _load_pgm(str(path))
    return LabelMask(labels=px.astype(np.int32))


# ---------------------------------------------------------------------------
# Neighborhoods
# ---------------------------------------------------------------------------

def extract_neighborhoods(m: Micrograph, l_s: int) -> NeighborhoodSamples:
    """Collect (target, neighbors) samples for every interior pixel.

    Interior means at distance >= l_s from all edges, so there are
    (height - 2*l_s) * (width - 2*l_s) samples, in raster order.
    """
    if l_s < 1:
        raise ValueError("l_s must be >= 1")
    h, w = m.height, m.width
    if h <= 2 * l_s or w <= 2 * l_s:
        raise ValueError(f"image {h}x{w} too small for neighborhood half-width {l_s}")
    win = 2 * l_s + 1
    ih, iw = h - 2 * l_s, w - 2 * l_s
    # windows[r, c, i, j] = pixels[r + i, c + j] for interior anchor (r, c)
    windows = np.lib.stride_tricks.sliding_window_view(m.pixels, (win, win))
    flat = windows.reshape(ih * iw, win * win)
    center = (win * win) // 2
    neighbors = np.delete(flat, center, axis=1)
    targets = flat[:, center].copy()
    rows, cols = np.divmod(np.arange(ih * iw), iw)
    return NeighborhoodSamples(
        targets=targets,
        neighbors=np.ascontiguousarray(neighbors),
        rows=rows + l_s,
        cols=cols + l_s,
        l_s=l_s,
    )


# ---------------------------------------------------------------------------
# Regions and patches
# ---------------------------------------------------------------------------

def connected_regions(mask: LabelMask, min_size: int = 1) -> list[Region]:
    """Maximal 4-connected same-label components with size >= min_size.

    UNLABELED pixels belong to no region. Result is sorted by size descending,
    ties broken by raster order of the first-visited pixel.
    """
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    labels = mask.labels
    h, w = labels.shape
    visited = labels == UNLABELED
    regions = []
    for r0 in range(h):
        for c0 in range(w):
            if visited[r0, c0]:
                continue
            lab = labels[r0, c0]
            queue = deque([(r0, c0)])
            visited[r0, c0] = True
            pix = []
            while queue:
                r, c = queue.popleft()
                pix.append((r, c))
                if r > 0 and not visited[r - 1, c] and labels[r - 1, c] == lab:
                    visited[r - 1, c] = True
                    queue.append((r - 1, c))
                if r + 1 < h and not visited[r + 1, c] and labels[r + 1, c] == lab:
                    visited[r + 1, c] = True
                    queue.append((r + 1, c))
                if c > 0 and not visited[r, c - 1] and labels[r, c - 1] == lab:
                    visited[r, c - 1] = True
                    queue.append((r, c - 1))
                if c + 1 < w and not visited[r, c + 1] and labels[r, c + 1] == lab:
                    visited[r, c + 1] = True
                    queue.append((r, c + 1))
            if len(pix) >= min_size:
                arr = np.array(pix, dtype=np.int32)
                bbox = (int(arr[:, 0].min()), int(arr[:, 1].min()),
                        int(arr[:, 0].max()), int(arr[:, 1].max()))
                regions.append(Region(label=int(lab), pixels=arr, bbox=bbox))
    regions.sort(key=lambda reg: -reg.size)
    return regions


def harvest_patches(m: Micrograph, region: Region, patch_size: int,
                    stride: int) -> list[Patch]:
    """Cut all patch_size x patch_size windows fully inside the region.

    Windows sit on the stride lattice anchored at the region's bounding-box
    top-left corner. An empty result is valid (region too thin).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if patch_size > min(m.height, m.width):
        raise ValueError("patch_size exceeds image dimensions")
    top, left, bottom, right = region.bbox
    inside = np.zeros((m.height, m.width), dtype=np.int64)
    inside[region.pixels[:, 0], region.pixels[:, 1]] = 1
    # integral image: window is fully inside iff its pixel count equals patch_size^2
    summed = inside.cumsum(axis=0).cumsum(axis=1)
    padded = np.zeros((m.height + 1, m.width + 1), dtype=np.int64)
    padded[1:, 1:] = summed
    full = patch_size * patch_size
    patches = []
    for r in range(top, bottom - patch_size + 2, stride):
        if r + patch_size > m.height:
            break
        for c in range(left, right - patch_size + 2, stride):
            if c + patch_size > m.width:
                break
            count = (padded[r + patch_size, c + patch_size]
                     - padded[r, c + patch_size]
                     - padded[r + patch_size, c]
                     + padded[r, c])
            if count == full:
                patches.append(Patch(
                    pixels=m.pixels[r:r + patch_size, c:c + patch_size].copy(),
                    row=r, col=c, region_label=region.label, source_id=m.id,
                ))
    return patches


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a 2-D grid to (out_h, out_w)."""
    in_h, in_w = pixels.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")

    def axis_coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=np.int64)
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(src.astype(np.int64), n_in - 2)
        return src - lo, lo

    fr, r0 = axis_coords(out_h, in_h)
    fc, c0 = axis_coords(out_w, in_w)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    tl = pixels[np.ix_(r0, c0)]
    tr = pixels[np.ix_(r0, c1)]
    bl = pixels[np.ix_(r1, c0)]
    br = pixels[np.ix_(r1, c1)]
    top = tl + (tr - tl) * fc[None, :]
    bot = bl + (br - bl) * fc[None, :]
    return top + (bot - top) * fr[:, None]


def rescale_micrograph(m: Micrograph, factor: float) -> Micrograph:
    """Bilinear rescale by `factor`; the physical scale field is updated inversely."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    out_h = max(1, int(round(m.height * factor)))
    out_w = max(1, int(round(m.width * factor)))
    px = np.clip(bilinear_resize(m.pixels, out_h, out_w), 0.0, 255.0)
    return Micrograph(pixels=px, id=m.id, scale=m.scale / factor)
