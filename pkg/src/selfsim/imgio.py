"""Image representation, file I/O, noise synthesis, and patch bookkeeping.

Images are numpy arrays of shape (height, width, 3) holding floating-point
intensities in gray levels on the [0, 255] scale, row-major with interleaved
channels.  Values are not quantized or clipped in memory; clipping and
rounding happen only when a file is written.  Noisy images routinely carry
values outside [0, 255].

Supported file formats are 8-bit RGB PNG and binary PPM (P6, maxval 255).
Grayscale PNGs are replicated to three channels on read.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PATCH = 8
CONTEXT = 16
CONTEXT_PAD = (CONTEXT - PATCH) // 2


class ImageIOError(Exception):
    """Raised when an image file cannot be read or written."""


@dataclass(frozen=True)
class NoiseModel:
    """Additive i.i.d. Gaussian noise with standard deviation in gray levels."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class PatchRef:
    """Top-left corner and side length of a square patch."""

    row: int
    col: int
    size: int = PATCH


@dataclass
class SearchWindow:
    """A reference patch and the candidate patch positions around it.

    Members are stored as an (n, 2) int array of top-left corners; the center
    itself is excluded.  Windows near the image border are clipped, so the
    member count can be smaller than (2*radius+1)**2 - 1.
    """

    center: PatchRef
    radius: int
    members: np.ndarray = field(repr=False)


def as_image(data, height=None, width=None) -> np.ndarray:
    """Validate and return an (H, W, 3) float array."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def read_image(path) -> np.ndarray:
    """Read a PNG or binary PPM file into an (H, W, 3) float array in [0, 255].

    Grayscale inputs are replicated to three channels.  Anything that is not
    an 8-bit single- or three-channel raster raises :class:`ImageIOError`.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ImageIOError(f"no such image file: {path}")
    ext = os.path.splitext(path)[1].lower()
    if ext in (".ppm", ".pnm"):
        return _read_ppm(path)
    if ext == ".png":
        return _read_png(path)
    raise ImageIOError(f"unsupported image extension {ext!r}: {path}")


def write_image(image, path) -> None:
    """Write an image as PNG or P6 PPM, chosen by extension.

    Values are clamped to [0, 255] and rounded half-up to 8 bits.
    """
    img = as_image(image)
    data = np.floor(np.clip(img, 0.0, 255.0) + 0.5)
    data = np.clip(data, 0, 255).astype(np.uint8)
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext in (".ppm", ".pnm"):
            _write_ppm(data, path)
        elif ext == ".png":
            _write_png(data, path)
        else:
            raise ImageIOError(f"unsupported image extension {ext!r}: {path}")
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    # header = magic, width, height, maxval, separated by whitespace/comments
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"truncated PPM header: {path}")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ImageIOError(f"not a binary P6 PPM: {path}")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ImageIOError(f"unsupported PPM maxval {maxval} (want 255): {path}")
    need = width * height * 3
    body = raw[pos : pos + need]
    if len(body) != need:
        raise ImageIOError(f"truncated PPM pixel data: {path}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return img.astype(np.float64)


def _write_ppm(data: np.ndarray, path) -> None:
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            elif im.mode == "RGB":
                arr = np.asarray(im, dtype=np.uint8)
            else:
                raise ImageIOError(
                    f"unsupported PNG mode {im.mode!r} (want 8-bit L or RGB): {path}"
                )
    except ImageIOError:
        raise
    except Exception as exc:
        raise ImageIOError(f"cannot read PNG {path}: {exc}") from exc
    return arr.astype(np.float64)


def _write_png(data: np.ndarray, path) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def add_noise(image, noise: NoiseModel) -> np.ndarray:
    """Add i.i.d. Gaussian noise, deterministic for a fixed seed, unclipped."""
    img = as_image(image)
    if noise.sigma == 0:
        return img.copy()
    rng = np.random.default_rng(noise.seed)
    return img + rng.normal(0.0, noise.sigma, size=img.shape)


def reflect_pad(image, pad: int) -> np.ndarray:
    """Mirror-pad the spatial axes, repeating the edge sample.

    A border column [a, b, c, ...] padded by 2 becomes [b, a, a, b, c, ...],
    so padded row 0 of a pad-4 image equals original row 3.
    """
    img = np.asarray(image)
    return np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="symmetric")


def extract_patch(image, ref: PatchRef) -> np.ndarray:
    """Extract the square patch at ``ref``.

    Size-8 patches are cropped from the image directly.  Size-16 contexts are
    cropped from the reflect-padded image so that the context is centered on
    its 8x8 patch even at the border; ``ref`` still addresses the 8x8 patch
    position, i.e. the context top-left is ``(ref.row - 4, ref.col - 4)`` in
    unpadded coordinates.
    """
    img = as_image(image)
    h, w = img.shape[:2]
    if ref.size == CONTEXT:
        if not (0 <= ref.row <= h - PATCH and 0 <= ref.col <= w - PATCH):
            raise ValueError(f"context ref out of bounds: {ref} for {h}x{w}")
        padded = reflect_pad(img, CONTEXT_PAD)
        return padded[ref.row : ref.row + CONTEXT, ref.col : ref.col + CONTEXT].copy()
    if not (0 <= ref.row <= h - ref.size and 0 <= ref.col <= w - ref.size):
        raise ValueError(f"patch ref out of bounds: {ref} for {h}x{w}")
    return img[ref.row : ref.row + ref.size, ref.col : ref.col + ref.size].copy()


def patch_positions(height: int, width: int, stride: int = 1, size: int = PATCH) -> np.ndarray:
    """All valid top-left corners on a stride grid, as an (n, 2) int array."""
    rows = np.arange(0, height - size + 1, stride)
    cols = np.arange(0, width - size + 1, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64)


def extract_patches(image, positions, size: int = PATCH) -> np.ndarray:
    """Gather patches at the given (n, 2) top-left corners into (n, size, size, 3).

    For ``size == 16`` the corners address 8x8 patches and the crops come from
    the reflect-padded image, matching :func:`extract_patch`.
    """
    img = as_image(image)
    positions = np.asarray(positions)
    if size == CONTEXT:
        img = reflect_pad(img, CONTEXT_PAD)
    windows = sliding_window_view(img, (size, size), axis=(0, 1))
    return np.ascontiguousarray(
        windows[positions[:, 0], positions[:, 1]].transpose(0, 2, 3, 1)
    )


def window_bounds(centers: np.ndarray, radius: int, height: int, width: int):
    """Inclusive (start, end) corners of each search window's position range.

    The window is the (2*radius+1)-wide block of candidate top-left positions
    centered on the reference; near the border it shifts inward to keep its
    extent, and when the position grid is narrower than the window it covers
    every valid position.  This keeps candidate counts constant away from
    tiny images and never fabricates out-of-bounds candidates.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    limits = np.array([height - PATCH, width - PATCH], dtype=np.int64)
    start = np.clip(centers - radius, 0, np.maximum(limits - 2 * radius, 0))
    end = np.minimum(start + 2 * radius, limits)
    return start, end


def window_members(center_row, center_col, radius, height, width) -> np.ndarray:
    """Candidate 8x8 top-left corners in the shifted, clipped search window."""
    (r0, c0), (r1, c1) = (arr[0] for arr in window_bounds(
        [[center_row, center_col]], radius, height, width))
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    members = np.stack([rr.ravel(), cc.ravel()], axis=1)
    keep = ~((members[:, 0] == center_row) & (members[:, 1] == center_col))
    return members[keep].astype(np.int64)


def enumerate_windows(image, radius: int, stride: int = 1) -> list[SearchWindow]:
    """One clipped search window per reference patch position on the stride grid."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    img = as_image(image)
    h, w = img.shape[:2]
    windows = []
    for r, c in patch_positions(h, w, stride):
        windows.append(
            SearchWindow(
                center=PatchRef(int(r), int(c)),
                radius=radius,
                members=window_members(int(r), int(c), radius, h, w),
            )
        )
    return windows


def assemble_image(patch_estimates, height: int, width: int) -> np.ndarray:
    """Average overlapping patch estimates into a full image.

    ``patch_estimates`` is an iterable of (PatchRef | (row, col), patch) pairs
    where each patch is (8, 8, 3).  Every output pixel must be covered by at
    least one estimate.
    """
    sums = np.zeros((height, width, 3), dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.int64)
    for ref, patch in patch_estimates:
        r, c = (ref.row, ref.col) if isinstance(ref, PatchRef) else (int(ref[0]), int(ref[1]))
        p = np.asarray(patch, dtype=np.float64)
        if p.shape != (PATCH, PATCH, 3):
            raise ValueError(f"patch estimate at ({r},{c}) has shape {p.shape}")
        sums[r : r + PATCH, c : c + PATCH] += p
        counts[r : r + PATCH, c : c + PATCH] += 1
    if np.any(counts == 0):
        n = int(np.sum(counts == 0))
        raise ValueError(f"{n} output pixels not covered by any patch estimate")
    return sums / counts[:, :, None]


class PatchAccumulator:
    """Streaming per-pixel mean of overlapping 8x8 patch estimates.

    Equivalent to :func:`assemble_image` but accepts batches, so the denoise
    pipeline never materializes the full estimate list.
    """

    def __init__(self, height: int, width: int):
        self.sums = np.zeros((height, width, 3), dtype=np.float64)
        self.counts = np.zeros((height, width), dtype=np.int64)

    def add_batch(self, positions: np.ndarray, patches: np.ndarray) -> None:
        """Accumulate (n, 8, 8, 3) patches at (n, 2) top-left corners."""
        positions = np.asarray(positions)
        patches = np.asarray(patches, dtype=np.float64)
        h, w = self.counts.shape
        lin = positions[:, 0] * w + positions[:, 1]
        flat_sums = self.sums.reshape(-1, 3)
        flat_counts = self.counts.reshape(-1)
        for dr in range(PATCH):
            for dc in range(PATCH):
                idx = lin + dr * w + dc
                np.add.at(flat_sums, idx, patches[:, dr, dc])
                np.add.at(flat_counts, idx, 1)

    def result(self) -> np.ndarray:
        if np.any(self.counts == 0):
            n = int(np.sum(self.counts == 0))
            raise ValueError(f"{n} output pixels not covered by any patch estimate")
        return self.sums / self.counts[:, :, None]
