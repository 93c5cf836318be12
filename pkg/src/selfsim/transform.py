"""Orthonormal patch analysis: color de-correlation + 3-level 2-D Haar.

An 8x8x3 patch is mapped to 192 coefficients: a 3x3 orthonormal color
transform applied per pixel, followed by a per-channel 3-level orthonormal
2-D Haar wavelet (taps [1, 1]/sqrt(2) and [1, -1]/sqrt(2), recursing on the
approximation band).  The composition is orthonormal, so the inverse is the
transpose and energy is preserved exactly.

Coefficients are partitioned into 30 labeled groups.  Within each channel
there are nine detail groups, one per (scale, orientation): scales 3 (coarsest,
1 coefficient), 2 (4 coefficients) and 1 (finest, 16 coefficients); and
orientations "h" (detail along the row axis, responds to horizontal edges),
"v" (detail along the column axis) and "d" (detail along both).  The three
per-channel scaling coefficients form the last three groups.

Canonical group order (part of the checkpoint/score-vector contract):
channel-major, scale coarse to fine, orientation h/v/d within a scale, and
the three scaling groups last:

    g = channel * 9 + scale_index * 3 + orientation_index   for g < 27
    g = 27 + channel                                        for scaling

The flat 192-coefficient layout concatenates the groups in an order that
keeps each group contiguous: per channel [h3, v3, d3, h2, v2, d2, h1, v1,
d1] (63 values, each band flattened row-major), then the three scaling
coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_GROUPS = 30
N_COEFFS = 192
_SQRT2 = np.sqrt(2.0)

ORIENTATIONS = ("h", "v", "d")
SCALES = (3, 2, 1)  # coarse to fine
_SCALE_SIZES = {3: 1, 2: 4, 1: 16}


def default_color_matrix() -> np.ndarray:
    """Orthonormal opponent color transform (luminance first)."""
    return np.array(
        [
            [1.0, 1.0, 1.0] / np.sqrt(3.0),
            [1.0, 0.0, -1.0] / np.sqrt(2.0),
            [1.0, -2.0, 1.0] / np.sqrt(6.0),
        ]
    )


@dataclass(frozen=True)
class TransformSpec:
    """Parameters of the patch analysis operator."""

    color_matrix: np.ndarray = field(default_factory=default_color_matrix)
    wavelet: str = "haar-orthonormal"
    levels: int = 3
    patch_size: int = 8

    def __post_init__(self):
        m = np.asarray(self.color_matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"color matrix must be 3x3, got {m.shape}")
        if not np.allclose(m @ m.T, np.eye(3), atol=1e-12):
            raise ValueError("color matrix is not orthonormal")
        if self.wavelet != "haar-orthonormal":
            raise ValueError(f"unsupported wavelet {self.wavelet!r}")
        if self.patch_size != 8 or self.levels != 3:
            raise ValueError("only 8x8 patches with 3 levels are supported")
        object.__setattr__(self, "color_matrix", m)


@dataclass(frozen=True)
class GroupLayout:
    """Index bookkeeping for the 30 coefficient groups in the flat layout."""

    starts: np.ndarray
    sizes: np.ndarray
    labels: tuple
    coeff_group: np.ndarray  # (192,) coefficient index -> group index

    def group_slice(self, g: int) -> slice:
        return slice(int(self.starts[g]), int(self.starts[g] + self.sizes[g]))

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Broadcast (..., 30) per-group values to (..., 192) per-coefficient."""
        return np.asarray(per_group)[..., self.coeff_group]


def _build_layout() -> GroupLayout:
    starts = np.zeros(N_GROUPS, dtype=np.int64)
    sizes = np.zeros(N_GROUPS, dtype=np.int64)
    labels = []
    within = {  # offset of each (scale, orientation) band inside a channel's 63
        (3, "h"): 0, (3, "v"): 1, (3, "d"): 2,
        (2, "h"): 3, (2, "v"): 7, (2, "d"): 11,
        (1, "h"): 15, (1, "v"): 31, (1, "d"): 47,
    }
    for ch in range(3):
        for si, scale in enumerate(SCALES):
            for oi, orient in enumerate(ORIENTATIONS):
                g = ch * 9 + si * 3 + oi
                starts[g] = ch * 63 + within[(scale, orient)]
                sizes[g] = _SCALE_SIZES[scale]
                labels.append((ch, scale, orient))
    for ch in range(3):
        g = 27 + ch
        starts[g] = 189 + ch
        sizes[g] = 1
        labels.append((ch, 0, "scaling"))
    coeff_group = np.empty(N_COEFFS, dtype=np.int64)
    for g in range(N_GROUPS):
        coeff_group[starts[g] : starts[g] + sizes[g]] = g
    return GroupLayout(starts, sizes, tuple(labels), coeff_group)


GROUPS = _build_layout()


def _haar_split(x: np.ndarray, axis: int):
    even = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    odd = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (even + odd) / _SQRT2, (even - odd) / _SQRT2


def _decompose_channel(plane: np.ndarray) -> np.ndarray:
    """8x8 plane -> 64 coefficients in per-channel order [bands..., scaling]."""
    bands = {}
    cur = plane
    for level in (1, 2, 3):
        approx0, detail0 = _haar_split(cur, axis=0)
        aa, av = _haar_split(approx0, axis=1)
        dh, dd = _haar_split(detail0, axis=1)
        bands[(level, "h")] = dh
        bands[(level, "v")] = av
        bands[(level, "d")] = dd
        cur = aa
    out = np.empty(64, dtype=plane.dtype)
    pos = 0
    for scale in SCALES:
        for orient in ORIENTATIONS:
            band = bands[(scale, orient)].ravel()
            out[pos : pos + band.size] = band
            pos += band.size
    out[63] = cur[0, 0]
    return out


def _build_haar_matrix() -> np.ndarray:
    """64x64 orthonormal analysis matrix in the per-channel coefficient order."""
    w = np.empty((64, 64), dtype=np.float64)
    for k in range(64):
        impulse = np.zeros(64)
        impulse[k] = 1.0
        w[:, k] = _decompose_channel(impulse.reshape(8, 8))
    return w


HAAR_MATRIX = _build_haar_matrix()


@dataclass
class SubbandCoeffs:
    """The 192 transform coefficients of one patch, grouped per GROUPS."""

    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (N_COEFFS,):
            raise ValueError(f"expected ({N_COEFFS},) coefficients, got {self.flat.shape}")

    def group(self, g: int) -> np.ndarray:
        return self.flat[GROUPS.group_slice(g)]

    @property
    def groups(self) -> list[np.ndarray]:
        return [self.group(g) for g in range(N_GROUPS)]


def analyze_batch(patches: np.ndarray, spec: TransformSpec | None = None) -> np.ndarray:
    """Transform (n, 8, 8, 3) patches into (n, 192) coefficient vectors."""
    spec = spec or TransformSpec()
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 4 or p.shape[1:] != (8, 8, 3):
        raise ValueError(f"expected (n, 8, 8, 3) patches, got {p.shape}")
    n = p.shape[0]
    pixels = p.reshape(n, 64, 3) @ spec.color_matrix.T
    per_chan = pixels.transpose(0, 2, 1).reshape(n * 3, 64) @ HAAR_MATRIX.T
    z = per_chan.reshape(n, 3, 64)
    return np.concatenate([z[:, :, :63].reshape(n, 189), z[:, :, 63]], axis=1)


def synthesize_batch(coeffs: np.ndarray, spec: TransformSpec | None = None) -> np.ndarray:
    """Exact inverse of :func:`analyze_batch`: (n, 192) -> (n, 8, 8, 3)."""
    spec = spec or TransformSpec()
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != N_COEFFS:
        raise ValueError(f"expected (n, {N_COEFFS}) coefficients, got {c.shape}")
    n = c.shape[0]
    z = np.empty((n, 3, 64), dtype=np.float64)
    z[:, :, :63] = c[:, :189].reshape(n, 3, 63)
    z[:, :, 63] = c[:, 189:]
    per_chan = z.reshape(n * 3, 64) @ HAAR_MATRIX
    pixels = per_chan.reshape(n, 3, 64).transpose(0, 2, 1) @ spec.color_matrix
    return pixels.reshape(n, 8, 8, 3)


def analyze(patch: np.ndarray, spec: TransformSpec | None = None) -> SubbandCoeffs:
    """Transform one 8x8x3 patch into its 30 coefficient groups."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (8, 8, 3):
        raise ValueError(f"expected (8, 8, 3) patch, got {patch.shape}")
    return SubbandCoeffs(analyze_batch(patch[None], spec)[0])


def synthesize(coeffs: SubbandCoeffs | np.ndarray, spec: TransformSpec | None = None) -> np.ndarray:
    """Reconstruct the 8x8x3 patch from its coefficients."""
    flat = coeffs.flat if isinstance(coeffs, SubbandCoeffs) else np.asarray(coeffs)
    if flat.shape != (N_COEFFS,):
        raise ValueError(f"expected ({N_COEFFS},) coefficients, got {flat.shape}")
    return synthesize_batch(flat[None], spec)[0]
