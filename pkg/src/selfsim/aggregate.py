"""Score-weighted sub-band averaging and its training objectives.

The estimator forms, per coefficient group g,

    rhat_g = (s_ref_g + sum_j m_jg * s_jg) / (1 + sum_j m_jg)

so a candidate with weight zero drops out exactly and an empty candidate set
returns the reference coefficients unchanged.  The full training loss is the
squared coefficient error of rhat against the clean reference; the pairwise
loss is its single-candidate form with the cross term dropped.  Gradients
with respect to the matching scores are closed-form (quotient rule) and are
verified against finite differences in the test suite.

Batch functions return unnormalized sums; training loops divide by
(references * 192) so the learning rate keeps its meaning across batch
sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imgio
from .transform import GROUPS, N_COEFFS, N_GROUPS, SubbandCoeffs, analyze_batch, synthesize_batch

_INDICATOR = None


def _group_indicator() -> np.ndarray:
    """(192, 30) 0/1 matrix summing per-coefficient values into groups."""
    global _INDICATOR
    if _INDICATOR is None:
        ind = np.zeros((N_COEFFS, N_GROUPS))
        ind[np.arange(N_COEFFS), GROUPS.coeff_group] = 1.0
        _INDICATOR = ind
    return _INDICATOR


@dataclass
class AggregationInput:
    """One reference, its candidate coefficient vectors, and their scores."""

    reference: SubbandCoeffs
    candidates: list
    scores: list

    def __post_init__(self):
        if len(self.candidates) != len(self.scores):
            raise ValueError(
                f"{len(self.candidates)} candidates but {len(self.scores)} score vectors"
            )
        for s in self.scores:
            s = np.asarray(s)
            if s.shape != (N_GROUPS,):
                raise ValueError(f"score vector must have shape ({N_GROUPS},), got {s.shape}")


@dataclass
class DenoisedPatch:
    """Aggregated coefficients and the pixel patch they synthesize to."""

    coeffs: SubbandCoeffs
    pixels: np.ndarray


def _stack_input(inp: AggregationInput):
    s_ref = inp.reference.flat[None]
    j = len(inp.candidates)
    if j == 0:
        cands = np.zeros((1, 0, N_COEFFS))
        scores = np.zeros((1, 0, N_GROUPS))
    else:
        cands = np.stack([c.flat for c in inp.candidates])[None]
        scores = np.stack([np.asarray(s, dtype=np.float64) for s in inp.scores])[None]
    return s_ref, cands, scores


def aggregate_core(s_ref: np.ndarray, cands: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Vectorized estimator: (r, 192), (r, j, 192), (r, j, 30) -> (r, 192)."""
    w = scores[..., GROUPS.coeff_group]
    num = s_ref + (w * cands).sum(axis=1)
    den = 1.0 + w.sum(axis=1)
    return num / den


def aggregate(inp: AggregationInput) -> DenoisedPatch:
    """Apply the weighted sub-band average to one reference patch."""
    s_ref, cands, scores = _stack_input(inp)
    rhat = aggregate_core(s_ref, cands, scores)[0]
    return DenoisedPatch(coeffs=SubbandCoeffs(rhat), pixels=synthesize_batch(rhat[None])[0])


def loss_full_core(r_ref: np.ndarray, s_ref: np.ndarray, cands: np.ndarray,
                   scores: np.ndarray, mask: np.ndarray | None = None):
    """Squared-error loss of the aggregate against clean coefficients.

    Returns (sum of squared errors over all references and coefficients,
    gradient with respect to every score).  ``mask`` marks real candidates;
    padded rows must carry zero scores and receive zero gradient.
    """
    ind = _group_indicator().astype(r_ref.dtype)
    w = scores[..., GROUPS.coeff_group]
    den_g = 1.0 + scores.sum(axis=1)
    den = den_g[:, GROUPS.coeff_group]
    rhat = (s_ref + (w * cands).sum(axis=1)) / den
    diff = rhat - r_ref
    loss = float((diff * diff).sum())
    t = diff / den
    u = (cands - rhat[:, None, :]) * t[:, None, :]
    grad = 2.0 * (u @ ind)
    if mask is not None:
        grad = grad * mask[..., None]
    return loss, grad


def loss_full(clean: SubbandCoeffs, inp: AggregationInput):
    """Loss and per-candidate score gradients for one reference patch."""
    s_ref, cands, scores = _stack_input(inp)
    loss, grad = loss_full_core(clean.flat[None], s_ref, cands, scores)
    return loss, [grad[0, j] for j in range(grad.shape[1])]


def loss_pair_core(r_i: np.ndarray, s_i: np.ndarray, s_j: np.ndarray, scores: np.ndarray):
    """Pairwise pre-training loss over (n, 192) batches with (n, 30) scores."""
    ind = _group_indicator().astype(r_i.dtype)
    di = s_i - r_i
    dj = s_j - r_i
    a = (di * di) @ ind
    b = (dj * dj) @ ind
    m = scores
    denom = (1.0 + m) ** 2
    loss = float(((a + m * m * b) / denom).sum())
    grad = 2.0 * (m * b - a) / ((1.0 + m) ** 3)
    return loss, grad


def loss_pair(clean: SubbandCoeffs, reference: SubbandCoeffs,
              candidate: SubbandCoeffs, scores: np.ndarray):
    """Pairwise loss for a single (reference, candidate) patch pair."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (N_GROUPS,):
        raise ValueError(f"score vector must have shape ({N_GROUPS},), got {scores.shape}")
    loss, grad = loss_pair_core(clean.flat[None], reference.flat[None],
                                candidate.flat[None], scores[None])
    return loss, grad[0]


def candidate_grid(positions: np.ndarray, height: int, width: int, radius: int):
    """Dense window candidates for a block of reference positions.

    Returns (cand_idx, mask): (r, j) arrays with j = (2*radius+1)**2.
    ``cand_idx`` indexes the stride-1 position grid; masked-out entries fall
    outside the (shifted, clipped) window or are the reference itself and
    must carry zero scores.
    """
    d = np.arange(2 * radius + 1)
    rr, cc = np.meshgrid(d, d, indexing="ij")
    offsets = np.stack([rr.ravel(), cc.ravel()], axis=1)
    start, end = imgio.window_bounds(positions, radius, height, width)
    cand_pos = start[:, None, :] + offsets[None, :, :]
    mask = np.all(cand_pos <= end[:, None, :], axis=-1)
    mask &= ~np.all(cand_pos == positions[:, None, :], axis=-1)
    max_c = width - imgio.PATCH
    cand_idx = cand_pos[..., 0] * (max_c + 1) + cand_pos[..., 1]
    cand_idx[~mask] = 0
    return cand_idx, mask


def denoise_stage1(noisy, params, config, scorer=None, chunk: int = 64) -> np.ndarray:
    """Full match-average pass over an image.

    Scores every stride-1 reference patch against all candidates in its
    clipped search window, averages the sub-band coefficients with those
    scores, and re-assembles overlapping patch estimates by per-pixel mean.

    ``scorer`` overrides the matching network: it is called as
    ``scorer(ref_positions, cand_positions, mask)`` with (r, 2), (r, j, 2)
    and (r, j) arrays and must return (r, j, 30) scores.  Used by tests to
    force hand-set weights; the default runs ``params`` through the matcher.
    """
    from . import matcher as matcher_mod

    img = imgio.as_image(noisy)
    h, w = img.shape[:2]
    if h < imgio.CONTEXT or w < imgio.CONTEXT:
        raise ValueError(f"image {h}x{w} is smaller than one {imgio.CONTEXT}x{imgio.CONTEXT} context")
    radius = config.window_radius
    dtype = np.dtype(config.dtype)

    positions = imgio.patch_positions(h, w)
    coeffs = analyze_batch(imgio.extract_patches(img, positions)).astype(dtype)

    feats = None
    net = None
    if scorer is None:
        net = matcher_mod.Matcher(config.matcher_arch)
        feats = net.compute_features(img, positions, params)
        u, v, b1 = net.pair_precompute(feats, params)

    acc = imgio.PatchAccumulator(h, w)
    n = positions.shape[0]
    for start in range(0, n, chunk):
        pos_block = positions[start : start + chunk]
        cand_idx, mask = candidate_grid(pos_block, h, w, radius)
        if scorer is None:
            ref_rows, cand_rows = np.nonzero(mask)
            flat_scores = net.score_from_precomputed(
                u, v, b1, start + ref_rows, cand_idx[ref_rows, cand_rows], params
            )
            scores = np.zeros(cand_idx.shape + (N_GROUPS,), dtype=dtype)
            scores[ref_rows, cand_rows] = flat_scores
        else:
            cand_pos = np.stack([cand_idx // (w - imgio.PATCH + 1),
                                 cand_idx % (w - imgio.PATCH + 1)], axis=-1)
            scores = np.asarray(scorer(pos_block, cand_pos, mask), dtype=dtype)
            scores = scores * mask[..., None]
        rhat = aggregate_core(coeffs[start : start + chunk], coeffs[cand_idx], scores)
        acc.add_batch(pos_block, synthesize_batch(rhat.astype(np.float64)))
    return acc.result()
