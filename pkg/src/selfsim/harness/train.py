"""Training loops: pairwise pre-training, dense fine-tuning, refinement.

Pre-training pairs every non-overlapping 8x8 patch of each batch image with
a within-image random shuffle and optimizes the pairwise loss for both
orderings of every pair.  Fine-tuning samples reference patches uniformly
over images then over positions, scores each against all candidates in its
clipped training window, and optimizes the full aggregation loss; the
learning rate drops by 10^-0.5 at the configured milestones.  Both losses
are normalized by (references x 192 coefficients) so batch size does not
change the learning-rate meaning.

The refiner trains afterwards on (clean, noisy, stage-1) triples produced by
the frozen matcher.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import imgio
from ..aggregate import denoise_stage1, loss_full_core, loss_pair_core
from ..matcher import Matcher
from ..nncore import ParamStore, adam_step
from ..refine import Refiner
from ..transform import N_GROUPS, analyze_batch
from .config import DenoiseConfig, TrainSchedule
from .metrics import MetricsReport, StageTimer, evaluate


@dataclass
class TrainLog:
    """Per-step loss traces, keyed by phase."""

    phases: dict = field(default_factory=dict)

    def record(self, phase: str, step: int, loss: float, lr: float) -> None:
        self.phases.setdefault(phase, []).append((step, float(loss), float(lr)))

    def losses(self, phase: str) -> np.ndarray:
        return np.array([entry[1] for entry in self.phases.get(phase, [])])

    def to_csv(self) -> str:
        lines = ["phase,step,loss,lr"]
        for phase, entries in self.phases.items():
            for step, loss, lr in entries:
                lines.append(f"{phase},{step},{loss:.8g},{lr:.8g}")
        return "\n".join(lines) + "\n"


def _rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream)))


def _add_noise_stream(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return image.copy()
    return image + rng.normal(0.0, sigma, size=image.shape)


def _window_batch(h: int, w: int, refs: np.ndarray, radius: int):
    """Local position indexing for a block of references and their windows.

    Returns (unique positions (p, 2), ref_local (r,), cand_local (r, j),
    mask (r, j)) where local indices address the unique-position array and
    masked-out entries fall outside the shifted window or on the reference.
    """
    d = np.arange(2 * radius + 1)
    rr, cc = np.meshgrid(d, d, indexing="ij")
    offs = np.stack([rr.ravel(), cc.ravel()], axis=1)
    start, end = imgio.window_bounds(refs, radius, h, w)
    cand_pos = start[:, None, :] + offs[None, :, :]
    mask = np.all(cand_pos <= end[:, None, :], axis=-1)
    mask &= ~np.all(cand_pos == refs[:, None, :], axis=-1)
    stacked = np.concatenate([refs, cand_pos[mask]], axis=0)
    uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
    ref_local = inverse[: refs.shape[0]]
    cand_local = np.zeros(mask.shape, dtype=np.int64)
    cand_local[mask] = inverse[refs.shape[0]:]
    return uniq, ref_local, cand_local, mask


def pretrain_match(corpus_train, config: DenoiseConfig, schedule: TrainSchedule,
                   params: ParamStore, log: TrainLog | None = None,
                   progress=None) -> ParamStore:
    """Pairwise pre-training of the matcher (constant learning rate)."""
    matcher = Matcher(config.matcher_arch)
    rng = _rng_for(config.seed, 1)
    dtype = params.dtype
    n_img = min(len(corpus_train), schedule.pretrain_images)
    if n_img < 1:
        raise ValueError("pre-training needs at least one corpus image")
    for step in range(schedule.pretrain_steps):
        image_ids = rng.choice(len(corpus_train), size=n_img, replace=False)
        grids = []
        for i in image_ids:
            h, w = corpus_train[i].shape[:2]
            grids.append(imgio.patch_positions(h, w, stride=imgio.PATCH))
        total_pairs = sum(2 * g.shape[0] for g in grids)
        scale = 1.0 / (total_pairs * 192.0)
        loss_sum = 0.0
        for i, pos in zip(image_ids, grids):
            clean = corpus_train[i]
            sigma = config.sigma_mode.draw(rng)
            noisy = _add_noise_stream(clean, sigma, rng)
            n = pos.shape[0]
            r = analyze_batch(imgio.extract_patches(clean, pos)).astype(dtype)
            s = analyze_batch(imgio.extract_patches(noisy, pos)).astype(dtype)
            contexts = imgio.extract_patches(noisy, pos, size=imgio.CONTEXT)
            feats, fctx = matcher.features_forward(contexts, params, keep_ctx=True)
            perm = rng.permutation(n)
            idx_a = np.concatenate([np.arange(n), perm])
            idx_b = np.concatenate([perm, np.arange(n)])
            scores, pctx = matcher.pairs_forward(feats, idx_a, idx_b, params)
            lsum, grad = loss_pair_core(r[idx_a], s[idx_a], s[idx_b], scores)
            loss_sum += lsum * scale
            gfeats = matcher.pairs_backward((grad * scale).astype(dtype), pctx, params)
            matcher.features_backward(gfeats, fctx, params)
        adam_step(params, schedule.lr)
        if log is not None:
            log.record("pretrain", step, loss_sum, schedule.lr)
        if progress is not None:
            progress("pretrain", step, schedule.pretrain_steps, loss_sum)
    return params


def finetune_match(corpus_train, config: DenoiseConfig, schedule: TrainSchedule,
                   params: ParamStore, log: TrainLog | None = None,
                   progress=None) -> ParamStore:
    """Dense-window fine-tuning of the matcher with lr drops at milestones.

    References and candidates are drawn from two independent noise
    realizations of the same clean image.  With a desk-scale training window
    every candidate overlaps its 8x8 reference, so a single realization
    shares noise samples between the two sides; averaging then provably
    cannot attenuate the shared component and the optimizer drives every
    score to zero.  Decoupling the realizations restores the estimator's
    premise (averaging independent noisy observations of recurring content).
    """
    matcher = Matcher(config.matcher_arch)
    rng = _rng_for(config.seed, 2)
    dtype = params.dtype
    radius = schedule.train_radius
    n_refs = schedule.finetune_refs
    n_img = min(len(corpus_train), max(1, min(4, n_refs)))
    for step in range(schedule.finetune_steps):
        lr = schedule.lr_at(step, schedule.finetune_steps)
        image_ids = rng.choice(len(corpus_train), size=n_img, replace=False)
        per_img = [n_refs // n_img + (1 if k < n_refs % n_img else 0) for k in range(n_img)]
        scale = 1.0 / (n_refs * 192.0)
        loss_sum = 0.0
        for i, count in zip(image_ids, per_img):
            if count == 0:
                continue
            clean = corpus_train[i]
            h, w = clean.shape[:2]
            sigma = config.sigma_mode.draw(rng)
            noisy_ref = _add_noise_stream(clean, sigma, rng)
            noisy_cand = _add_noise_stream(clean, sigma, rng)
            grid_h, grid_w = h - imgio.PATCH + 1, w - imgio.PATCH + 1
            flat = rng.choice(grid_h * grid_w, size=min(count, grid_h * grid_w), replace=False)
            refs = np.stack([flat // grid_w, flat % grid_w], axis=1)
            uniq, ref_local, cand_local, mask = _window_batch(h, w, refs, radius)
            s_ref = analyze_batch(imgio.extract_patches(noisy_ref, refs)).astype(dtype)
            s_cand = analyze_batch(imgio.extract_patches(noisy_cand, uniq)).astype(dtype)
            r_ref = analyze_batch(imgio.extract_patches(clean, refs)).astype(dtype)
            ref_ctx = imgio.extract_patches(noisy_ref, refs, size=imgio.CONTEXT)
            cand_ctx = imgio.extract_patches(noisy_cand, uniq, size=imgio.CONTEXT)
            feats, fctx = matcher.features_forward(
                np.concatenate([ref_ctx, cand_ctx], axis=0), params, keep_ctx=True)
            vr, vc = np.nonzero(mask)
            n_ref_rows = refs.shape[0]
            scores_flat, pctx = matcher.pairs_forward(
                feats, vr, n_ref_rows + cand_local[vr, vc], params)
            scores = np.zeros(mask.shape + (N_GROUPS,), dtype=dtype)
            scores[vr, vc] = scores_flat
            lsum, grad = loss_full_core(r_ref, s_ref, s_cand[cand_local], scores, mask)
            loss_sum += lsum * scale
            gfeats = matcher.pairs_backward((grad[vr, vc] * scale).astype(dtype), pctx, params)
            matcher.features_backward(gfeats, fctx, params)
        adam_step(params, lr)
        if log is not None:
            log.record("finetune", step, loss_sum, lr)
        if progress is not None:
            progress("finetune", step, schedule.finetune_steps, loss_sum)
    return params


def train_matcher(corpus_train, config: DenoiseConfig, schedule: TrainSchedule,
                  log: TrainLog | None = None, progress=None,
                  params: ParamStore | None = None) -> ParamStore:
    """Initialize, pre-train, and fine-tune the matching network."""
    if params is None:
        params = Matcher(config.matcher_arch).init_params(config.seed, np.dtype(config.dtype))
    pretrain_match(corpus_train, config, schedule, params, log=log, progress=progress)
    finetune_match(corpus_train, config, schedule, params, log=log, progress=progress)
    return params


def make_refine_dataset(images, matcher_params: ParamStore, config: DenoiseConfig,
                        limit: int | None = None, progress=None):
    """(clean, noisy, stage-1) triples from a frozen matcher checkpoint."""
    rng = _rng_for(config.seed, 3)
    triples = []
    chosen = images if limit is None else images[:limit]
    for k, clean in enumerate(chosen):
        sigma = config.sigma_mode.draw(rng)
        noisy = _add_noise_stream(clean, sigma, rng)
        stage1 = denoise_stage1(noisy, matcher_params, config)
        triples.append((clean, noisy, stage1))
        if progress is not None:
            progress("refine-data", k, len(chosen), sigma)
    return triples


def train_refine(triples, config: DenoiseConfig, schedule: TrainSchedule,
                 params: ParamStore | None = None, log: TrainLog | None = None,
                 progress=None) -> ParamStore:
    """Adam descent on the refiner's mean squared error against clean crops."""
    if not triples:
        raise ValueError("refine training needs a non-empty dataset")
    refiner = Refiner(config.refine_arch)
    if params is None:
        params = refiner.init_params(config.seed, np.dtype(config.dtype))
    rng = _rng_for(config.seed, 4)
    crop = schedule.refine_crop
    for step in range(schedule.refine_steps):
        lr = schedule.lr_at(step, schedule.refine_steps)
        ids = rng.integers(0, len(triples), size=schedule.refine_batch)
        clean_b, noisy_b, stage1_b = [], [], []
        for i in ids:
            clean, noisy, stage1 = triples[i]
            h, w = clean.shape[:2]
            c = min(crop, h, w)
            r0 = int(rng.integers(0, h - c + 1))
            c0 = int(rng.integers(0, w - c + 1))
            clean_b.append(clean[r0 : r0 + c, c0 : c0 + c])
            noisy_b.append(noisy[r0 : r0 + c, c0 : c0 + c])
            stage1_b.append(stage1[r0 : r0 + c, c0 : c0 + c])
        clean_b = np.stack(clean_b)
        out, ctxs = refiner.forward_batch(np.stack(noisy_b), np.stack(stage1_b), params, keep_ctx=True)
        diff = out - clean_b
        loss = float(np.mean(diff * diff))
        refiner.backward_batch(2.0 * diff / diff.size, ctxs, params)
        adam_step(params, lr)
        if log is not None:
            log.record("refine", step, loss, lr)
        if progress is not None:
            progress("refine", step, schedule.refine_steps, loss)
    return params


def denoise_images(noisy_list, matcher_params: ParamStore, config: DenoiseConfig,
                   refine_params: ParamStore | None = None, timer: StageTimer | None = None):
    """Stage-1 (and optionally refined) estimates for a list of noisy images."""
    refiner = Refiner(config.refine_arch) if refine_params is not None else None
    outputs = []
    timer = timer or StageTimer()
    for noisy in noisy_list:
        with timer.timed("match-average"):
            out = denoise_stage1(noisy, matcher_params, config)
        if config.stage == "full" and refiner is not None:
            with timer.timed("refine"):
                out = refiner.forward_batch(np.asarray(noisy)[None], out[None], refine_params)[0]
        outputs.append(out)
    return outputs


def noisy_eval_set(clean_list, sigma: float, seed: int):
    """Deterministic noisy copies of an evaluation set at one noise level."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 9)))
    return [_add_noise_stream(img, sigma, rng) for img in clean_list]


def eval_stage1(clean_list, matcher_params: ParamStore, config: DenoiseConfig,
                sigma: float, noise_seed: int = 0,
                refine_params: ParamStore | None = None) -> MetricsReport:
    """Denoise a clean evaluation set at a fixed sigma and report metrics."""
    noisy = noisy_eval_set(clean_list, sigma, noise_seed)
    timer = StageTimer()
    outputs = denoise_images(noisy, matcher_params, config, refine_params, timer)
    return evaluate(clean_list, noisy, outputs, timings=timer.totals)


def ablate_window(matcher_params: ParamStore, clean_list, noisy_list,
                  config: DenoiseConfig, radii) -> list[dict]:
    """Stage-1 PSNR and wall-clock per search-window radius."""
    from dataclasses import replace

    rows = []
    for radius in radii:
        cfg = replace(config, window_radius=int(radius), stage="match")
        t0 = time.perf_counter()
        outputs = [denoise_stage1(noisy, matcher_params, cfg) for noisy in noisy_list]
        seconds = time.perf_counter() - t0
        report = evaluate(clean_list, noisy_list, outputs)
        rows.append({
            "radius": int(radius),
            "mean_psnr": report.mean_psnr,
            "mean_ssim": report.mean_ssim,
            "seconds": seconds,
        })
    return rows
