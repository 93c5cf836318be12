"""Procedural training corpus with controllable self-similarity.

Images are mosaics of one to four rectangular regions.  Each region carries
its own periodic pattern: "tiled-texture" regions repeat a random 9-16 px
tile, "repeated-stripe" regions carry a periodic 1-D profile along one of
four directions with period 5-13 px.  Within a region, patches recur
densely; across regions (and across images) patches are clearly distinct,
which keeps the shuffled pre-training pairs balanced between clear matches
and clear non-matches.  A low-amplitude smooth gradient overlays the whole
image, so scaling coefficients differ slightly between repeats while detail
bands still match.

Generation is deterministic per seed, including the train/validation split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Corpus:
    train: list
    val: list
    train_meta: list = field(default_factory=list)
    val_meta: list = field(default_factory=list)


def _random_tile(rng: np.random.Generator, t: int) -> np.ndarray:
    """A (t, t, 3) tile in [0, 1]: blocky structure with correlated channels."""
    k = max(2, t // 3)
    base = rng.uniform(0.0, 1.0, size=(k, k, 1))
    tint = rng.uniform(0.0, 1.0, size=(k, k, 3))
    mix = 0.65 * base + 0.35 * tint
    reps = int(np.ceil(t / k))
    tile = np.repeat(np.repeat(mix, reps, axis=0), reps, axis=1)[:t, :t]
    # sharpen contrast so repeats are well separated from noise
    return np.clip((tile - 0.5) * rng.uniform(1.4, 2.0) + 0.5, 0.0, 1.0)


def _tiled_region(rng: np.random.Generator, h: int, w: int):
    # periods 9-16: a period of 8 would make every stride-8 grid pair an
    # exact repeat, starving pre-training of mismatched pairs
    t = int(rng.integers(9, 17))
    tile = _random_tile(rng, t)
    reps_r = int(np.ceil(h / t))
    reps_c = int(np.ceil(w / t))
    region = np.tile(tile, (reps_r, reps_c, 1))[:h, :w]
    return region, {"kind": "tiled-texture", "period": t}


def _stripe_region(rng: np.random.Generator, h: int, w: int):
    # same degeneracy guard as tiles: avoid periods dividing the grid stride
    p = int(rng.choice([5, 6, 7, 9, 10, 11, 12, 13]))
    profile = rng.uniform(0.0, 1.0, size=(p, 3))
    profile = np.clip((profile - 0.5) * rng.uniform(1.4, 2.0) + 0.5, 0.0, 1.0)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    direction = rng.choice(["rows", "cols", "diag", "anti"])
    phase = {"rows": rr, "cols": cc, "diag": rr + cc, "anti": rr - cc}[direction]
    region = profile[phase % p]
    return region, {"kind": "repeated-stripe", "period": p, "direction": direction}


def _make_region(rng: np.random.Generator, h: int, w: int, kind: str):
    if kind == "mixed":
        # stripes carry the densest exact-repeat supply; weight them up
        kind = "tiled-texture" if rng.random() < 0.35 else "repeated-stripe"
    if kind == "tiled-texture":
        return _tiled_region(rng, h, w)
    if kind == "repeated-stripe":
        return _stripe_region(rng, h, w)
    raise ValueError(f"unknown corpus kind {kind!r}")


def _make_image(rng: np.random.Generator, size: int, kind: str) -> tuple[np.ndarray, dict]:
    img = np.empty((size, size, 3))
    # 1, 2, or 4 regions: distinct patterns make cross-region patch pairs
    # unambiguous non-matches while each region stays densely self-similar.
    # Explicit single-pattern kinds tile the whole canvas.
    if kind == "mixed":
        layout = rng.choice(["whole", "hsplit", "vsplit", "quad"],
                            p=[0.3, 0.25, 0.25, 0.2])
    else:
        layout = "whole"
    def cut():
        return int(rng.integers(size * 3 // 8, size * 5 // 8))

    regions = []
    if layout == "whole":
        regions.append((slice(0, size), slice(0, size)))
    elif layout == "hsplit":
        r = cut()
        regions += [(slice(0, r), slice(0, size)), (slice(r, size), slice(0, size))]
    elif layout == "vsplit":
        c = cut()
        regions += [(slice(0, size), slice(0, c)), (slice(0, size), slice(c, size))]
    else:
        r, c = cut(), cut()
        regions += [(slice(0, r), slice(0, c)), (slice(0, r), slice(c, size)),
                    (slice(r, size), slice(0, c)), (slice(r, size), slice(c, size))]

    metas = []
    for rows, cols in regions:
        h = rows.stop - rows.start
        w = cols.stop - cols.start
        region, meta = _make_region(rng, h, w, kind)
        lo = rng.uniform(10.0, 60.0)
        hi = rng.uniform(185.0, 245.0)
        img[rows, cols] = lo + region * (hi - lo)
        metas.append(meta)

    # smooth low-amplitude gradient: repeats keep matching detail bands
    amp = rng.uniform(4.0, 12.0)
    grid = np.linspace(0.0, 1.0, size)
    plane = np.add.outer(rng.uniform(-1, 1) * grid, rng.uniform(-1, 1) * grid)
    img = img + amp * plane[:, :, None]

    target_mean = rng.uniform(112.0, 144.0)
    img = np.clip(img + (target_mean - img.mean()), 0.0, 255.0)
    meta = dict(metas[0])
    meta["layout"] = layout
    meta["regions"] = metas
    return img, meta


def synth_corpus(count: int, size: int = 96, kind: str = "mixed", seed: int = 0,
                 val_count: int = 8) -> Corpus:
    """Generate ``count`` training images plus a held-out validation set."""
    if size < 32:
        raise ValueError(f"corpus image size must be >= 32, got {size}")
    if kind not in ("tiled-texture", "repeated-stripe", "mixed"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    seq = np.random.SeedSequence(seed)
    children = seq.spawn(count + val_count)
    corpus = Corpus(train=[], val=[])
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        img, meta = _make_image(rng, size, kind)
        if i < count:
            corpus.train.append(img)
            corpus.train_meta.append(meta)
        else:
            corpus.val.append(img)
            corpus.val_meta.append(meta)
    return corpus
