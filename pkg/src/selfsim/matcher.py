"""The patch-matching network: features from noisy contexts, scores per pair.

A shared convolutional stack maps each 16x16x3 noisy context (raw
intensities, scaled to roughly [-0.5, 0.5]) to a feature vector.  For a pair
of patches the two feature vectors are concatenated, in (reference,
candidate) order, and passed through five fully-connected layers whose final
sigmoid emits one matching score per coefficient group.  Scores are not
required to be symmetric in the pair.

The convolutional stack has fourteen 3x3 layers with two concatenative skip
joins, downsampling 16 -> 8 -> 4 -> 2 -> 1 so the receptive field covers the
whole context; every activation is a ReLU except the final sigmoid of the
comparison stack.  The exact layer table is emitted as a text manifest whose
SHA-256 digest is stored in checkpoints and verified when they are loaded,
so a checkpoint can never be silently applied to a different architecture.

Dense scoring of a whole image computes each context's feature vector once
and reuses it for every pair it participates in; this is a pure optimization
and tests pin its equivalence to naive per-pair evaluation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import imgio
from .nncore import (CheckpointError, Concat, Conv2D, FullyConnected, Network,
                     ParamStore, ReLU, Sigmoid, load_checkpoint, save_checkpoint)
from .transform import N_GROUPS, GROUPS

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class MatcherArch:
    """Width configuration of the matching network.

    ``base_channels`` scales the convolutional stack; the feature width is
    8 * base_channels.  ``fc_width`` is the hidden width of the comparison
    stack.  Defaults are the desk-scale configuration.
    """

    base_channels: int = 8
    fc_width: int = 128

    @property
    def feature_width(self) -> int:
        return 8 * self.base_channels

    def __post_init__(self):
        if self.base_channels < 1 or self.fc_width < 1:
            raise ValueError("matcher widths must be positive")


def _build_feature_net(arch: MatcherArch) -> Network:
    # Resolution plan: one full-resolution layer, stride-2 stages 16->8->4,
    # a valid-padding collapse 4->2, and a final stride-2 collapse 2->1 as
    # the 14th conv.  No layer runs at 1x1, where a zero-padded 3x3 would
    # degenerate to its center tap and crush the signal scale.
    c = arch.base_channels
    nodes: list = []

    def add(layer, inputs):
        nodes.append((layer, inputs))
        return len(nodes) - 1

    i = add(Conv2D("conv01", 3, c, stride=2), [-1])
    i = add(ReLU("relu01", inplace=True), [i])
    i = add(Conv2D("conv02", c, 2 * c), [i])
    skip_a = i = add(ReLU("relu02", inplace=True), [i])
    i = add(Conv2D("conv03", 2 * c, 2 * c), [i])
    i = add(ReLU("relu03", inplace=True), [i])
    i = add(Conv2D("conv04", 2 * c, 2 * c), [i])
    i = add(ReLU("relu04", inplace=True), [i])
    i = add(Concat("join1"), [skip_a, i])
    i = add(Conv2D("conv05", 4 * c, 3 * c, stride=2), [i])
    i = add(ReLU("relu05", inplace=True), [i])
    i = add(Conv2D("conv06", 3 * c, 3 * c), [i])
    i = add(ReLU("relu06", inplace=True), [i])
    i = add(Conv2D("conv07", 3 * c, 3 * c), [i])
    i = add(ReLU("relu07", inplace=True), [i])
    i = add(Conv2D("conv08", 3 * c, 4 * c), [i])
    i = add(ReLU("relu08", inplace=True), [i])
    i = add(Conv2D("conv09", 4 * c, 4 * c), [i])
    i = add(ReLU("relu09", inplace=True), [i])
    i = add(Conv2D("conv10", 4 * c, 6 * c, padding="valid"), [i])
    i = add(ReLU("relu10", inplace=True), [i])
    i = add(Conv2D("conv11", 6 * c, 4 * c), [i])
    skip_b = i = add(ReLU("relu11", inplace=True), [i])
    i = add(Conv2D("conv12", 4 * c, 4 * c), [i])
    i = add(ReLU("relu12", inplace=True), [i])
    i = add(Conv2D("conv13", 4 * c, 4 * c), [i])
    i = add(ReLU("relu13", inplace=True), [i])
    i = add(Concat("join2"), [skip_b, i])
    i = add(Conv2D("conv14", 8 * c, 8 * c, stride=2), [i])
    add(ReLU("relu14", inplace=True), [i])
    return Network(nodes)


class _PairDifferenceFC(FullyConnected):
    """First comparison layer with anti-symmetric halves at initialization.

    The weight on the candidate half starts as the negative of the weight on
    the reference half, so the layer initially projects the feature
    difference f_ref - f_cand: the statistic the optimal matching weight
    depends on most.  Both halves train freely afterwards; each half keeps
    the standard N(0, 2/fan_in) marginal distribution.
    """

    def init_params(self, params: ParamStore, rng: np.random.Generator) -> None:
        super().init_params(params, rng)
        w = params[self.param_names[0]].value
        half = self.in_width // 2
        w[:, half:] = -w[:, :half]


def _build_compare_net(arch: MatcherArch) -> Network:
    d, f = arch.feature_width, arch.fc_width
    nodes: list = []

    def add(layer, inputs):
        nodes.append((layer, inputs))
        return len(nodes) - 1

    i = add(_PairDifferenceFC("fc1", 2 * d, f), [-1])
    i = add(ReLU("fcrelu1", inplace=True), [i])
    i = add(FullyConnected("fc2", f, f), [i])
    i = add(ReLU("fcrelu2", inplace=True), [i])
    i = add(FullyConnected("fc3", f, f), [i])
    i = add(ReLU("fcrelu3", inplace=True), [i])
    i = add(FullyConnected("fc4", f, f), [i])
    i = add(ReLU("fcrelu4", inplace=True), [i])
    i = add(FullyConnected("fc5", f, N_GROUPS), [i])
    add(Sigmoid("fcsigmoid"), [i])
    return Network(nodes)


class ScoreTable:
    """Mapping from (reference, candidate) patch positions to score vectors."""

    def __init__(self):
        self._entries: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def put(self, center, members: np.ndarray, scores: np.ndarray) -> None:
        self._entries[tuple(center)] = (members, scores)

    def references(self) -> list[tuple]:
        return list(self._entries)

    def window(self, center):
        """(members, scores) arrays for one reference patch."""
        return self._entries[tuple(center)]

    def __getitem__(self, key) -> np.ndarray:
        center, member = key
        members, scores = self._entries[tuple(center)]
        hit = np.nonzero((members[:, 0] == member[0]) & (members[:, 1] == member[1]))[0]
        if hit.size == 0:
            raise KeyError(f"candidate {member} not in window of {center}")
        return scores[hit[0]]

    def __len__(self) -> int:
        return len(self._entries)


class Matcher:
    """Builds, runs, trains, and checkpoints the matching network."""

    def __init__(self, arch: MatcherArch | None = None):
        self.arch = arch or MatcherArch()
        self.feature_net = _build_feature_net(self.arch)
        self.compare_net = _build_compare_net(self.arch)

    # -- architecture manifest -------------------------------------------

    def manifest(self) -> str:
        lines = [
            f"selfsim-matcher manifest v{MANIFEST_VERSION}",
            "input: 16x16x3 noisy context, scaled x/255",
            "features: final conv output scaled by 0.125",
            f"feature_width: {self.arch.feature_width}",
            f"fc_width: {self.arch.fc_width}",
            "layout: channel-last activations",
            f"scores: {N_GROUPS} per pair, canonical coefficient-group order",
            "[feature]",
            *self.feature_net.describe(),
            "[compare]",
            *self.compare_net.describe(),
        ]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.manifest().encode("utf-8")).hexdigest()

    # -- parameters -------------------------------------------------------

    def init_params(self, seed: int = 0, dtype=np.float32) -> ParamStore:
        """He-initialized parameters with identity-biased feature convs.

        Each feature conv additionally passes its inputs through unit center
        taps (channel c reads input channel c mod in_channels), so the
        initial feature vector is a strided pixel sketch whose pairwise
        distances track pixel-space distances.  Without this bias, randomly
        mixed features separate matched from mismatched patch pairs far too
        weakly to learn the matching task within a desk-scale step budget.
        """
        params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.feature_net.init_params(params, rng)
        self.compare_net.init_params(params, rng)
        for layer, _ in self.feature_net.nodes:
            if layer.kind == "conv2d":
                w = params[f"{layer.name}.w"].value
                for c in range(layer.out_channels):
                    w[c, c % layer.in_channels, 1, 1] += 1.0
        return params

    def save(self, params: ParamStore, path, include_moments: bool = False) -> None:
        save_checkpoint(params, path, digest=self.digest(), include_moments=include_moments)

    def load(self, path, dtype=np.float32) -> ParamStore:
        params, digest = load_checkpoint(path, dtype)
        if digest != self.digest():
            raise CheckpointError(
                f"checkpoint {path} was trained for a different matcher architecture "
                f"(digest {digest[:12]}.. != {self.digest()[:12]}..)"
            )
        return params

    # -- feature extraction ------------------------------------------------

    @staticmethod
    def _prep_contexts(contexts: np.ndarray, dtype) -> np.ndarray:
        x = np.asarray(contexts)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (imgio.CONTEXT, imgio.CONTEXT, 3):
            raise ValueError(f"expected (n, 16, 16, 3) contexts, got {x.shape}")
        x = x.astype(dtype) / dtype.type(255.0)
        return np.ascontiguousarray(x)

    FEATURE_SCALE = 0.125  # keeps identity-sketch features in sigmoid-friendly range

    def features_forward(self, contexts: np.ndarray, params: ParamStore, keep_ctx: bool = False):
        x = self._prep_contexts(contexts, params.dtype)
        out, ctxs = self.feature_net.forward(x, params)
        feats = out.reshape(out.shape[0], self.arch.feature_width) * params.dtype.type(self.FEATURE_SCALE)
        if keep_ctx:
            return feats, ctxs
        return feats

    def features_backward(self, grad_feats: np.ndarray, ctxs, params: ParamStore) -> None:
        g = grad_feats.reshape(grad_feats.shape[0], 1, 1, self.arch.feature_width)
        self.feature_net.backward(g * g.dtype.type(self.FEATURE_SCALE), ctxs, params)

    def extract_features(self, context: np.ndarray, params: ParamStore) -> np.ndarray:
        """Feature vector of a single 16x16x3 context."""
        return self.features_forward(context, params)[0]

    def compute_features(self, image, positions: np.ndarray, params: ParamStore,
                         batch: int = 2048) -> np.ndarray:
        """Features for many patch positions of one image, computed in batches."""
        img = imgio.as_image(image)
        feats = np.empty((positions.shape[0], self.arch.feature_width), dtype=params.dtype)
        for start in range(0, positions.shape[0], batch):
            block = positions[start : start + batch]
            contexts = imgio.extract_patches(img, block, size=imgio.CONTEXT)
            feats[start : start + block.shape[0]] = self.features_forward(contexts, params)
        return feats

    # -- pair scoring -------------------------------------------------------

    def score_pairs(self, feats_i: np.ndarray, feats_j: np.ndarray,
                    params: ParamStore, keep_ctx: bool = False):
        x = np.concatenate([feats_i, feats_j], axis=1)
        out, ctxs = self.compare_net.forward(x, params)
        if keep_ctx:
            return out, ctxs
        return out

    def score_pair(self, feat_i: np.ndarray, feat_j: np.ndarray, params: ParamStore) -> np.ndarray:
        """Score vector for one (reference, candidate) feature pair."""
        return self.score_pairs(feat_i[None], feat_j[None], params)[0]

    def pairs_forward(self, feats: np.ndarray, idx_i: np.ndarray, idx_j: np.ndarray,
                      params: ParamStore):
        scores, ctxs = self.score_pairs(feats[idx_i], feats[idx_j], params, keep_ctx=True)
        return scores, (ctxs, idx_i, idx_j, feats.shape[0])

    def pairs_backward(self, grad_scores: np.ndarray, ctx, params: ParamStore) -> np.ndarray:
        """Backprop pair-score gradients into per-position feature gradients."""
        ctxs, idx_i, idx_j, n_feats = ctx
        gx = self.compare_net.backward(grad_scores, ctxs, params)
        d = self.arch.feature_width
        gfeats = np.zeros((n_feats, d), dtype=gx.dtype)
        np.add.at(gfeats, idx_i, gx[:, :d])
        np.add.at(gfeats, idx_j, gx[:, d:])
        return gfeats

    def pair_precompute(self, feats: np.ndarray, params: ParamStore):
        """Split the first comparison layer so each pair costs one add.

        fc1(concat(f_i, f_j)) == f_i @ W_left.T + f_j @ W_right.T + b, so the
        two halves are precomputed once per position.
        """
        w1 = params["fc1.w"].value
        d = self.arch.feature_width
        u = feats @ w1[:, :d].T
        v = feats @ w1[:, d:].T
        return u, v, params["fc1.b"].value

    def score_from_precomputed(self, u, v, b1, ref_idx, cand_idx,
                               params: ParamStore, chunk: int = 262144) -> np.ndarray:
        """Forward-only scores for index pairs, reusing per-position halves."""
        n = ref_idx.shape[0]
        out = np.empty((n, N_GROUPS), dtype=u.dtype)
        for s in range(0, n, chunk):
            h = u[ref_idx[s : s + chunk]] + v[cand_idx[s : s + chunk]] + b1
            np.maximum(h, 0, out=h)
            for k in (2, 3, 4):
                h = h @ params[f"fc{k}.w"].value.T
                h += params[f"fc{k}.b"].value
                np.maximum(h, 0, out=h)
            h = h @ params["fc5.w"].value.T
            h += params["fc5.b"].value
            out[s : s + chunk] = 0.5 * (1.0 + np.tanh(0.5 * h))
        return out

    # -- whole-image scoring -------------------------------------------------

    def score_image(self, noisy, windows, params: ParamStore) -> ScoreTable:
        """Score every (reference, candidate) pair of the given windows.

        Features are computed once per distinct patch position and reused
        across pairs; the result is identical to looping extract_features +
        score_pair over every pair.
        """
        img = imgio.as_image(noisy)
        all_pos = [np.asarray([[w.center.row, w.center.col] for w in windows])]
        for w in windows:
            if w.members.size:
                all_pos.append(w.members)
        stacked = np.concatenate(all_pos, axis=0)
        uniq, inverse = np.unique(stacked, axis=0, return_inverse=True)
        feats = self.compute_features(img, uniq, params)
        u, v, b1 = self.pair_precompute(feats, params)

        index_of = {tuple(p): i for i, p in enumerate(uniq)}
        table = ScoreTable()
        for w in windows:
            center = (w.center.row, w.center.col)
            if w.members.size == 0:
                table.put(center, np.zeros((0, 2), dtype=np.int64), np.zeros((0, N_GROUPS)))
                continue
            ref = np.full(w.members.shape[0], index_of[center], dtype=np.int64)
            cand = np.array([index_of[tuple(m)] for m in w.members], dtype=np.int64)
            scores = self.score_from_precomputed(u, v, b1, ref, cand, params)
            table.put(center, w.members, scores)
        return table

    # -- score-map visualization ----------------------------------------------

    def score_maps(self, noisy, params: ParamStore, center: tuple[int, int],
                   radius: int) -> dict[str, np.ndarray]:
        """Window score maps for one reference patch, per sub-band aggregate.

        Returns (2*radius+1)^2 maps in [0, 1]: the mean over all groups, one
        map per scale (averaged over channels and orientations), one per
        orientation, and the scaling-group mean.  The center cell holds 1.0
        (the reference's own implicit weight); clipped cells hold 0.
        """
        img = imgio.as_image(noisy)
        h, w = img.shape[:2]
        members = imgio.window_members(center[0], center[1], radius, h, w)
        positions = np.concatenate([np.asarray([center]), members], axis=0)
        feats = self.compute_features(img, positions, params)
        scores = self.score_pairs(np.broadcast_to(feats[0], (members.shape[0], feats.shape[1])),
                                  feats[1:], params)

        labels = GROUPS.labels
        selections = {"mean": [g for g in range(N_GROUPS)]}
        for scale in (1, 2, 3):
            selections[f"scale{scale}"] = [g for g in range(27) if labels[g][1] == scale]
        for orient in ("h", "v", "d"):
            selections[f"orient-{orient}"] = [g for g in range(27) if labels[g][2] == orient]
        selections["scaling"] = [27, 28, 29]

        side = 2 * radius + 1
        maps = {}
        rows = members[:, 0] - center[0] + radius
        cols = members[:, 1] - center[1] + radius
        for name, groups in selections.items():
            grid = np.zeros((side, side))
            grid[rows, cols] = scores[:, groups].mean(axis=1)
            grid[radius, radius] = 1.0
            maps[name] = grid
        return maps
