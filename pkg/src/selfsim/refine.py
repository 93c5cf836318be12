"""Residual refinement network over (noisy, stage-1) image pairs.

Seven 3x3 convolution layers with dilations 1, 2, 3, 4, 3, 2, 1 and
zero-padded borders sized to the dilation, so spatial dimensions are
preserved for any input size.  The input is the six-channel concatenation of
the noisy image and the stage-1 estimate, scaled to roughly [-0.5, 0.5]; the
last layer is linear and zero-initialized, and its output (scaled back to
gray levels) is added to the stage-1 estimate.  At initialization the
network is therefore exactly the identity on the stage-1 input.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import imgio
from .nncore import (CheckpointError, Conv2D, Network, ParamStore, ReLU,
                     load_checkpoint, save_checkpoint)

DILATIONS = (1, 2, 3, 4, 3, 2, 1)
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class RefineArch:
    """Width configuration of the refinement network (desk default 32)."""

    hidden: int = 32

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")


def _build_net(arch: RefineArch) -> Network:
    nodes: list = []
    prev = -1
    widths = [6] + [arch.hidden] * (len(DILATIONS) - 1) + [3]
    for k, dil in enumerate(DILATIONS, start=1):
        conv = Conv2D(f"ref{k:02d}", widths[k - 1], widths[k], dilation=dil)
        nodes.append((conv, [prev]))
        prev = len(nodes) - 1
        if k < len(DILATIONS):
            nodes.append((ReLU(f"refrelu{k:02d}", inplace=True), [prev]))
            prev = len(nodes) - 1
    return Network(nodes)


class Refiner:
    """Builds, runs, and checkpoints the residual regression network."""

    def __init__(self, arch: RefineArch | None = None):
        self.arch = arch or RefineArch()
        self.net = _build_net(self.arch)

    def manifest(self) -> str:
        lines = [
            f"selfsim-refiner manifest v{MANIFEST_VERSION}",
            "input: concat(noisy, stage1) 6ch, scaled x/255, channel-last",
            "output: residual x255 added to stage1",
            f"hidden: {self.arch.hidden}",
            "[layers]",
            *self.net.describe(),
        ]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.manifest().encode("utf-8")).hexdigest()

    def init_params(self, seed: int = 0, dtype=np.float32) -> ParamStore:
        params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.net.init_params(params, rng)
        last = f"ref{len(DILATIONS):02d}"
        params[f"{last}.w"].value[...] = 0
        params[f"{last}.b"].value[...] = 0
        return params

    def save(self, params: ParamStore, path, matcher_digest: str = "",
             include_moments: bool = False) -> None:
        """Write a checkpoint; ``matcher_digest`` records the frozen matcher
        checkpoint this refiner was trained against."""
        digest = self.digest() + ("+" + matcher_digest if matcher_digest else "")
        save_checkpoint(params, path, digest=digest, include_moments=include_moments)

    def load(self, path, dtype=np.float32) -> tuple[ParamStore, str]:
        """Read a checkpoint; returns (params, recorded matcher digest)."""
        params, digest = load_checkpoint(path, dtype)
        arch_digest, _, matcher_digest = digest.partition("+")
        if arch_digest != self.digest():
            raise CheckpointError(
                f"checkpoint {path} was trained for a different refiner architecture "
                f"(digest {arch_digest[:12]}.. != {self.digest()[:12]}..)"
            )
        return params, matcher_digest

    @staticmethod
    def _prep(noisy: np.ndarray, stage1: np.ndarray, dtype) -> np.ndarray:
        x = np.concatenate([noisy, stage1], axis=3)
        x = x.astype(dtype) / dtype.type(255.0)
        return np.ascontiguousarray(x)

    def forward_batch(self, noisy: np.ndarray, stage1: np.ndarray,
                      params: ParamStore, keep_ctx: bool = False):
        """(n, h, w, 3) noisy and stage-1 batches -> (n, h, w, 3) refined."""
        if noisy.shape != stage1.shape:
            raise ValueError(f"noisy {noisy.shape} and stage1 {stage1.shape} differ")
        x = self._prep(noisy, stage1, params.dtype)
        resid, ctxs = self.net.forward(x, params)
        out = stage1 + 255.0 * resid.astype(np.float64)
        if keep_ctx:
            return out, ctxs
        return out

    def backward_batch(self, grad_out: np.ndarray, ctxs, params: ParamStore) -> None:
        """Backprop through the residual path (gradients w.r.t. params only)."""
        g = np.ascontiguousarray(255.0 * grad_out).astype(params.dtype)
        self.net.backward(g, ctxs, params)


def refine_forward(noisy, stage1, params: ParamStore, arch: RefineArch | None = None) -> np.ndarray:
    """Refined estimate for one image: stage1 + residual(noisy, stage1)."""
    ni = imgio.as_image(noisy)
    s1 = imgio.as_image(stage1)
    if ni.shape != s1.shape:
        raise ValueError(f"noisy {ni.shape} and stage1 {s1.shape} dimensions differ")
    refiner = Refiner(arch)
    return refiner.forward_batch(ni[None], s1[None], params)[0]
