"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


def grad_check(loss_fn, params: ParamStore, names=None, step: float = 1e-5,
               max_coords: int = 64, seed: int = 0, rel_floor: float = 1e-6):
    """Compare analytic parameter gradients against central differences.

    ``loss_fn`` takes no arguments, returns a scalar loss, and accumulates the
    analytic gradients into ``params`` as a side effect.  For each selected
    entry a deterministic sample of at most ``max_coords`` coordinates is
    perturbed by +/- ``step``.  Returns a dict mapping entry name to its
    relative error, plus the overall maximum under the key "max".

    The error is per entry: the largest coordinate discrepancy divided by
    the largest gradient magnitude seen for that entry.  Scaling per entry
    rather than per coordinate keeps the check meaningful for coordinates
    whose true gradient is cancellation-small while still flagging a
    systematically wrong backward rule.

    The store should hold float64 values; float32 rounding usually drowns
    the comparison.
    """
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else params.names()

    params.zero_grads()
    loss_fn()
    analytic = {name: params[name].grad.copy() for name in names}
    params.zero_grads()

    report: dict[str, float] = {}
    worst = 0.0
    for name in names:
        value = params[name].value
        flat = value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        diff = 0.0
        scale = rel_floor
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            loss_plus = loss_fn()
            flat[c] = orig - step
            loss_minus = loss_fn()
            flat[c] = orig
            params.zero_grads()
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[c]
            diff = max(diff, abs(a - numeric))
            scale = max(scale, abs(a), abs(numeric))
        report[name] = diff / scale
        worst = max(worst, report[name])
    report["max"] = worst
    return report
