"""Layer primitives with explicit forward/backward rules, and a DAG executor.

Convolutions use the cross-correlation convention with fixed 3x3 kernels,
stride 1 or 2, dilation >= 1 and either valid or zero-padded "same" borders.
Spatial tensors are channel-last, (batch, height, width, channel), which
keeps every im2col fill contiguous; fully-connected tensors are (batch,
features).  Weights are stored (out_channels, in_channels, 3, 3).

Forward passes return an opaque context that the matching backward pass
consumes; parameter gradients are accumulated (+=) into the ParamStore so
several backward passes sum their contributions until the next optimizer
step.
"""

from __future__ import annotations

import numpy as np

from .params import ParamStore

KERNEL = 3


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2D:
    """3x3 convolution over (batch, height, width, channel) tensors."""

    kind = "conv2d"

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 stride: int = 1, dilation: int = 1, padding: str = "same"):
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    @property
    def param_names(self) -> tuple[str, str]:
        return (f"{self.name}.w", f"{self.name}.b")

    def init_params(self, params: ParamStore, rng: np.random.Generator) -> None:
        wname, bname = self.param_names
        fan_in = self.in_channels * KERNEL * KERNEL
        params.add(wname, _he_normal(rng, (self.out_channels, self.in_channels, KERNEL, KERNEL), fan_in))
        params.add(bname, np.zeros(self.out_channels))

    def _geometry(self, h: int, w: int):
        eff = 2 * self.dilation + 1
        pad = self.dilation if self.padding == "same" else 0
        ho = (h + 2 * pad - eff) // self.stride + 1
        wo = (w + 2 * pad - eff) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(
                f"{self.name}: input {h}x{w} too small for 3x3 dilation "
                f"{self.dilation} with {self.padding} padding"
            )
        return pad, ho, wo

    def _taps(self, ho: int, wo: int):
        d, s = self.dilation, self.stride
        for i in range(KERNEL):
            for j in range(KERNEL):
                yield (i * KERNEL + j,
                       slice(i * d, i * d + s * (ho - 1) + 1, s),
                       slice(j * d, j * d + s * (wo - 1) + 1, s))

    def _im2col(self, xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
        b = xp.shape[0]
        c = xp.shape[3]
        cols = np.empty((b, ho, wo, KERNEL * KERNEL, c), dtype=xp.dtype)
        for k, si, sj in self._taps(ho, wo):
            cols[:, :, :, k, :] = xp[:, si, sj, :]
        return cols.reshape(b * ho * wo, KERNEL * KERNEL * c)

    def _weight_mat(self, params: ParamStore) -> np.ndarray:
        w = params[self.param_names[0]].value
        return np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(self.out_channels, -1)

    def forward(self, x: np.ndarray, params: ParamStore):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError(
                f"{self.name}: expected (b, h, w, {self.in_channels}) input, got {x.shape}"
            )
        b, h, w = x.shape[:3]
        pad, ho, wo = self._geometry(h, w)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        cols = self._im2col(xp, ho, wo)
        y = cols @ self._weight_mat(params).T
        y += params[self.param_names[1]].value
        return y.reshape(b, ho, wo, self.out_channels), (xp, x.shape, pad, ho, wo)

    def backward(self, grad_out: np.ndarray, ctx, params: ParamStore) -> np.ndarray:
        xp, x_shape, pad, ho, wo = ctx
        b = x_shape[0]
        if grad_out.shape != (b, ho, wo, self.out_channels):
            raise ValueError(f"{self.name}: gradient shape {grad_out.shape} does not match forward context")
        wname, bname = self.param_names
        g2 = grad_out.reshape(-1, self.out_channels)
        cols = self._im2col(xp, ho, wo)
        grad_w9 = g2.T @ cols
        params[wname].grad += grad_w9.reshape(
            self.out_channels, KERNEL, KERNEL, self.in_channels).transpose(0, 3, 1, 2)
        params[bname].grad += g2.sum(axis=0)
        gcols = (g2 @ self._weight_mat(params)).reshape(b, ho, wo, KERNEL * KERNEL, self.in_channels)
        gxp = np.zeros_like(xp)
        for k, si, sj in self._taps(ho, wo):
            gxp[:, si, sj, :] += gcols[:, :, :, k, :]
        if pad:
            return gxp[:, pad:-pad, pad:-pad, :]
        return gxp


class FullyConnected:
    """Dense layer over (batch, features) tensors."""

    kind = "fully_connected"

    def __init__(self, name: str, in_width: int, out_width: int):
        self.name = name
        self.in_width = in_width
        self.out_width = out_width

    @property
    def param_names(self) -> tuple[str, str]:
        return (f"{self.name}.w", f"{self.name}.b")

    def init_params(self, params: ParamStore, rng: np.random.Generator) -> None:
        wname, bname = self.param_names
        params.add(wname, _he_normal(rng, (self.out_width, self.in_width), self.in_width))
        params.add(bname, np.zeros(self.out_width))

    def forward(self, x: np.ndarray, params: ParamStore):
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ValueError(f"{self.name}: expected (b, {self.in_width}) input, got {x.shape}")
        wname, bname = self.param_names
        y = x @ params[wname].value.T + params[bname].value
        return y, x

    def backward(self, grad_out: np.ndarray, ctx, params: ParamStore) -> np.ndarray:
        x = ctx
        if grad_out.shape != (x.shape[0], self.out_width):
            raise ValueError(f"{self.name}: gradient shape {grad_out.shape} does not match forward context")
        wname, bname = self.param_names
        params[wname].grad += grad_out.T @ x
        params[bname].grad += grad_out.sum(axis=0)
        return grad_out @ params[wname].value


class ReLU:
    """Rectifier; ``inplace`` rectifies the input buffer itself, which is
    safe when no other consumer needs the pre-activation values (backward
    only uses the output)."""

    kind = "relu"

    def __init__(self, name: str = "relu", inplace: bool = False):
        self.name = name
        self.inplace = inplace

    def init_params(self, params, rng) -> None:
        pass

    def forward(self, x: np.ndarray, params=None):
        y = np.maximum(x, 0, out=x) if self.inplace else np.maximum(x, 0)
        return y, y

    def backward(self, grad_out: np.ndarray, ctx, params=None) -> np.ndarray:
        y = ctx
        if grad_out.shape != y.shape:
            raise ValueError(f"{self.name}: gradient shape {grad_out.shape} does not match forward context")
        return grad_out * (y > 0)


class Sigmoid:
    kind = "sigmoid"

    def __init__(self, name: str = "sigmoid"):
        self.name = name

    def init_params(self, params, rng) -> None:
        pass

    def forward(self, x: np.ndarray, params=None):
        # tanh form is stable for large |x|
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, grad_out: np.ndarray, ctx, params=None) -> np.ndarray:
        y = ctx
        if grad_out.shape != y.shape:
            raise ValueError(f"{self.name}: gradient shape {grad_out.shape} does not match forward context")
        return grad_out * y * (1.0 - y)


class Concat:
    """Concatenation of several source tensors along the channel (last) axis."""

    kind = "concat"

    def __init__(self, name: str = "concat"):
        self.name = name

    def init_params(self, params, rng) -> None:
        pass

    def forward(self, xs: list[np.ndarray], params=None):
        y = np.concatenate(xs, axis=-1)
        return y, [x.shape[-1] for x in xs]

    def backward(self, grad_out: np.ndarray, ctx, params=None) -> list[np.ndarray]:
        widths = ctx
        if grad_out.shape[-1] != sum(widths):
            raise ValueError(f"{self.name}: gradient width {grad_out.shape[-1]} does not match forward context")
        splits = np.cumsum(widths)[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=-1)]


class Network:
    """A small feed-forward DAG over the layer primitives.

    ``nodes`` is an ordered list of (layer, input_ids); input id -1 denotes
    the network input, id k >= 0 the output of node k (k earlier in the
    list).  Concat layers take several input ids, all other layers exactly
    one.  The last node's output is the network output.
    """

    def __init__(self, nodes: list[tuple[object, list[int]]]):
        self.nodes = []
        for idx, (layer, input_ids) in enumerate(nodes):
            ids = list(input_ids)
            if any(i >= idx or i < -1 for i in ids):
                raise ValueError(f"node {idx} ({layer.name}) has invalid inputs {ids}")
            if layer.kind != "concat" and len(ids) != 1:
                raise ValueError(f"node {idx} ({layer.name}) must have exactly one input")
            self.nodes.append((layer, ids))

    def init_params(self, params: ParamStore, rng: np.random.Generator) -> None:
        for layer, _ in self.nodes:
            layer.init_params(params, rng)

    def forward(self, x: np.ndarray, params: ParamStore):
        outputs: list[np.ndarray] = []
        ctxs = []
        for layer, input_ids in self.nodes:
            ins = [x if i == -1 else outputs[i] for i in input_ids]
            y, ctx = layer.forward(ins if layer.kind == "concat" else ins[0], params)
            outputs.append(y)
            ctxs.append(ctx)
        return outputs[-1], ctxs

    def backward(self, grad_out: np.ndarray, ctxs, params: ParamStore) -> np.ndarray:
        grads: list = [None] * len(self.nodes)
        grad_input = None
        grads[-1] = grad_out
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads[idx]
            if g is None:
                continue  # output unused downstream
            layer, input_ids = self.nodes[idx]
            gins = layer.backward(g, ctxs[idx], params)
            if layer.kind != "concat":
                gins = [gins]
            for i, gi in zip(input_ids, gins):
                if i == -1:
                    grad_input = gi if grad_input is None else grad_input + gi
                elif grads[i] is None:
                    grads[i] = gi.copy()
                else:
                    grads[i] += gi
        return grad_input

    def describe(self) -> list[str]:
        """One canonical text line per node (the architecture manifest body)."""
        lines = []
        for layer, input_ids in self.nodes:
            ins = ",".join(str(i) for i in input_ids)
            if layer.kind == "conv2d":
                attrs = (f"in={layer.in_channels} out={layer.out_channels} "
                         f"kernel=3 stride={layer.stride} dilation={layer.dilation} "
                         f"pad={layer.padding}")
            elif layer.kind == "fully_connected":
                attrs = f"in={layer.in_width} out={layer.out_width}"
            else:
                attrs = ""
            lines.append(f"{layer.kind} name={layer.name} inputs={ins} {attrs}".rstrip())
        return lines
