"""Reverse-mode gradients and Hessian-vector products for layer-stack models.

The tape is rebuilt on every forward call: ``forward_loss`` walks the layer
stack, records one node per primitive with whatever it needs for the reverse
sweep, and terminates in a scalar mean cross-entropy. ``backward`` replays
the nodes in reverse and accumulates parameter gradients into a flat vector.

Hessian-vector products use a central finite difference of gradients,
(g(theta + eps v) - g(theta - eps v)) / (2 eps), which is exact for
quadratic losses up to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, UsageError
from .models import Conv, Dense, Flatten, MaxPool, ModelSpec, Relu
from .tensor import Batch, ParamVector

__all__ = ["Tape", "forward_logits", "forward_loss", "backward", "loss_and_grad", "hvp", "hvp_fd"]


@dataclass
class _Node:
    """One recorded primitive: op kind, saved forward state, parameter names."""

    kind: str
    saved: tuple
    param: str | None = None


@dataclass
class Tape:
    """Ordered record of one forward pass ending in a scalar loss."""

    params: ParamVector
    nodes: list[_Node]
    loss: float
    dlogits: np.ndarray  # gradient of the scalar loss w.r.t. the logits
    terminal_shape: tuple[int, ...] = ()


def _check_compat(params: ParamVector, model: ModelSpec, x: np.ndarray) -> None:
    if params.manifest != model.manifest:
        raise ConfigError("parameter vector manifest does not match the model")
    if tuple(x.shape[1:]) != model.input_shape:
        raise ConfigError(
            f"batch images have shape {tuple(x.shape[1:])}, model expects {model.input_shape}"
        )


def _conv_cols(x: np.ndarray, k: int) -> np.ndarray:
    # (B, C, H, W) -> (B, C*k*k, OH*OW) patch matrix, as a strided view
    # reshaped only where numpy requires a copy.
    b, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, OH, OW, k, k)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)
    return cols


def forward_logits(params: ParamVector, model: ModelSpec, x: np.ndarray):
    """Run the layer stack; returns (logits, nodes) with nodes ready for backward."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_compat(params, model, x)
    nodes: list[_Node] = []
    out = x
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv):
            k = layer.kernel
            w = params.view(f"conv{i}.w")
            bias = params.view(f"conv{i}.b")
            b_, c, h, wd = out.shape
            oh, ow = h - k + 1, wd - k + 1
            cols = _conv_cols(out, k)
            wmat = w.reshape(w.shape[0], -1)
            res = np.einsum("of,bfp->bop", wmat, cols) + bias[None, :, None]
            nodes.append(_Node("conv", (out, k), f"conv{i}"))
            out = res.reshape(b_, w.shape[0], oh, ow)
        elif isinstance(layer, MaxPool):
            s = layer.size
            b_, c, h, wd = out.shape
            oh, ow = h // s, wd // s
            xw = out[:, :, : oh * s, : ow * s]
            xw = xw.reshape(b_, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5)
            xw = xw.reshape(b_, c, oh, ow, s * s)
            am = xw.argmax(axis=-1)
            nodes.append(_Node("maxpool", (out.shape, s, am)))
            out = np.take_along_axis(xw, am[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Relu):
            mask = out > 0
            nodes.append(_Node("relu", (mask,)))
            out = np.where(mask, out, 0.0)
        elif isinstance(layer, Flatten):
            nodes.append(_Node("flatten", (out.shape,)))
            out = out.reshape(out.shape[0], -1)
        elif isinstance(layer, Dense):
            w = params.view(f"fc{i}.w")
            nodes.append(_Node("dense", (out,), f"fc{i}"))
            out = out @ w.T + params.view(f"fc{i}.b")[None, :]
        else:
            raise ConfigError(f"unknown layer {layer!r}")
    return out, nodes


def _softmax_ce(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch; supports int ids and soft labels."""
    b, c = logits.shape
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - lse
    probs = np.exp(log_probs)
    if y.ndim == 1:
        loss = -log_probs[np.arange(b), y].mean()
        dlogits = probs.copy()
        dlogits[np.arange(b), y] -= 1.0
        dlogits /= b
    else:
        if y.shape != logits.shape:
            raise ConfigError(f"soft labels have shape {y.shape}, logits {logits.shape}")
        loss = -(y * log_probs).sum(axis=1).mean()
        dlogits = (probs * y.sum(axis=1, keepdims=True) - y) / b
    return float(loss), dlogits


def forward_loss(params: ParamVector, model: ModelSpec, batch: Batch) -> tuple[float, Tape]:
    """Mean cross-entropy of the model on the batch, plus the tape for backward."""
    logits, nodes = forward_logits(params, model, batch.x)
    loss, dlogits = _softmax_ce(logits, batch.y)
    return loss, Tape(params=params, nodes=nodes, loss=loss, dlogits=dlogits)


def backward(tape: Tape) -> ParamVector:
    """Gradient of the tape's scalar loss w.r.t. every parameter."""
    if tape.terminal_shape != ():
        raise UsageError(f"backward needs a scalar terminal, got shape {tape.terminal_shape}")
    params = tape.params
    grad = np.zeros_like(params.data)
    gvec = ParamVector(grad, params.manifest)
    dy = tape.dlogits
    for node in reversed(tape.nodes):
        if node.kind == "dense":
            (x,) = node.saved
            w = params.view(f"{node.param}.w")
            gvec.view(f"{node.param}.w")[...] += dy.T @ x
            gvec.view(f"{node.param}.b")[...] += dy.sum(axis=0)
            dy = dy @ w
        elif node.kind == "relu":
            (mask,) = node.saved
            dy = np.where(mask, dy, 0.0)
        elif node.kind == "flatten":
            (shape,) = node.saved
            dy = dy.reshape(shape)
        elif node.kind == "maxpool":
            shape, s, am = node.saved
            b_, c, h, wd = shape
            oh, ow = h // s, wd // s
            dxw = np.zeros((b_, c, oh, ow, s * s), dtype=np.float64)
            np.put_along_axis(dxw, am[..., None], dy[..., None], axis=-1)
            dxw = dxw.reshape(b_, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5)
            dx = np.zeros(shape, dtype=np.float64)
            dx[:, :, : oh * s, : ow * s] = dxw.reshape(b_, c, oh * s, ow * s)
            dy = dx
        elif node.kind == "conv":
            x, k = node.saved
            w = params.view(f"{node.param}.w")
            wmat = w.reshape(w.shape[0], -1)
            b_, oc, oh, ow = dy.shape
            dy_mat = dy.reshape(b_, oc, oh * ow)
            cols = _conv_cols(x, k)
            gvec.view(f"{node.param}.w")[...] += np.einsum(
                "bop,bfp->of", dy_mat, cols
            ).reshape(w.shape)
            gvec.view(f"{node.param}.b")[...] += dy_mat.sum(axis=(0, 2))
            dcols = np.einsum("of,bop->bfp", wmat, dy_mat)
            c_in = x.shape[1]
            dcols = dcols.reshape(b_, c_in, k, k, oh, ow)
            dx = np.zeros_like(x)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
            dy = dx
        else:
            raise UsageError(f"unknown tape node {node.kind!r}")
    return gvec


def loss_and_grad(params: ParamVector, model: ModelSpec, batch: Batch):
    loss, tape = forward_loss(params, model, batch)
    return loss, backward(tape)


GradFn = Callable[[np.ndarray], np.ndarray]


def hvp_fd(grad_fn: GradFn, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Central-difference Hessian action around ``theta`` for any gradient map."""
    eps = 1e-4 / max(1.0, float(np.linalg.norm(v)))
    g_plus = grad_fn(theta + eps * v)
    g_minus = grad_fn(theta - eps * v)
    return (g_plus - g_minus) / (2.0 * eps)


def hvp(params: ParamVector, model: ModelSpec, batch: Batch, v: ParamVector) -> ParamVector:
    """Approximate Hessian-vector product of the batch loss at ``params``."""
    if not params.same_manifest(v):
        raise ConfigError("hvp direction has a different manifest than params")

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        _, g = loss_and_grad(params.like(theta), model, batch)
        return g.data

    return params.like(hvp_fd(grad_fn, params.data, v.data))
