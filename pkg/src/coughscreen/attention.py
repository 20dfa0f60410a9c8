"""Contextual attention over the spatial positions of a CNN feature map.

Each position vector ``h_t`` is projected as ``u_t = tanh(W h_t + b)`` and
scored against a learned context vector ``u_c``; a softmax over positions
turns the scores into weights ``alpha``. In the default ``"scale"`` mode every
position is rescaled by its weight, so the map keeps its ``[T, d]`` shape and
the classifier head sees the reweighted features. ``"sum"`` mode collapses
positions into a single weighted average instead.
"""

from __future__ import annotations

import math

import numpy as np

from .nn import Module, Parameter, Tensor, kaiming_uniform
from .nn import functional as F

MODES = ("scale", "sum")


def feature_map_to_positions(x: Tensor) -> Tensor:
    """``[N, C, H, W]`` -> ``[N, H*W, C]`` (row-major positions)."""
    n, c, h, w = x.shape
    return F.reshape(F.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def contextual_attention(h: Tensor, W: Tensor, b: Tensor, u_c: Tensor, mode: str = "scale") -> tuple[Tensor, Tensor]:
    """Attention pooling of ``h`` (``[N, T, d]``).

    Returns ``(h_tilde, alpha)`` with ``alpha`` of shape ``[N, T]``. In
    ``"scale"`` mode ``h_tilde`` is ``[N, T, d]``; in ``"sum"`` mode ``[N, d]``.
    """
    if h.ndim != 3:
        raise ValueError(f"attention expects [N, T, d], got {h.shape}")
    d = h.shape[2]
    if W.shape != (d, d) or b.shape != (d,) or u_c.shape != (d,):
        raise ValueError(f"attention parameter shapes {W.shape}, {b.shape}, {u_c.shape} do not match d={d}")
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    u = F.tanh(F.add(F.matmul(h, F.transpose(W, (1, 0))), b))
    scores = F.matmul(u, u_c)  # [N, T]
    alpha = F.softmax(scores, axis=1)
    weighted = F.mul(h, F.reshape(alpha, alpha.shape + (1,)))
    if mode == "sum":
        n, t, _ = h.shape
        ones = Tensor(np.ones(t, dtype=h.dtype))
        return F.matmul(F.transpose(weighted, (0, 2, 1)), ones), alpha
    return weighted, alpha


class ContextualAttention(Module):
    def __init__(self, dim: int, rng: np.random.Generator, mode: str = "scale", dtype=np.float32):
        if mode not in MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        self.W = Parameter(kaiming_uniform(rng, (dim, dim), dim), dtype)
        self.b = Parameter(np.zeros(dim), dtype)
        bound = 1.0 / math.sqrt(dim)
        self.u_c = Parameter(rng.uniform(-bound, bound, size=dim), dtype)
        self.mode = mode

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return contextual_attention(h, self.W, self.b, self.u_c, self.mode)
