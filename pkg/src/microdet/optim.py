"""Hybrid optimizer: orthogonalised momentum updates for matrix-shaped
parameters, plain momentum SGD for one-dimensional ones.

Conv kernels [K, C, kh, kw] are flattened to [K, C*kh*kw] for the
orthogonalisation and the update is rescaled by sqrt(max(m, k)) so its
RMS is comparable across layer shapes.
"""

from __future__ import annotations

import math

import numpy as np

from microdet.tensor import Tensor

#: quintic iteration coefficients (steep at zero, oscillates in ~[0.7, 1.3])
NS_COEFFS = (3.4445, -4.7750, 2.0315)


def newton_schulz(g: np.ndarray, steps: int = 5,
                  coeffs: tuple[float, float, float] = NS_COEFFS) -> np.ndarray:
    """Approximate the orthogonal factor U V^T of ``g`` by polynomial iteration.

    X0 = G / ||G||_F, then X <- a X + (b (X X^T) + c (X X^T)^2) X.  The
    iteration runs in float64 on the wide orientation (rows <= cols) so the
    result is scale-exact: newton_schulz(c*G) == newton_schulz(G) for c > 0.
    A zero matrix is returned unchanged (no update direction).
    """
    if g.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {g.shape}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    a, b, c = coeffs
    x = g.astype(np.float64)
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return np.zeros_like(g)
    x = x / norm
    for _ in range(steps):
        xxt = x @ x.T
        x = a * x + (b * xxt + c * (xxt @ xxt)) @ x
    if transposed:
        x = x.T
    return x.astype(g.dtype)


class MuonSGD:
    """Decomposed update: Newton-Schulz path for rank >= 2 parameters,
    momentum SGD for rank <= 1 (biases, norm scales).

    ``backbone_only`` restricts the matrix path to parameters whose name
    starts with ``backbone.``; with ``muon_enabled=False`` every parameter
    takes the SGD path.
    """

    def __init__(self, named_params: dict[str, Tensor],
                 lr_muon: float = 0.02, lr_sgd: float = 0.1,
                 momentum: float = 0.9, ns_steps: int = 5,
                 ns_coeffs: tuple[float, float, float] = NS_COEFFS,
                 muon_enabled: bool = True, backbone_only: bool = False):
        self.params = dict(named_params)
        self.lr_muon = lr_muon
        self.lr_sgd = lr_sgd
        self.momentum = momentum
        self.ns_steps = ns_steps
        self.ns_coeffs = ns_coeffs
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.matrix_path: list[str] = []
        self.sgd_path: list[str] = []
        for name, p in self.params.items():
            matrix = (muon_enabled and p.data.ndim >= 2
                      and (not backbone_only or name.startswith("backbone.")))
            (self.matrix_path if matrix else self.sgd_path).append(name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr_scale: float = 1.0) -> None:
        """Apply one update from accumulated gradients (momentum first)."""
        for name in self.matrix_path:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            mat = buf.reshape(buf.shape[0], -1)
            direction = newton_schulz(mat, self.ns_steps, self.ns_coeffs)
            scale = math.sqrt(max(mat.shape))
            p.data = p.data - (self.lr_muon * lr_scale * scale) * direction.reshape(p.data.shape)
        for name in self.sgd_path:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data = p.data - (self.lr_sgd * lr_scale) * buf
