"""2-D selective scan (SS2D) and the visual state-space block.

Token grids are channels-last arrays ``(..., H, W, C)``.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, const_param, uniform_param
from .ssm import selective_scan
from .tensor import Tensor

N_DIRECTIONS = 4


class _ScanCounter:
    def __init__(self):
        self.count = 0


SCAN_COUNTER = _ScanCounter()


@contextlib.contextmanager
def count_scans():
    """Yield a counter of directional scans executed inside the block."""
    start = SCAN_COUNTER.count
    box = _ScanCounter()
    try:
        yield box
    finally:
        box.count = SCAN_COUNTER.count - start


@lru_cache(maxsize=None)
def scan_paths(H: int, W: int) -> np.ndarray:
    """Token-index permutations ``(4, H*W)``: row-major, reversed, column-major, reversed."""
    row = np.arange(H * W)
    col = row.reshape(H, W).T.ravel()
    paths = np.stack([row, row[::-1], col, col[::-1]])
    paths.setflags(write=False)
    return paths


@lru_cache(maxsize=None)
def inverse_paths(H: int, W: int) -> np.ndarray:
    inv = np.argsort(scan_paths(H, W), axis=1)
    inv.setflags(write=False)
    return inv


def _scan_np(g: np.ndarray) -> np.ndarray:
    *lead, H, W, C = g.shape
    flat = g.reshape(*lead, H * W, C)
    return np.take(flat, scan_paths(H, W), axis=-2)


def _merge_np(seqs: np.ndarray, H: int, W: int) -> np.ndarray:
    *lead, _, L, C = seqs.shape
    inv = inverse_paths(H, W)
    out = np.zeros((*lead, L, C), dtype=seqs.dtype)
    for d in range(N_DIRECTIONS):
        out += np.take(seqs[..., d, :, :], inv[d], axis=-2)
    return out.reshape(*lead, H, W, C)


def cross_scan(g: Tensor) -> Tensor:
    """``(..., H, W, C) -> (..., 4, H*W, C)``; the four directional token orders."""
    H, W = g.shape[-3:-1]
    return T._make(_scan_np(g.data), (g,), lambda gr: (_merge_np(gr, H, W),), "cross_scan")


def cross_merge(seqs: Tensor, H: int, W: int) -> Tensor:
    """Inverse-permute each direction back to grid order and sum the four grids."""
    if seqs.shape[-3] != N_DIRECTIONS or seqs.shape[-2] != H * W:
        raise ValueError(f"expected (..., 4, {H * W}, C), got {seqs.shape}")
    return T._make(_merge_np(seqs.data, H, W), (seqs,), lambda gr: (_scan_np(gr),), "cross_merge")


class SS2D(Module):
    """Four independent selective-scan parameter sets, one per scan direction."""

    def __init__(self, rng, dim: int, d_state: int = 8, dtype=np.float64):
        nd = N_DIRECTIONS
        self.dim = dim
        self.d_state = d_state
        self.dt_rank = max(1, -(-dim // 16))
        self.w_delta_down = uniform_param(rng, (nd, dim, self.dt_rank), dim, dtype)
        self.w_delta_up = uniform_param(rng, (nd, self.dt_rank, dim), self.dt_rank, dtype)
        # bias so softplus(bias) spans roughly [1e-3, 1e-1] at init
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(nd, 1, dim)))
        self.b_delta = Tensor((dt + np.log(-np.expm1(-dt))).astype(dtype), requires_grad=True)
        self.w_B = uniform_param(rng, (nd, dim, d_state), dim, dtype)
        self.w_C = uniform_param(rng, (nd, dim, d_state), dim, dtype)
        a_init = np.broadcast_to(np.arange(1, d_state + 1, dtype=np.float64), (nd, dim, d_state))
        self.a_log = Tensor(np.log(a_init).astype(dtype), requires_grad=True)
        self.skip = const_param(1.0, (nd, 1, dim), dtype)

    def __call__(self, x: Tensor, use_skip: bool = True, method: str = "fused") -> Tensor:
        H, W = x.shape[-3:-1]
        seqs = cross_scan(x)
        delta = T.softplus(T.matmul(T.matmul(seqs, self.w_delta_down), self.w_delta_up) + self.b_delta)
        B = T.matmul(seqs, self.w_B)
        C = T.matmul(seqs, self.w_C)
        A = -T.exp(self.a_log)
        y = selective_scan(seqs, delta, A, B, C, self.skip if use_skip else None, method)
        SCAN_COUNTER.count += N_DIRECTIONS
        return cross_merge(y, H, W)


class DWConv(Module):
    def __init__(self, rng, dim: int, k: int = 3, dtype=np.float64):
        self.kernel = uniform_param(rng, (dim, k, k), k * k, dtype)
        self.bias = uniform_param(rng, (dim,), k * k, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        nl = x.ndim - 3
        lead = tuple(range(nl))
        chw = T.transpose(x, lead + (nl + 2, nl, nl + 1))
        y = T.depthwise_conv2d(chw, self.kernel)
        return T.transpose(y, lead + (nl + 1, nl + 2, nl)) + self.bias


class VSSBlock(Module):
    """Gated residual block: ``g + out_proj(LN(SS2D(SiLU(DWConv(in_proj(LN g))))) * SiLU(gate(LN g)))``."""

    def __init__(self, rng, dim: int, expand: int = 2, d_state: int = 8, dtype=np.float64):
        inner = expand * dim
        self.norm = LayerNorm(dim, dtype)
        self.in_proj = Linear(rng, dim, inner, dtype=dtype)
        self.gate_proj = Linear(rng, dim, inner, dtype=dtype)
        self.conv = DWConv(rng, inner, 3, dtype)
        self.ss2d = SS2D(rng, inner, d_state, dtype)
        self.out_norm = LayerNorm(inner, dtype)
        self.out_proj = Linear(rng, inner, dim, dtype=dtype)

    def __call__(self, g: Tensor) -> Tensor:
        z = self.norm(g)
        main = T.silu(self.conv(self.in_proj(z)))
        main = self.out_norm(self.ss2d(main))
        gate = T.silu(self.gate_proj(z))
        return g + self.out_proj(main * gate)
