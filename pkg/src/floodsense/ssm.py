"""State-space model kernels.

Continuous model ``h' = A h + B x``, ``y = C h (+ D x)``; zero-order-hold
discretization; recurrent and convolutional LTI forms; the selective
(input-dependent) scan with a sequential reference and a Blelloch parallel
prefix scan over the affine maps ``h -> a*h + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .tensor import Tensor

SERIES_THRESHOLD = 1e-8


@dataclass
class ContinuousSsm:
    A: np.ndarray  # (N, N), or (N,) for the diagonal variant
    B: np.ndarray  # (N,)
    C: np.ndarray  # (N,)
    D: float | None = None

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.A) == 1

    @property
    def n(self) -> int:
        return len(self.B)


@dataclass
class DiscreteSsm:
    A_bar: np.ndarray  # (N, N) or (N,) when diagonal
    B_bar: np.ndarray  # (N,)
    C: np.ndarray      # (N,)
    delta: float

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.A_bar) == 1


@dataclass
class SelectiveScanInputs:
    """One channel of a selective scan: per-step ``delta``, ``B``, ``C`` and a shared diagonal ``A``."""

    x: np.ndarray      # (K,)
    delta: np.ndarray  # (K,)
    A: np.ndarray      # (N,)
    B: np.ndarray      # (K, N)
    C: np.ndarray      # (K, N)

    def __post_init__(self):
        K = len(self.x)
        if len(self.delta) != K or len(self.B) != K or len(self.C) != K:
            raise ValueError("per-step arrays must all have length K")
        if np.any(np.asarray(self.delta) <= 0):
            raise ValueError("delta_k must be positive")


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

def zoh_factor(delta, a):
    """``(exp(delta*a) - 1) / a`` elementwise, with the series form near zero."""
    delta = np.asarray(delta)
    a = np.asarray(a)
    da = delta * a
    small = np.abs(da) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, a)
    exact = np.expm1(da) / safe_a
    series = delta * (1.0 + 0.5 * da)
    return np.where(small, series, exact)


def discretize_zoh(m: ContinuousSsm, delta: float) -> DiscreteSsm:
    """Zero-order hold: ``A_bar = exp(dA)``, ``B_bar = (dA)^-1 (exp(dA) - I) dB``."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    B = np.asarray(m.B, dtype=np.float64)
    if m.diagonal:
        a = np.asarray(m.A, dtype=np.float64)
        return DiscreteSsm(np.exp(delta * a), zoh_factor(delta, a) * B, np.asarray(m.C), delta)
    A = np.asarray(m.A, dtype=np.float64)
    n = A.shape[0]
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("singular A: zero-order hold needs an invertible state matrix")
    # exp([[dA, dB], [0, 0]]) carries (dA)^-1 (exp(dA) - I) dB in its top-right column,
    # which avoids forming (exp(dA) - I) with catastrophic cancellation at small delta.
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = delta * A
    aug[:n, n] = delta * B
    e = scipy.linalg.expm(aug)
    return DiscreteSsm(e[:n, :n], e[:n, n].copy(), np.asarray(m.C), delta)


# ---------------------------------------------------------------------------
# LTI forms
# ---------------------------------------------------------------------------

def _apply_a(A_bar, h):
    return A_bar * h if np.ndim(A_bar) == 1 else A_bar @ h


def scan_recurrent(m: DiscreteSsm, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.zeros(len(m.B_bar))
    y = np.empty(len(x))
    for k, xk in enumerate(x):
        h = _apply_a(m.A_bar, h) + m.B_bar * xk
        y[k] = m.C @ h
    return y


def kernel_conv(m: DiscreteSsm, K: int) -> np.ndarray:
    """Impulse response ``(C B, C A B, ..., C A^{K-1} B)``."""
    if K < 1:
        raise ValueError("kernel length must be >= 1")
    out = np.empty(K)
    v = np.array(m.B_bar, dtype=np.float64)
    for k in range(K):
        out[k] = m.C @ v
        v = _apply_a(m.A_bar, v)
    return out


def apply_kernel(x, kbar) -> np.ndarray:
    """Causal convolution ``y_k = sum_{j<=k} kbar_j x_{k-j}``."""
    x = np.asarray(x, dtype=np.float64)
    kbar = np.asarray(kbar, dtype=np.float64)
    return np.convolve(x, kbar)[: len(x)]


# ---------------------------------------------------------------------------
# first-order linear recurrences h_k = a_k h_{k-1} + b_k
# ---------------------------------------------------------------------------

def combine(p, q):
    """Compose affine maps: apply ``p`` then ``q``."""
    a1, b1 = p
    a2, b2 = q
    return a2 * a1, a2 * b1 + b2


def linear_scan_sequential(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    prev = np.zeros(h.shape[1:], dtype=h.dtype)
    for k in range(h.shape[0]):
        prev = a[k] * prev + b[k]
        h[k] = prev
    return np.moveaxis(h, 0, axis)


def linear_scan_parallel(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Blelloch up-sweep/down-sweep over ``combine``; each level is one vectorized pass."""
    a = np.moveaxis(a, axis, 0)
    b = np.moveaxis(b, axis, 0)
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    L = shape[0]
    M = 1 << max(0, (L - 1).bit_length())
    A = np.ones((M,) + shape[1:], dtype=dtype)
    Bv = np.zeros((M,) + shape[1:], dtype=dtype)
    A[:L] = a
    Bv[:L] = b

    step = 1
    while step < M:
        left = slice(step - 1, M, 2 * step)
        right = slice(2 * step - 1, M, 2 * step)
        Bv[right] = A[right] * Bv[left] + Bv[right]
        A[right] = A[right] * A[left]
        step *= 2

    A[M - 1] = 1.0
    Bv[M - 1] = 0.0
    step = M // 2
    while step >= 1:
        left = slice(step - 1, M, 2 * step)
        right = slice(2 * step - 1, M, 2 * step)
        tA = A[left].copy()
        tB = Bv[left].copy()
        A[left] = A[right]
        Bv[left] = Bv[right]
        Bv[right] = tA * Bv[right] + tB
        A[right] = tA * A[right]
        step //= 2

    # exclusive prefix applied to h_{-1} = 0 is Bv; one more step gives the inclusive state
    h = np.broadcast_to(a, shape) * Bv[:L] + b
    return np.moveaxis(h, 0, axis)


def linear_scan(a, b, axis: int = 0, method: str = "parallel") -> np.ndarray:
    if method == "parallel":
        return linear_scan_parallel(a, b, axis)
    if method == "sequential":
        return linear_scan_sequential(a, b, axis)
    raise ValueError(f"unknown scan method {method!r}")


# ---------------------------------------------------------------------------
# selective scan (single channel reference API)
# ---------------------------------------------------------------------------

def _selective_single(s: SelectiveScanInputs, method: str) -> np.ndarray:
    delta = np.asarray(s.delta, dtype=np.float64)[:, None]
    A = np.asarray(s.A, dtype=np.float64)[None, :]
    a = np.exp(delta * A)
    b = zoh_factor(delta, A) * np.asarray(s.B) * np.asarray(s.x)[:, None]
    h = linear_scan(a, b, axis=0, method=method)
    return np.einsum("kn,kn->k", h, np.asarray(s.C))


def selective_scan_sequential(s: SelectiveScanInputs) -> np.ndarray:
    return _selective_single(s, "sequential")


def selective_scan_parallel(s: SelectiveScanInputs) -> np.ndarray:
    return _selective_single(s, "parallel")


# ---------------------------------------------------------------------------
# differentiable batched selective scan
# ---------------------------------------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   D: Tensor | None = None, method: str = "fused") -> Tensor:
    """Batched selective scan on the tape.

    Shapes: ``u``, ``delta``: ``(..., L, Dm)``; ``A``: broadcastable to
    ``(..., Dm, N)``; ``B``, ``C``: ``(..., L, N)``; ``D``: broadcastable to
    ``(..., Dm)``. Returns ``y`` of shape ``(..., L, Dm)``.

    ``method`` is ``"fused"`` (compiled kernel, states recomputed in the
    backward pass), ``"parallel"`` (numpy Blelloch scan) or ``"sequential"``.
    """
    if (delta.data <= 0).any():
        raise ValueError("delta must be positive")
    if method == "fused":
        return _selective_scan_fused(u, delta, A, B, C, D)
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data
    dl = dd[..., None]                 # (..., L, Dm, 1)
    Al = Ad[..., None, :, :]           # (..., 1, Dm, N)
    da = dl * Al
    abar = np.exp(da)
    small = np.abs(da) < SERIES_THRESHOLD
    safe_a = np.where(small, 1.0, Al)
    f = np.where(small, dl * (1.0 + 0.5 * da), np.expm1(da) / safe_a)
    Bl = Bd[..., :, None, :]           # (..., L, 1, N)
    bbar = f * Bl
    xin = bbar * ud[..., None]
    h = linear_scan(abar, xin, axis=-3, method=method)
    y = np.einsum("...ldn,...ln->...ld", h, Cd)
    if D is not None:
        y = y + D.data * ud
    parents = (u, delta, A, B, C) + ((D,) if D is not None else ())

    def backward(gy):
        gC = np.einsum("...ld,...ldn->...ln", gy, h)
        gh = gy[..., None] * Cd[..., :, None, :]
        # reverse recurrence G_k = gh_k + abar_{k+1} G_{k+1}
        a_next = np.concatenate([abar[..., 1:, :, :], np.ones_like(abar[..., :1, :, :])], axis=-3)
        a_next = np.broadcast_to(a_next, gh.shape)
        G = np.flip(linear_scan(np.flip(a_next, -3), np.flip(gh, -3), axis=-3, method=method), -3)
        h_prev = np.concatenate([np.zeros_like(h[..., :1, :, :]), h[..., :-1, :, :]], axis=-3)
        g_abar = G * h_prev
        gu = np.einsum("...ldn,...ldn->...ld", G, np.broadcast_to(bbar, G.shape))
        gbbar = G * ud[..., None]
        gB = np.einsum("...ldn,...ldn->...ln", gbbar, np.broadcast_to(f, G.shape))
        gf = gbbar * Bl
        df_ddelta = np.where(small, 1.0 + da, abar)
        df_dA = np.where(
            np.abs(da) < 1e-4,
            dl * dl * (0.5 + da / 3.0),
            (da * abar - np.expm1(da)) / (safe_a * safe_a),
        )
        gdelta = (g_abar * abar * Al + gf * df_ddelta).sum(axis=-1)
        gA_full = g_abar * abar * dl + gf * df_dA
        gA = T.unbroadcast(gA_full.sum(axis=-3), Ad.shape)
        if D is None:
            return gu, gdelta, gA, gB, gC
        return gu + gy * D.data, gdelta, gA, gB, gC, T.unbroadcast(gy * ud, D.shape)

    return T._make(y, parents, backward, "selective_scan")



def _selective_scan_fused(u, delta, A, B, C, D):
    from ._kernels import scan_bwd, scan_fwd

    lead = u.shape[:-2]
    L, Dm = u.shape[-2:]
    N = B.shape[-1]
    bt = int(np.prod(lead)) if lead else 1
    dtype = u.dtype

    def flat(arr, tail):
        return np.ascontiguousarray(np.broadcast_to(arr, lead + tail).reshape((bt,) + tail), dtype=dtype)

    uf, df = flat(u.data, (L, Dm)), flat(delta.data, (L, Dm))
    Af, Bf, Cf = flat(A.data, (Dm, N)), flat(B.data, (L, N)), flat(C.data, (L, N))
    y = scan_fwd(uf, df, Af, Bf, Cf).reshape(lead + (L, Dm))
    if D is not None:
        y = y + D.data * u.data
    parents = (u, delta, A, B, C) + ((D,) if D is not None else ())

    def backward(gy):
        gyf = flat(gy, (L, Dm))
        gu, gd, gA, gB, gC = scan_bwd(uf, df, Af, Bf, Cf, gyf)
        gu = gu.reshape(lead + (L, Dm))
        grads = (
            gu if D is None else gu + gy * D.data,
            gd.reshape(lead + (L, Dm)),
            T.unbroadcast(gA.reshape(lead + (Dm, N)), A.shape),
            T.unbroadcast(gB.reshape(lead + (L, N)), B.shape),
            T.unbroadcast(gC.reshape(lead + (L, N)), C.shape),
        )
        if D is None:
            return grads
        return grads + (T.unbroadcast(gy * u.data, D.shape),)

    return T._make(y.astype(dtype, copy=False), parents, backward, "selective_scan")
