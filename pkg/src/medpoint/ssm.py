"""Selective state-space scan and the vanilla / group Point-SSM blocks.

Shape conventions inside the blocks: sequences are stacked as
``(R, G, T, E)`` where R indexes independent sequences, G the parameter
group (one per scan strategy), T time and E the inner channel width. The
SSM state has S entries per channel and A is stored per group as (G, E, S).
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .nn import tensor as T
from .nn.layers import GroupNorm, Linear, Module, default_groups, uniform_fan_in
from .nn.tensor import Tensor

SERIES_SWITCH = 1e-6


# ---------------------------------------------------------------------------
# Zero-order hold
# ---------------------------------------------------------------------------


def zoh_factor(a, delta):
    """(exp(a*delta) - 1) / a, with the a -> 0 limit delta handled by series."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    u = a * delta
    small = np.abs(u) < SERIES_SWITCH
    safe_a = np.where(small, 1.0, a)
    closed = np.expm1(u) / safe_a
    series = delta * (1.0 + u / 2.0 + u * u / 6.0)
    return np.where(small, series, closed)


def zoh_discretize(a, b, delta):
    """Elementwise ZOH: returns (a_bar, b_bar) = (exp(a*delta), (exp(a*delta)-1)/a * b)."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("step size must be non-negative")
    a_bar = np.exp(np.asarray(a, dtype=np.float64) * delta)
    return a_bar, zoh_factor(a, delta) * np.asarray(b, dtype=np.float64)


# ---------------------------------------------------------------------------
# Reference scan (normative semantics) and compiled kernels
# ---------------------------------------------------------------------------


def ssm_scan_reference(x, delta, b, c, a):
    """Plain sequential recurrence, one timestep at a time.

    x, delta: (..., T, E); b, c: (..., T, S); a: (E, S) or broadcastable to
    (..., E, S). Returns y with the shape of x. h starts at zero.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    steps = x.shape[-2]
    h = np.zeros(x.shape[:-2] + a.shape[-2:])
    y = np.empty_like(x)
    for t in range(steps):
        d = delta[..., t, :, None]
        a_bar = np.exp(a * d)
        b_bar = zoh_factor(a, d) * b[..., t, None, :]
        h = a_bar * h + b_bar * x[..., t, :, None]
        y[..., t, :] = (h * c[..., t, None, :]).sum(axis=-1)
    return y


@numba.njit(cache=True, inline="always", error_model="numpy")
def _phi(a, d, a_bar):
    u = a * d
    if abs(u) < SERIES_SWITCH:
        return d * (1.0 + u / 2.0 + u * u / 6.0)
    if abs(u) < 1e-3:
        return math.expm1(u) / a
    # (a_bar - 1) costs at most eps/|u| ~ 1e-13 relative accuracy here
    return (a_bar - 1.0) / a


@numba.njit(cache=True, inline="always", error_model="numpy")
def _dphi_da(a, d, a_bar, phi):
    u = a * d
    if abs(u) < 1e-2:
        return d * d * (0.5 + u * (1.0 / 3.0 + u * (0.125 + u * (1.0 / 30.0 + u / 144.0))))
    return (d * a_bar - phi) / a


@numba.njit(cache=True, error_model="numpy")
def _scan_fwd(x, dt, bm, cm, a, hs, abar):
    """Fills hs (states) and abar (exp(a*dt)) for the backward pass; returns y."""
    n_r, n_g, n_t, n_e = x.shape
    n_s = a.shape[2]
    y = np.empty(x.shape, dtype=x.dtype)
    for r in range(n_r):
        for g in range(n_g):
            for t in range(n_t):
                for e in range(n_e):
                    d = dt[r, g, t, e]
                    xv = x[r, g, t, e]
                    acc = 0.0
                    for s in range(n_s):
                        av = a[g, e, s]
                        ab = math.exp(av * d)
                        prev = hs[r, g, t - 1, e, s] if t > 0 else 0.0
                        hv = ab * prev + _phi(av, d, ab) * bm[r, g, t, s] * xv
                        hs[r, g, t, e, s] = hv
                        abar[r, g, t, e, s] = ab
                        acc += cm[r, g, t, s] * hv
                    y[r, g, t, e] = acc
    return y


@numba.njit(cache=True, error_model="numpy")
def _scan_bwd(x, dt, bm, cm, a, hs, abar, gy):
    n_r, n_g, n_t, n_e = x.shape
    n_s = a.shape[2]
    dx = np.empty(x.shape, dtype=x.dtype)
    ddt = np.empty(x.shape, dtype=x.dtype)
    db = np.zeros(bm.shape, dtype=x.dtype)
    dc = np.zeros(cm.shape, dtype=x.dtype)
    da = np.zeros(a.shape, dtype=np.float64)
    dh = np.empty((n_e, n_s))
    for r in range(n_r):
        for g in range(n_g):
            dh[:] = 0.0
            for t in range(n_t - 1, -1, -1):
                for e in range(n_e):
                    d = dt[r, g, t, e]
                    xv = x[r, g, t, e]
                    gyv = gy[r, g, t, e]
                    dx_acc = 0.0
                    ddt_acc = 0.0
                    for s in range(n_s):
                        av = a[g, e, s]
                        ab = abar[r, g, t, e, s]
                        ph = _phi(av, d, ab)
                        bv = bm[r, g, t, s]
                        h_prev = hs[r, g, t - 1, e, s] if t > 0 else 0.0
                        dc[r, g, t, s] += gyv * hs[r, g, t, e, s]
                        dhv = dh[e, s] + gyv * cm[r, g, t, s]
                        d_abar = dhv * h_prev
                        d_phi = dhv * bv * xv
                        db[r, g, t, s] += dhv * ph * xv
                        dx_acc += dhv * ph * bv
                        ddt_acc += (d_abar * av + d_phi) * ab
                        da[g, e, s] += d_abar * d * ab + d_phi * _dphi_da(av, d, ab, ph)
                        dh[e, s] = dhv * ab
                    dx[r, g, t, e] = dx_acc
                    ddt[r, g, t, e] = ddt_acc
    return dx, ddt, db, dc, da


def _as4d(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def ssm_scan(x, delta, b, c, a) -> np.ndarray:
    """Compiled selective scan with the semantics of :func:`ssm_scan_reference`.

    Accepts (T, E), (R, T, E) or (R, G, T, E) sequences; ``a`` is (E, S) or
    (G, E, S).
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    a = np.asarray(a, dtype=np.float64)
    a3 = a[None] if a.ndim == 2 else a
    x4 = np.ascontiguousarray(_as4d(x))
    d4 = np.ascontiguousarray(_as4d(np.asarray(delta, dtype=np.float64)))
    b4 = np.ascontiguousarray(_as4d(np.asarray(b, dtype=np.float64)))
    c4 = np.ascontiguousarray(_as4d(np.asarray(c, dtype=np.float64)))
    hs = np.empty(x4.shape + (a3.shape[2],))
    abar = np.empty_like(hs)
    return _scan_fwd(x4, d4, b4, c4, np.ascontiguousarray(a3), hs, abar).reshape(shape)


def selective_scan(x: Tensor, delta: Tensor, b: Tensor, c: Tensor, a: Tensor) -> Tensor:
    """Differentiable scan over (R, G, T, E) sequences with per-group A (G, E, S)."""
    if x.ndim != 4 or a.ndim != 3:
        raise ValueError("selective_scan expects x (R, G, T, E) and A (G, E, S)")
    if x.shape[1] != a.shape[0] or x.shape[3] != a.shape[1]:
        raise ValueError(f"A shape {a.shape} does not match sequences {x.shape}")
    dtype = x.data.dtype
    xd = np.ascontiguousarray(x.data)
    dd = np.ascontiguousarray(delta.data, dtype=dtype)
    bd = np.ascontiguousarray(b.data, dtype=dtype)
    cd = np.ascontiguousarray(c.data, dtype=dtype)
    ad = np.ascontiguousarray(a.data, dtype=dtype)
    hs = np.empty(xd.shape + (ad.shape[2],), dtype=dtype)
    abar = np.empty_like(hs)
    y = _scan_fwd(xd, dd, bd, cd, ad, hs, abar)

    def bw(g):
        gd = np.ascontiguousarray(g, dtype=dtype)
        dx, ddt, db, dc, da = _scan_bwd(xd, dd, bd, cd, ad, hs, abar, gd)
        return dx, ddt, db, dc, da.astype(dtype)

    return T.custom_op(y, (x, delta, b, c, a), bw)


# ---------------------------------------------------------------------------
# Parameters and blocks
# ---------------------------------------------------------------------------


def _inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """G stacked groups of selective-SSM parameters over width E and state S.

    A is stored as ``log(-A)`` so it stays negative under training and is
    initialised to ``A[e, s] = -(s + 1)``.
    """

    def __init__(self, width: int, state: int, rng: np.random.Generator, groups: int = 1,
                 dt_range=(1e-3, 1e-1)):
        if state < 1:
            raise ValueError("state size must be >= 1")
        self.width, self.state, self.groups = width, state, groups
        ramp = np.log(np.arange(1, state + 1, dtype=np.float64))
        self.a_log = Tensor(np.broadcast_to(ramp, (groups, width, state)).copy(), requires_grad=True)
        self.proj_b = uniform_fan_in(rng, width, (groups, width, state))
        self.proj_c = uniform_fan_in(rng, width, (groups, width, state))
        self.proj_dt = uniform_fan_in(rng, width, (groups, width, width))
        dt0 = rng.uniform(dt_range[0], dt_range[1], size=(groups, 1, width))
        self.proj_dt_bias = Tensor(_inverse_softplus(dt0), requires_grad=True)

    def A(self) -> Tensor:
        return T.neg(T.exp(self.a_log))


def selective_params(x: Tensor, params: SsmParams):
    """Input-dependent (delta, B, C) for sequences x of shape (R, G, T, E)."""
    delta = T.softplus(T.add(T.matmul(x, params.proj_dt), params.proj_dt_bias))
    return delta, T.matmul(x, params.proj_b), T.matmul(x, params.proj_c)


class PSSMBlock(Module):
    """Point-SSM block.

    ``out = seq + out_proj(merge_g(scan_g(norm(in_proj_g(seq)))) * silu(gate_proj(norm(seq))))``

    With ``groups == 1`` and no scans this is the vanilla block over already
    serialized sequences. With several groups each one reads the features in
    its own scan order, the branch outputs are put back in the original row
    order and summed. Gate and output projections are shared by all groups.
    """

    def __init__(self, channels: int, rng: np.random.Generator, groups: int = 1,
                 expand: int = 2, state: int = 16):
        inner = expand * channels
        self.channels, self.inner, self.groups = channels, inner, groups
        self.in_proj = uniform_fan_in(rng, channels, (groups, channels, inner))
        self.in_proj_bias = uniform_fan_in(rng, channels, (groups, 1, inner))
        self.in_norm_groups = default_groups(inner)
        self.in_norm_gamma = Tensor(np.ones((groups, 1, inner)), requires_grad=True)
        self.in_norm_beta = Tensor(np.zeros((groups, 1, inner)), requires_grad=True)
        self.ssm = SsmParams(inner, state, rng, groups=groups)
        self.gate_norm = GroupNorm(channels)
        self.gate_proj = Linear(channels, inner, rng)
        self.out_proj = Linear(inner, channels, rng)

    def branch_inputs(self, seq: Tensor) -> Tensor:
        """in_proj + norm for every group: (R, T, C) -> (R, G, T, E)."""
        u = T.add(T.matmul(T.expand_dims(seq, 1), self.in_proj), self.in_proj_bias)
        return T.group_norm(u, self.in_norm_groups, self.in_norm_gamma, self.in_norm_beta)

    def merged_branches(self, seq: Tensor, orders=None) -> Tensor:
        """Sum over groups of the restored SSM branch outputs, (R, T, E)."""
        x = self.branch_inputs(seq)
        if orders is not None:
            inverse = np.argsort(orders, axis=-1)
            x = T.permute_rows(x, orders, inverse)
        delta, b, c = selective_params(x, self.ssm)
        y = selective_scan(x, delta, b, c, self.ssm.A())
        if orders is not None:
            y = T.permute_rows(y, inverse, orders)
        return T.sum_(y, axis=1)

    def forward(self, seq: Tensor, orders=None) -> Tensor:
        if seq.shape[-1] != self.channels:
            raise ValueError(f"block expects {self.channels} channels, got {seq.shape[-1]}")
        if seq.ndim != 3:
            raise ValueError("block input must be (R, T, C)")
        if orders is not None:
            orders = np.asarray(orders)
            if orders.shape != (seq.shape[0], self.groups, seq.shape[1]):
                raise ValueError(
                    f"scan orders {orders.shape} do not match (R={seq.shape[0]}, "
                    f"G={self.groups}, N={seq.shape[1]})"
                )
        elif self.groups != 1:
            raise ValueError("a group block needs one scan order per group")
        merged = self.merged_branches(seq, orders)
        gate = T.silu(self.gate_proj(self.gate_norm(seq)))
        return T.add(seq, self.out_proj(T.mul(merged, gate)))


def pssm_vanilla_forward(seq, block: PSSMBlock) -> Tensor:
    """Vanilla block on sequences already in scan order: (T, C) or (R, T, C)."""
    seq = T.as_tensor(seq)
    if block.groups != 1:
        raise ValueError("vanilla forward needs a single-group block")
    if seq.ndim == 2:
        return T.reshape(block(T.expand_dims(seq, 0)), seq.shape)
    return block(seq)


def pssm_group_forward(features, scans, block: PSSMBlock) -> Tensor:
    """Group block on unordered rows: (N, C) or (R, N, C) features.

    ``scans`` is a list of G :class:`~medpoint.geometry.ScanIndex` (or integer
    arrays) for a single point set, or an (R, G, N) array of orders.
    """
    features = T.as_tensor(features)
    single = features.ndim == 2
    if single:
        features = T.expand_dims(features, 0)
        orders = np.stack([np.asarray(getattr(s, "order", s)) for s in scans])[None]
    else:
        orders = np.asarray(scans)
    n = features.shape[1]
    if orders.shape[-1] != n:
        raise ValueError(f"scan length {orders.shape[-1]} does not match {n} rows")
    out = block(features, orders)
    return T.reshape(out, out.shape[1:]) if single else out
