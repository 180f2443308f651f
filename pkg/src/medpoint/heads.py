"""Task decoders: class scores, folding-based completion, and per-point segmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .nn import tensor as T
from .nn.layers import LEAKY_SLOPE, GroupNorm, Linear, Module, SharedMLP, uniform_fan_in
from .nn.tensor import Tensor

INTERP_EPS = 1e-8


@dataclass
class FoldingConfig:
    grid: int = 32
    widths: tuple = (256, 128, 3)
    patches: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.grid < 2:
            raise ValueError("grid side must be >= 2")
        if self.widths[-1] != 3:
            raise ValueError("fold MLPs must end in 3 coordinates")

    @property
    def n_points(self) -> int:
        return self.patches * self.grid * self.grid


@dataclass
class SegmentationHeadConfig:
    classes: int = 2
    k: int = 3
    widths: tuple | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("interpolation needs k >= 1")
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)


class ClassifierHead(Module):
    """z -> Linear(C_z/2) -> GroupNorm -> LeakyReLU -> Linear(K) logits."""

    def __init__(self, latent: int, classes: int, rng):
        self.mlp = SharedMLP([latent, latent // 2, classes], rng)

    def forward(self, z):
        return self.mlp(z)


def classify(z, head: ClassifierHead) -> Tensor:
    return head(T.as_tensor(z))


def square_grid(side: int) -> np.ndarray:
    """Uniform side x side lattice over [-1, 1]^2, row-major."""
    u = np.linspace(-1.0, 1.0, side)
    gx, gy = np.meshgrid(u, u, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


class _Fold(Module):
    """MLP(concat(points, z)) with the z part of the first layer computed once per cloud."""

    def __init__(self, cin: int, latent: int, widths, rng):
        first = widths[0]
        fan = cin + latent
        # each input block is scaled by its own fan-in so the few grid or point
        # coordinates are not swamped by the wide, per-cloud-constant latent
        self.w_points = uniform_fan_in(rng, cin, (cin, first))
        self.w_latent = uniform_fan_in(rng, latent, (latent, first))
        self.bias = uniform_fan_in(rng, fan, (first,))
        self.norm = GroupNorm(first)
        self.rest = SharedMLP(list(widths), rng)

    def forward(self, points, z):
        # points (B or 1, P, cin), z (B, C_z)
        h = T.add(T.matmul(points, self.w_points), T.expand_dims(T.matmul(z, self.w_latent), 1))
        h = T.leaky_relu(self.norm(T.add(h, self.bias)), LEAKY_SLOPE)
        return self.rest(h)


class FoldingDecoder(Module):
    def __init__(self, latent: int, cfg: FoldingConfig, rng):
        self.cfg = cfg
        self.grid = square_grid(cfg.grid)
        self.fold1 = [_Fold(2, latent, cfg.widths, rng) for _ in range(cfg.patches)]
        self.fold2 = [_Fold(3, latent, cfg.widths, rng) for _ in range(cfg.patches)]

    def forward(self, z):
        z = T.as_tensor(z)
        if z.ndim == 1:
            z = T.expand_dims(z, 0)
        grid = Tensor(self.grid[None].astype(z.data.dtype))
        outs = []
        for f1, f2 in zip(self.fold1, self.fold2):
            p1 = f1(grid, z)
            outs.append(f2(p1, z))
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)


def fold_decode(z, decoder: FoldingDecoder) -> Tensor:
    return decoder(z)


def interpolation_weights(query_coords, ref_coords, k: int):
    """Inverse-distance weights over the k metric nearest neighbours.

    Returns (indices, weights) with shapes (Q, k); each weight row sums to 1.
    """
    grp = geometry.knn_query(query_coords, ref_coords, k)
    inv = 1.0 / (grp.distances + INTERP_EPS)
    return grp.indices, inv / inv.sum(axis=1, keepdims=True)


def interpolate_features(query_coords, ref_coords, ref_feats, k: int = 3):
    """Distance-weighted feature transfer from a reference set onto query points.

    Works on single sets ((Q,3), (N,3), (N,C)) or batches ((B,Q,3), (B,N,3),
    (B,N,C)); ``ref_feats`` may be a Tensor, in which case the result is too.
    """
    q = np.asarray(query_coords)
    r = np.asarray(ref_coords)
    single = q.ndim == 2
    if single:
        q, r = q[None], r[None]
    if k > r.shape[1]:
        raise ValueError(f"k={k} exceeds the {r.shape[1]} reference points")
    idx = np.empty(q.shape[:2] + (k,), dtype=np.int64)
    w = np.empty(q.shape[:2] + (k,))
    for b in range(q.shape[0]):
        idx[b], w[b] = interpolation_weights(q[b], r[b], k)
    is_tensor = isinstance(ref_feats, Tensor)
    feats = ref_feats if is_tensor else Tensor(np.asarray(ref_feats, dtype=np.float64))
    if single:
        feats = T.expand_dims(feats, 0)
    wt = Tensor(w[..., None].astype(feats.data.dtype))
    out = T.sum_(T.mul(T.gather(feats, idx), wt), axis=2)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out if is_tensor else out.data


class SegmentationHead(Module):
    """Feature propagation from the coarsest level back to the input points."""

    def __init__(self, channels, latent: int, cfg: SegmentationHeadConfig, rng):
        self.cfg = cfg
        levels = len(channels)
        widths = cfg.widths or tuple(channels)
        if len(widths) != levels:
            raise ValueError("decoder widths need one entry per encoder level")
        feat_w = (channels[0],) + tuple(channels)  # f_0 .. f_M
        out_w = (widths[0],) + tuple(widths)  # f̂_0 .. f̂_M
        self.mlps = [None] * (levels + 1)
        self.mlps[levels] = SharedMLP([feat_w[levels] + latent, out_w[levels]], rng, final_act=True)
        for i in range(levels - 1, -1, -1):
            self.mlps[i] = SharedMLP([feat_w[i] + out_w[i + 1], out_w[i]], rng, final_act=True)
        self.classifier = Linear(out_w[0], cfg.classes, rng)

    def forward(self, hierarchy) -> Tensor:
        levels = hierarchy.levels
        depth = len(self.mlps) - 1
        if len(levels) != depth + 1 or hierarchy.z is None:
            raise RuntimeError(
                f"segmentation needs {depth + 1} retained levels and z, got {len(levels)}"
            )
        top = levels[depth].features
        zb = T.broadcast_to(T.expand_dims(hierarchy.z, 1), top.shape[:2] + (hierarchy.z.shape[-1],))
        dec = self.mlps[depth](T.concat([top, zb], axis=-1))
        for i in range(depth - 1, -1, -1):
            interp = interpolate_features(levels[i].coords, levels[i + 1].coords, dec, self.cfg.k)
            dec = self.mlps[i](T.concat([levels[i].features, interp], axis=-1))
        return self.classifier(dec)


def propagate_and_segment(hierarchy, head: SegmentationHead) -> Tensor:
    return head(hierarchy)
