"""Hierarchical point-SSM encoder.

Each level subsamples the previous one with FPS in metric space, groups
neighbours with KNN in feature space at several scales, runs the vanilla
block over every distance-sorted neighbour sequence (local features), then
the group block over long scans of the level (global features).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import geometry
from .geometry import PointSet
from .nn import tensor as T
from .nn.layers import Linear, Module, SharedMLP
from .nn.tensor import Tensor
from .ssm import PSSMBlock


@dataclass
class EncoderConfig:
    levels: int = 5
    channels: tuple = (64, 64, 128, 256, 512)
    pos_channels: int = 64
    latent: int = 1024
    neighbors: tuple = (16, 32)
    ratios: tuple = (1.0, 0.5, 0.5, 0.5, 0.5)
    scans: tuple = geometry.DEFAULT_SCANS
    state: int = 16
    expand: int = 2
    fps_seed: str = "nearest_to_centroid"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.neighbors = tuple(int(k) for k in self.neighbors)
        self.ratios = tuple(float(r) for r in self.ratios)
        self.scans = tuple(self.scans)
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        """Small configuration that trains on one CPU core in minutes."""
        base = dict(channels=(16, 16, 32, 64, 128), pos_channels=16, latent=256,
                    neighbors=(8, 16), state=4, expand=1)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown encoder keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @property
    def scales(self) -> int:
        return len(self.neighbors)

    def validate(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if len(self.channels) != self.levels or len(self.ratios) != self.levels:
            raise ValueError("channels and ratios need one entry per level")
        for c in self.channels:
            if c % self.scales:
                raise ValueError(f"level width {c} not divisible by {self.scales} scales")
        if any(not 0 < r <= 1 for r in self.ratios):
            raise ValueError("downsample ratios must lie in (0, 1]")
        if any(k < 1 for k in self.neighbors):
            raise ValueError("neighbour counts must be positive")
        for s in self.scans:
            geometry.make_scan(np.zeros((1, 3)), s)

    def level_sizes(self, n: int) -> list[int]:
        sizes = [n]
        for r in self.ratios:
            sizes.append(int(math.ceil(r * sizes[-1])))
        return sizes

    def check_points(self, n: int) -> None:
        sizes = self.level_sizes(n)
        kmax = max(self.neighbors)
        for i, m in enumerate(sizes[:-1]):
            if m < kmax:
                raise ValueError(
                    f"level {i + 1} input has {m} points, fewer than k={kmax} neighbours"
                )


@dataclass
class EncodedHierarchy:
    """Per-level point sets (batched) and the latent code."""

    levels: list = field(default_factory=list)
    z: Tensor | None = None
    sample_indices: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1


def batched_knn(queries: np.ndarray, reference: np.ndarray, k: int):
    """knn_query for every batch element: (B, Q, C), (B, N, C) -> (B, Q, k) x2."""
    idx = np.empty(queries.shape[:2] + (k,), dtype=np.int64)
    dist = np.empty(queries.shape[:2] + (k,))
    for b in range(queries.shape[0]):
        grp = geometry.knn_query(queries[b], reference[b], k)
        idx[b] = grp.indices
        dist[b] = grp.distances
    return idx, dist


def scan_orders(coords: np.ndarray, names) -> np.ndarray:
    """(B, N, 3) coordinates -> (B, G, N) scan orders."""
    return np.stack([
        np.stack([geometry.make_scan(c, name).order for name in names]) for c in coords
    ])


class EncoderLevel(Module):
    def __init__(self, cin: int, cout: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.cout = cout
        split = cout // cfg.scales
        self.local_proj = [
            SharedMLP([cfg.pos_channels + cin, split], rng, final_act=True) for _ in cfg.neighbors
        ]
        self.local_blocks = [
            PSSMBlock(split, rng, groups=1, expand=cfg.expand, state=cfg.state) for _ in cfg.neighbors
        ]
        self.global_block = PSSMBlock(cout, rng, groups=len(cfg.scans), expand=cfg.expand,
                                      state=cfg.state)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c0 = cfg.channels[0]
        self.pos_mlp = SharedMLP([3, cfg.pos_channels, cfg.pos_channels], rng)
        self.feat_mlp = SharedMLP([3, c0, c0], rng)
        widths = (c0,) + cfg.channels
        self.levels = [EncoderLevel(widths[i], widths[i + 1], cfg, rng) for i in range(cfg.levels)]
        self.to_latent = Linear(cfg.channels[-1], cfg.latent, rng)

    # -- stages ----------------------------------------------------------------
    def embed_input(self, x0) -> PointSet:
        x0 = np.asarray(x0)
        if x0.ndim == 2:
            x0 = x0[None]
        if x0.shape[-1] != 3:
            raise ValueError("input clouds must be (B, N, 3)")
        kmax = max(self.cfg.neighbors)
        if x0.shape[1] < kmax:
            raise ValueError(f"{x0.shape[1]} points is fewer than the largest k={kmax}")
        dtype = self.to_latent.weight.data.dtype
        xt = Tensor(x0.astype(dtype, copy=False))
        return PointSet(x0, self.pos_mlp(xt), self.feat_mlp(xt))

    def subsample_level(self, prev: PointSet, level: int):
        """FPS + multi-scale feature-space KNN; returns the new set and grouped features.

        ``grouped[j]`` has shape (B, N_i, k_j, C_p + C_{i-1}), rows sorted by
        feature distance with the centre itself first.
        """
        cfg = self.cfg
        bsz, n = prev.coords.shape[:2]
        m = int(math.ceil(cfg.ratios[level - 1] * n))
        kmax = max(cfg.neighbors)
        if kmax > n:
            raise ValueError(f"k={kmax} exceeds the {n} points available at level {level}")
        if m == n:
            sel = np.broadcast_to(np.arange(n), (bsz, n)).copy()
        else:
            sel = np.stack([geometry.farthest_point_sample(c, m, cfg.fps_seed) for c in prev.coords])
        coords = np.take_along_axis(prev.coords, sel[..., None], axis=1)
        pos = T.gather(prev.pos_embed, sel)
        fdata = prev.features.data.astype(np.float64, copy=False)
        queries = np.take_along_axis(fdata, sel[..., None], axis=1)
        nbr, _ = batched_knn(queries, fdata, kmax)
        both = T.concat([prev.pos_embed, prev.features], axis=-1)
        grouped = [T.gather(both, np.ascontiguousarray(nbr[..., :k])) for k in cfg.neighbors]
        return PointSet(coords, pos, None), grouped, sel

    def local_features(self, grouped, level: int) -> Tensor:
        lvl = self.levels[level - 1]
        pooled = []
        for proj, block, g in zip(lvl.local_proj, lvl.local_blocks, grouped):
            bsz, m, k, _ = g.shape
            h = proj(g)
            h = block(T.reshape(h, (bsz * m, k, h.shape[-1])))
            h, _ = T.max_pool(T.reshape(h, (bsz, m, k, h.shape[-1])), axis=2)
            pooled.append(h)
        return T.concat(pooled, axis=-1)

    def global_features(self, coords: np.ndarray, f_local: Tensor, level: int) -> Tensor:
        orders = scan_orders(coords, self.cfg.scans)
        return self.levels[level - 1].global_block(f_local, orders)

    def forward(self, x0) -> EncodedHierarchy:
        cur = self.embed_input(x0)
        hier = EncodedHierarchy(levels=[cur])
        for level in range(1, self.cfg.levels + 1):
            nxt, grouped, sel = self.subsample_level(cur, level)
            f_local = self.local_features(grouped, level)
            nxt.features = self.global_features(nxt.coords, f_local, level)
            hier.levels.append(nxt)
            hier.sample_indices.append(sel)
            cur = nxt
        hier.z, _ = T.max_pool(self.to_latent(cur.features), axis=1)
        return hier


def encode(x0, encoder: Encoder) -> EncodedHierarchy:
    return encoder(x0)
