"""Synthetic nested-anatomy data, completion crops, fold splits and file I/O.

Point files are plain ASCII::

    # medpoints v1 n=<N> class=<c>
    x y z [part_label]
    ...

A missing label column reads back as -1.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASSES = ("sphere_shell", "nested_spheres", "box_shell", "capsule", "torus")
FOLD_ROLES = {"train": (0, 1, 2), "val": (3,), "test": (4,)}
_MASK64 = (1 << 64) - 1


class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass
class LabeledCloud:
    coords: np.ndarray
    point_labels: np.ndarray
    class_label: int = -1
    sample_id: str = ""
    seed: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError("coords must be (N, 3)")
        if len(self.point_labels) != len(self.coords):
            raise ValueError("one point label per point required")


@dataclass
class CompletionPair:
    partial: np.ndarray
    full: np.ndarray
    anchor: int
    fraction: float
    removed: np.ndarray


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seeds(root: int, count: int) -> list[int]:
    state = root & _MASK64
    out = []
    for _ in range(count):
        state, z = splitmix64(state)
        out.append(z)
    return out


# ---------------------------------------------------------------------------
# Surface samplers on primitives centred at the origin
# ---------------------------------------------------------------------------


def _sphere(rng, n, radius=1.0):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n, half):
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _capsule(rng, n, radius, half_len):
    side = 2 * math.pi * radius * 2 * half_len
    caps = 4 * math.pi * radius ** 2
    n_side = int(round(n * side / (side + caps)))
    theta = rng.uniform(0, 2 * math.pi, size=n_side)
    zs = rng.uniform(-half_len, half_len, size=n_side)
    body = np.stack([radius * np.cos(theta), radius * np.sin(theta), zs], axis=1)
    cap = _sphere(rng, n - n_side, radius)
    cap[:, 2] += np.where(cap[:, 2] >= 0, half_len, -half_len)
    return np.concatenate([body, cap])


def _torus(rng, n, major, minor):
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * math.pi, size=2 * n)
        v = rng.uniform(0, 2 * math.pi, size=2 * n)
        # rejection keeps the density uniform in surface area
        keep = rng.uniform(0, 1, size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def gen_shape(cls: str, n: int, seed: int, noise: float = 0.0, size_jitter: float = 0.0,
              radii=(0.5, 1.0)) -> LabeledCloud:
    """Sample ``n`` surface points of a named primitive, scaled into the unit ball.

    ``nested_spheres`` is two concentric shells labelled 0 (inner) and 1
    (outer) with points split by surface area. ``size_jitter`` scales each
    axis by a factor in [1 - s, 1 + s] and ``noise`` adds Gaussian noise;
    both default to zero so shapes are exact.
    """
    if cls not in CLASSES:
        raise ValueError(f"unknown shape class {cls!r}; expected one of {CLASSES}")
    if n < 32:
        raise ValueError("need at least 32 points")
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    if cls == "sphere_shell":
        pts = _sphere(rng, n)
    elif cls == "nested_spheres":
        r_in, r_out = radii
        n_in = int(round(n * r_in ** 2 / (r_in ** 2 + r_out ** 2)))
        pts = np.concatenate([_sphere(rng, n_in, r_in), _sphere(rng, n - n_in, r_out)])
        labels[n_in:] = 1
    elif cls == "box_shell":
        pts = _box(rng, n, (0.6, 0.6, 0.6))
    elif cls == "capsule":
        pts = _capsule(rng, n, 0.35, 0.5)
    else:
        pts = _torus(rng, n, 0.7, 0.3)
    if size_jitter:
        pts = pts * rng.uniform(1 - size_jitter, 1 + size_jitter, size=3)
    if noise:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    return LabeledCloud(pts, labels, CLASSES.index(cls), seed=seed)


def gen_nested_segmentation(n: int, seed: int, noise: float = 0.01,
                            inner_range=(0.4, 0.6)) -> LabeledCloud:
    """Two-part nested-shell sample with a random inner radius."""
    rng = np.random.default_rng(seed)
    r_in = rng.uniform(*inner_range)
    cloud = gen_shape("nested_spheres", n, int(rng.integers(2 ** 63)), noise=noise,
                      radii=(r_in, 1.0))
    cloud.seed = seed
    return cloud


def gen_scene(n: int, seed: int, parts: int | None = None, noise: float = 0.01) -> LabeledCloud:
    """Union of 2-4 primitives at random offsets; part label = primitive slot."""
    rng = np.random.default_rng(seed)
    parts = parts or int(rng.integers(2, 5))
    if not 2 <= parts <= 4:
        raise ValueError("a scene has 2 to 4 parts")
    counts = np.full(parts, n // parts)
    counts[: n % parts] += 1
    chunks, labels = [], []
    for j, c in enumerate(counts):
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        shape = gen_shape(cls, max(int(c), 32), int(rng.integers(2 ** 63))).coords[:c]
        offset = rng.uniform(-1.0, 1.0, size=3) * 1.2
        chunks.append(0.45 * shape + offset)
        labels.append(np.full(c, j))
    pts = np.concatenate(chunks) + rng.normal(scale=noise, size=(n, 3))
    pts = pts - pts.mean(axis=0)
    pts /= np.linalg.norm(pts, axis=1).max()
    return LabeledCloud(pts, np.concatenate(labels), -1, seed=seed)


# ---------------------------------------------------------------------------
# Completion crops and folds
# ---------------------------------------------------------------------------


def mask_anchor_crop(cloud, fraction: float, seed: int) -> CompletionPair:
    """Remove the ``floor(fraction * N)`` points nearest a random anchor (anchor included)."""
    if not 0 < fraction < 1:
        raise ValueError("crop fraction must lie in (0, 1)")
    full = np.asarray(getattr(cloud, "coords", cloud), dtype=np.float64)
    n = len(full)
    rng = np.random.default_rng(seed)
    anchor = int(rng.integers(n))
    n_drop = int(math.floor(fraction * n))
    d2 = ((full - full[anchor]) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    removed = np.sort(order[:n_drop])
    keep = np.ones(n, dtype=bool)
    keep[removed] = False
    return CompletionPair(full[keep], full, anchor, fraction, removed)


def split_folds(n_samples: int, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Random near-equal partition; returns the fold id (0-based) of each sample.

    Earlier folds receive the remainder, so 7 samples in 5 folds gives
    sizes [2, 2, 1, 1, 1].
    """
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n_samples < folds:
        raise ValueError(f"{n_samples} samples cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_samples)
    sizes = [n_samples // folds + (1 if i < n_samples % folds else 0) for i in range(folds)]
    fold_of = np.empty(n_samples, dtype=np.int64)
    start = 0
    for f, s in enumerate(sizes):
        fold_of[perm[start:start + s]] = f
        start += s
    return fold_of


def fold_members(fold_of: np.ndarray, role: str) -> np.ndarray:
    return np.flatnonzero(np.isin(fold_of, FOLD_ROLES[role]))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_HEADER = re.compile(r"#\s*medpoints\s+v1\s+n=(\d+)\s+class=(-?\d+)\s*$")


def io_write(path, cloud: LabeledCloud, with_labels: bool = True) -> None:
    lines = [f"# medpoints v1 n={len(cloud.coords)} class={cloud.class_label}"]
    for p, lab in zip(cloud.coords, cloud.point_labels):
        row = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
        lines.append(f"{row} {lab}" if with_labels else row)
    Path(path).write_text("\n".join(lines) + "\n")


def io_read(path) -> LabeledCloud:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError(path, 1, "empty file")
    m = _HEADER.match(text[0].strip())
    if not m:
        raise ParseError(path, 1, "missing '# medpoints v1 n=<N> class=<c>' header")
    n, cls = int(m.group(1)), int(m.group(2))
    coords = np.empty((n, 3))
    labels = np.full(n, -1, dtype=np.int64)
    rows = [(i + 2, line) for i, line in enumerate(text[1:]) if line.strip()]
    if len(rows) > n:
        raise ParseError(path, rows[n][0], f"more than the {n} points declared in the header")
    for k, (lineno, line) in enumerate(rows):
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ParseError(path, lineno, f"expected 'x y z [label]', got {len(parts)} fields")
        try:
            coords[k] = [float(v) for v in parts[:3]]
            if len(parts) == 4:
                labels[k] = int(parts[3])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    if len(rows) < n:
        # a short file reports the 1-based index of the first missing point record
        raise ParseError(path, len(rows) + 1, f"header declares {n} points, found {len(rows)}")
    return LabeledCloud(coords, labels, cls, sample_id=Path(path).stem)


def write_ply(path, coords, colors=None) -> None:
    """ASCII PLY with optional uint8 RGB per vertex."""
    coords = np.asarray(coords)
    head = ["ply", "format ascii 1.0", f"element vertex {len(coords)}",
            "property float x", "property float y", "property float z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    body = []
    for i, p in enumerate(coords):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if colors is not None:
            r, g, b = (int(c) for c in colors[i])
            row += f" {r} {g} {b}"
        body.append(row)
    Path(path).write_text("\n".join(head + body) + "\n")


@dataclass
class ManifestEntry:
    path: str
    class_label: int
    fold: int
    partial: str | None = None


def write_manifest(path, entries) -> None:
    lines = ["# path class fold [partial]"]
    for e in entries:
        row = f"{e.path} {e.class_label} {e.fold}"
        lines.append(f"{row} {e.partial}" if e.partial else row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    base = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ParseError(path, lineno, "expected 'path class fold [partial]'")
        partial = str(base / parts[3]) if len(parts) == 4 else None
        out.append(ManifestEntry(str(base / parts[0]), int(parts[1]), int(parts[2]), partial))
    return out


# ---------------------------------------------------------------------------
# In-memory datasets
# ---------------------------------------------------------------------------

DATA_KINDS = ("shapes", "nested", "scenes", "completion")
_DATA_DEFAULTS = {
    "kind": None,
    "manifest": None,
    "samples": 200,
    "points": 256,
    "input_points": None,
    "classes": list(CLASSES),
    "noise": 0.01,
    "size_jitter": 0.15,
    "crop_fraction": 0.2,
    "folds": 5,
    "seed": None,
}
TASK_KIND = {"classify": "shapes", "segment": "nested", "complete": "completion"}


def data_spec(d: dict | None, task: str | None = None) -> dict:
    """Fill defaults into a generator spec and reject unknown keys."""
    d = dict(d or {})
    unknown = set(d) - set(_DATA_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown data keys: {sorted(unknown)}")
    spec = {**_DATA_DEFAULTS, **d}
    if spec["kind"] is None:
        spec["kind"] = TASK_KIND.get(task, "shapes")
    if spec["kind"] not in DATA_KINDS:
        raise ValueError(f"data.kind must be one of {DATA_KINDS}, got {spec['kind']!r}")
    for c in spec["classes"]:
        if c not in CLASSES:
            raise ValueError(f"unknown shape class {c!r}")
    if int(spec["points"]) < 32:
        raise ValueError("data.points must be >= 32")
    if int(spec["samples"]) < 1:
        raise ValueError("data.samples must be positive")
    if spec["input_points"] is not None and int(spec["input_points"]) > int(spec["points"]):
        raise ValueError("data.input_points cannot exceed data.points")
    if not 0 < float(spec["crop_fraction"]) < 1:
        raise ValueError("data.crop_fraction must lie in (0, 1)")
    return spec


@dataclass
class CloudDataset:
    """Samples held in memory with their fold assignment.

    ``inputs`` are what the encoder sees (partial clouds for completion),
    ``targets`` hold full clouds for completion, ``class_labels`` and
    ``point_labels`` the classification and segmentation targets.
    """

    kind: str
    inputs: list
    class_labels: np.ndarray
    point_labels: list
    fold_of: np.ndarray
    targets: list | None = None
    sample_ids: list | None = None

    def __len__(self):
        return len(self.inputs)

    def indices(self, role: str) -> np.ndarray:
        return fold_members(self.fold_of, role)

    @property
    def num_classes(self) -> int:
        if self.kind == "shapes":
            return len(CLASSES)
        labs = [p.max() for p in self.point_labels if len(p)]
        return int(max(labs)) + 1 if labs else 0


def generate_dataset(spec: dict, seed: int) -> CloudDataset:
    """Synthesise a dataset; every sample is a pure function of (spec, seed, index)."""
    spec = data_spec(spec)
    root = seed if spec["seed"] is None else int(spec["seed"])
    kind, n = spec["kind"], int(spec["points"])
    noise, jitter = float(spec["noise"]), float(spec["size_jitter"])
    if kind == "shapes":
        plan = [c for c in spec["classes"] for _ in range(int(spec["samples"]))]
    elif kind == "completion":
        plan = [spec["classes"][0]] * int(spec["samples"])
    else:
        plan = [kind] * int(spec["samples"])
    seeds = derive_seeds(root, 2 * len(plan))
    inputs, targets, labels, plabels, ids = [], [], [], [], []
    for i, what in enumerate(plan):
        s = seeds[2 * i]
        if kind == "nested":
            cloud = gen_nested_segmentation(n, s, noise=noise)
        elif kind == "scenes":
            cloud = gen_scene(n, s, noise=noise)
        else:
            cloud = gen_shape(what, n, s, noise=noise, size_jitter=jitter)
        ids.append(f"{kind}_{i:05d}")
        labels.append(cloud.class_label)
        plabels.append(cloud.point_labels)
        if kind == "completion":
            pair = mask_anchor_crop(cloud.coords, float(spec["crop_fraction"]), seeds[2 * i + 1])
            inputs.append(pair.partial)
            targets.append(pair.full)
        else:
            inputs.append(cloud.coords)
    fold_of = split_folds(len(plan), int(spec["folds"]), seed=seeds[-1] & 0x7FFFFFFF)
    return CloudDataset(kind, inputs, np.asarray(labels, dtype=np.int64), plabels, fold_of,
                        targets if kind == "completion" else None, ids)


def export_dataset(ds: CloudDataset, out_dir) -> Path:
    """Write every sample as a point file plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        sid = ds.sample_ids[i] if ds.sample_ids else f"sample_{i:05d}"
        rel = f"clouds/{sid}.pts"
        partial = None
        if ds.targets is not None:
            io_write(out_dir / rel, LabeledCloud(ds.targets[i], np.full(len(ds.targets[i]), -1),
                                                 int(ds.class_labels[i])), with_labels=False)
            partial = f"clouds/{sid}.partial.pts"
            io_write(out_dir / partial, LabeledCloud(ds.inputs[i], np.full(len(ds.inputs[i]), -1),
                                                     int(ds.class_labels[i])), with_labels=False)
        else:
            io_write(out_dir / rel, LabeledCloud(ds.inputs[i], ds.point_labels[i],
                                                 int(ds.class_labels[i])))
        entries.append(ManifestEntry(rel, int(ds.class_labels[i]), int(ds.fold_of[i]), partial))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def load_dataset(manifest, kind: str | None = None) -> CloudDataset:
    """Read a manifest back into memory; entries with a partial file form a completion set."""
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError(f"{manifest}: manifest lists no samples")
    completion = entries[0].partial is not None
    if any((e.partial is not None) != completion for e in entries):
        raise ValueError(f"{manifest}: mixes completion and non-completion entries")
    inputs, targets, plabels, ids = [], [], [], []
    for e in entries:
        cloud = io_read(e.path)
        ids.append(Path(e.path).stem)
        plabels.append(cloud.point_labels)
        if completion:
            targets.append(cloud.coords)
            inputs.append(io_read(e.partial).coords)
        else:
            inputs.append(cloud.coords)
    if kind is None:
        kind = "completion" if completion else "shapes"
    return CloudDataset(kind, inputs, np.array([e.class_label for e in entries], dtype=np.int64),
                        plabels, np.array([e.fold for e in entries], dtype=np.int64),
                        targets if completion else None, ids)
