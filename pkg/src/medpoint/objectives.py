"""Training losses and evaluation metrics.

Losses take and return :class:`~medpoint.nn.Tensor` so they can be
differentiated; the set distances also accept plain arrays and then return
a float. Point clouds are batched as (B, N, 3) or single (N, 3).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .nn import tensor as T
from .nn.tensor import Tensor

DICE_SMOOTH = 1e-5
TASKS = ("classify", "complete", "segment")
METRIC_KEYS = {
    "classify": ("acc",),
    "complete": ("cd", "emd"),
    "segment": ("miou", "dice", "sdice"),
}


def _labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros(labels.shape + (k,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = T.as_tensor(logits)
    k = logits.shape[-1]
    labels = _labels(labels, k)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    onehot = Tensor(_one_hot(labels, k, logits.data.dtype))
    n = labels.size
    return T.mul(T.sum_(T.mul(T.log_softmax(logits), onehot)), -1.0 / n)


def dice_loss(probs, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean over classes of the smoothed Dice overlap (all points pooled)."""
    probs = T.as_tensor(probs)
    k = probs.shape[-1]
    labels = _labels(labels, k)
    p = T.reshape(probs, (-1, k))
    y = _one_hot(labels.reshape(-1), k, probs.data.dtype)
    inter = T.sum_(T.mul(p, Tensor(y)), axis=0)
    denom = T.add(T.sum_(p, axis=0), y.sum(axis=0) + smooth)
    per_class = T.div(T.add(T.mul(inter, 2.0), smooth), denom)
    return T.sub(1.0, T.mean(per_class))


def _batched(p):
    if p.ndim == 2:
        return T.expand_dims(p, 0)
    return p


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # exact difference form: invariant to row order, no cancellation
    return ((a[:, :, None, :] - b[:, None, :, :]) ** 2).sum(axis=-1)


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index of the nearest b row for every a row, lowest index on ties."""
    return np.argmin(_sq_dists(a, b), axis=2)


def _matched_sq_dist(a: Tensor, b: Tensor, idx: np.ndarray) -> Tensor:
    diff = T.sub(a, T.gather(b, idx))
    return T.sum_(T.mul(diff, diff), axis=-1)


def _prep(p, q):
    plain = not isinstance(p, Tensor) and not isinstance(q, Tensor)
    p = T.as_tensor(np.asarray(p, dtype=np.float64) if not isinstance(p, Tensor) else p)
    q = T.as_tensor(np.asarray(q, dtype=p.data.dtype) if not isinstance(q, Tensor) else q)
    p, q = _batched(p), _batched(q)
    if p.shape[1] == 0 or q.shape[1] == 0:
        raise ValueError("point sets must be non-empty")
    return p, q, plain


def chamfer_distance(p, q):
    """Symmetric squared-L2 Chamfer distance, averaged over the batch."""
    p, q, plain = _prep(p, q)
    nn_pq = _nearest(p.data, q.data)
    nn_qp = _nearest(q.data, p.data)
    loss = T.add(T.mean(_matched_sq_dist(p, q, nn_pq), axis=1),
                 T.mean(_matched_sq_dist(q, p, nn_qp), axis=1))
    loss = T.mean(loss)
    return float(loss.data) if plain else loss


def _dcd_side(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    nn_ab = _nearest(a.data, b.data)
    counts = np.stack([np.bincount(row, minlength=b.shape[1]) for row in nn_ab])
    inv_n = 1.0 / np.take_along_axis(counts, nn_ab, axis=1)
    d = _matched_sq_dist(a, b, nn_ab)
    term = T.sub(1.0, T.mul(T.exp(T.mul(d, -alpha)), Tensor(inv_n.astype(a.data.dtype))))
    return T.mean(term, axis=1)


def density_aware_chamfer(p, q, alpha: float = 1.0):
    """Density-aware Chamfer distance in [0, 1).

    Each matched pair contributes ``1 - exp(-alpha * d^2) / n`` where ``n``
    counts how many points picked the same nearest neighbour.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    p, q, plain = _prep(p, q)
    loss = T.mul(T.add(_dcd_side(p, q, alpha), _dcd_side(q, p, alpha)), 0.5)
    loss = T.mean(loss)
    return float(loss.data) if plain else loss


def emd_exact(p, q) -> float:
    """Mean unsquared L2 cost of the optimal bijection between equal-size sets."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"EMD needs equal-size sets, got {p.shape} and {q.shape}")
    if p.ndim == 3:
        return float(np.mean([emd_exact(a, b) for a, b in zip(p, q)]))
    cost = np.sqrt(_sq_dists(p[None], q[None])[0])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(p))


# ---------------------------------------------------------------------------
# Metric suite
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    task: str
    metrics: dict = field(default_factory=dict)
    count: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    def to_text(self) -> str:
        lines = [f"task={self.task}", f"samples={self.count}"]
        lines += [f"{k}={v:.6f}" for k, v in self.metrics.items()]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"task": self.task, "samples": self.count, **self.metrics}

    def write(self, directory, stem: str = "metrics") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt = directory / f"{stem}.txt"
        js = directory / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return txt, js


def _seg_scores(probs: np.ndarray, target: np.ndarray):
    k = probs.shape[-1]
    pred = probs.argmax(axis=-1)
    y = _one_hot(target, k, np.float64)
    ious, dices, sdices = [], [], []
    for c in np.unique(target):
        pc = pred == c
        tc = target == c
        inter = np.logical_and(pc, tc).sum()
        union = np.logical_or(pc, tc).sum()
        ious.append(inter / union)
        dices.append(2.0 * inter / (pc.sum() + tc.sum()))
        prob = probs[:, c]
        sdices.append(2.0 * (prob * y[:, c]).sum() / ((prob ** 2).sum() + (y[:, c] ** 2).sum()))
    return float(np.mean(ious)), float(np.mean(dices)), float(np.mean(sdices))


def compute_metrics(task: str, predictions, targets) -> MetricReport:
    """Task metric suite.

    classify: logits (S, K) or hard labels (S,) vs labels (S,) -> acc.
    complete: clouds (S, P, 3) vs (S, M, 3) -> cd, emd.
    segment:  probabilities (S, N, K) vs labels (S, N) -> miou, dice, sdice;
              scores are averaged over classes present in each target, then
              over samples.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    preds = np.asarray(predictions)
    targets = np.asarray(targets)
    if task == "classify":
        labels = preds.argmax(axis=-1) if preds.ndim == 2 else preds
        if labels.shape != targets.shape:
            raise ValueError("prediction and target counts differ")
        return MetricReport(task, {"acc": float(np.mean(labels == targets))}, len(targets))
    if task == "complete":
        if preds.ndim != 3 or targets.ndim != 3 or len(preds) != len(targets):
            raise ValueError("completion metrics need (S, P, 3) predictions and targets")
        cd = float(np.mean([chamfer_distance(a, b) for a, b in zip(preds, targets)]))
        emd = emd_exact(preds, targets)
        return MetricReport(task, {"cd": cd, "emd": emd}, len(targets))
    if preds.ndim != 3 or preds.shape[:2] != targets.shape:
        raise ValueError("segmentation metrics need (S, N, K) probabilities and (S, N) labels")
    scores = np.array([_seg_scores(p, t) for p, t in zip(preds, targets)])
    miou, dice, sdice = scores.mean(axis=0)
    return MetricReport(task, {"miou": float(miou), "dice": float(dice), "sdice": float(sdice)},
                        len(targets))
