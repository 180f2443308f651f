"""Run configuration, task models, the training loop, evaluation and checkpoints."""
from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import datagen
from .encoder import Encoder, EncoderConfig
from .heads import (
    ClassifierHead,
    FoldingConfig,
    FoldingDecoder,
    SegmentationHead,
    SegmentationHeadConfig,
)
from .nn import tensor as T
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import Module
from .nn.optim import Adam, TrainingFault, linear_decay_lr
from .objectives import (
    TASKS,
    MetricReport,
    chamfer_distance,
    compute_metrics,
    cross_entropy,
    density_aware_chamfer,
    dice_loss,
)

ENV_PREFIX = "MEDPOINT_"
DEFAULT_EPOCHS = {"classify": 100, "complete": 200, "segment": 200}
# validation metric for best-checkpoint selection and its direction (+1: higher is better)
BEST_METRIC = {"classify": ("acc", 1), "complete": ("cd", -1), "segment": ("miou", 1)}
HEAD_KEYS = {
    "classify": {"classes"},
    "complete": {"grid", "widths", "patches", "alpha"},
    "segment": {"classes", "k", "widths"},
}
_TOP_KEYS = ("task", "seed", "dtype", "epochs", "lr", "batch_size", "out", "encoder", "head", "data")


class ConfigError(ValueError):
    """Invalid run configuration (reported with exit code 2)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _encoder_from(d: dict) -> EncoderConfig:
    d = dict(d or {})
    preset = d.pop("preset", "desk")
    if preset == "desk":
        base = EncoderConfig.desk().to_dict()
    elif preset == "paper":
        base = EncoderConfig().to_dict()
    else:
        raise ConfigError(f"encoder.preset must be 'desk' or 'paper', got {preset!r}")
    unknown = set(d) - set(base)
    if unknown:
        raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
    base.update(d)
    try:
        return EncoderConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"encoder: {exc}") from None


@dataclass
class RunConfig:
    task: str
    seed: int = 0
    dtype: str = "float32"
    epochs: int | None = None
    lr: float = 1e-4
    batch_size: int = 8
    out: str = "runs/default"
    encoder: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.task]
        for key, typ in (("seed", int), ("epochs", int), ("batch_size", int)):
            val = getattr(self, key)
            if isinstance(val, bool) or not isinstance(val, typ):
                raise ConfigError(f"{key} must be an integer, got {val!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if isinstance(self.lr, bool) or not isinstance(self.lr, (int, float)) or not self.lr > 0:
            raise ConfigError(f"lr must be a positive number, got {self.lr!r}")
        self.lr = float(self.lr)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for key in ("encoder", "head", "data"):
            if not isinstance(getattr(self, key) or {}, dict):
                raise ConfigError(f"{key} must be a mapping")
        unknown = set(self.head or {}) - HEAD_KEYS[self.task]
        if unknown:
            raise ConfigError(f"unknown head keys for task {self.task}: {sorted(unknown)}")
        self.encoder_config()
        self.head_config()
        try:
            self.data = datagen.data_spec(self.data, self.task)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.data["manifest"] is None:
            self._check_sizes()

    def _check_sizes(self) -> None:
        n = int(self.data["input_points"] or self.data["points"])
        if self.task == "complete":
            n -= int(math.floor(float(self.data["crop_fraction"]) * n))
        try:
            self.encoder_config().check_points(n)
        except ValueError as exc:
            raise ConfigError(f"encoder: {exc}") from None

    def encoder_config(self) -> EncoderConfig:
        return _encoder_from(self.encoder)

    def head_config(self):
        h = dict(self.head or {})
        try:
            if self.task == "classify":
                return {"classes": int(h.get("classes", len(datagen.CLASSES)))}
            if self.task == "complete":
                alpha = float(h.pop("alpha", 1.0))
                if alpha <= 0:
                    raise ValueError("alpha must be positive")
                return FoldingConfig(**h), alpha
            return SegmentationHeadConfig(**h)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"head: {exc}") from None

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in _TOP_KEYS}

    @classmethod
    def from_dict(cls, d: dict, env: dict | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping at the top level")
        d = dict(d)
        for key, raw in (os.environ if env is None else env).items():
            if not key.startswith(ENV_PREFIX):
                continue
            name = key[len(ENV_PREFIX):].lower()
            if name not in _TOP_KEYS or name in ("encoder", "head", "data"):
                raise ConfigError(f"environment override {key} names no top-level scalar key")
            d[name] = yaml.safe_load(raw)
        unknown = set(d) - set(_TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "task" not in d:
            raise ConfigError("config needs a 'task'")
        return cls(**d)

    @classmethod
    def load(cls, path, env: dict | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed config: {exc}") from None
        return cls.from_dict(d or {}, env)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class TaskModel(Module):
    """Encoder plus the task decoder."""

    def __init__(self, cfg: RunConfig, classes: int | None = None):
        rng = np.random.default_rng(cfg.seed)
        self.task = cfg.task
        enc_cfg = cfg.encoder_config()
        self.encoder = Encoder(enc_cfg, rng)
        head_cfg = cfg.head_config()
        if cfg.task == "classify":
            self.head = ClassifierHead(enc_cfg.latent, classes or head_cfg["classes"], rng)
        elif cfg.task == "complete":
            self.head = FoldingDecoder(enc_cfg.latent, head_cfg[0], rng)
            self.alpha = head_cfg[1]
        else:
            if classes is not None:
                head_cfg.classes = classes
            self.head = SegmentationHead(enc_cfg.channels, enc_cfg.latent, head_cfg, rng)
        self.astype(cfg.np_dtype)

    def forward(self, x):
        hier = self.encoder(x)
        if self.task == "segment":
            return self.head(hier)
        return self.head(hier.z)

    def loss(self, out, batch) -> T.Tensor:
        if self.task == "classify":
            return cross_entropy(out, batch["labels"])
        if self.task == "complete":
            return density_aware_chamfer(out, batch["targets"].astype(out.data.dtype), self.alpha)
        return T.add(cross_entropy(out, batch["point_labels"]),
                     dice_loss(T.softmax(out), batch["point_labels"]))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _subsample(n_have: int, n_want: int, rng) -> np.ndarray:
    if n_want >= n_have:
        return np.arange(n_have)
    return np.sort(rng.choice(n_have, n_want, replace=False))


def make_batch(ds: datagen.CloudDataset, idx, n_input: int | None, rng) -> dict:
    """Stack samples; clouds longer than ``n_input`` are subsampled with ``rng``."""
    xs, pls = [], []
    for i in idx:
        x = ds.inputs[i]
        sel = _subsample(len(x), n_input or len(x), rng)
        xs.append(x[sel])
        if ds.targets is None:
            pls.append(ds.point_labels[i][sel])
    lengths = {len(x) for x in xs}
    if len(lengths) != 1:
        raise ValueError(f"batch mixes cloud sizes {sorted(lengths)}; set data.input_points")
    batch = {"x": np.stack(xs), "labels": ds.class_labels[np.asarray(idx)]}
    if ds.targets is not None:
        batch["targets"] = np.stack([ds.targets[i] for i in idx])
    else:
        batch["point_labels"] = np.stack(pls)
    return batch


def _resize_cloud(pred: np.ndarray, m: int, rng) -> np.ndarray:
    """Bring a predicted cloud to m points for the equal-size EMD."""
    if len(pred) == m:
        return pred
    return pred[np.sort(rng.choice(len(pred), m, replace=len(pred) < m))]


def predict(model: TaskModel, ds, idx, batch_size: int, n_input: int | None, seed: int):
    """Forward passes without graph recording; returns stacked outputs and the batches used."""
    rng = np.random.default_rng(seed)
    outs, labels, pls, targets = [], [], [], []
    with T.no_grad():
        for s in range(0, len(idx), batch_size):
            batch = make_batch(ds, idx[s:s + batch_size], n_input, rng)
            out = model(batch["x"]).data.astype(np.float64)
            if model.task == "segment":
                out = T.softmax(T.Tensor(out)).data
            outs.append(out)
            labels.append(batch["labels"])
            if "point_labels" in batch:
                pls.append(batch["point_labels"])
            if "targets" in batch:
                targets.append(batch["targets"])
    res = {"pred": np.concatenate(outs), "labels": np.concatenate(labels)}
    if pls:
        res["point_labels"] = np.concatenate(pls)
    if targets:
        res["targets"] = np.concatenate(targets)
    return res


def evaluate(model: TaskModel, ds, idx, batch_size: int, n_input=None, seed: int = 0,
             full: bool = True) -> tuple[MetricReport, dict]:
    """Task metrics on the samples ``idx``.

    ``full=False`` skips the exact EMD for completion (used for per-epoch validation).
    """
    res = predict(model, ds, idx, batch_size, n_input, seed)
    if model.task == "classify":
        return compute_metrics("classify", res["pred"], res["labels"]), res
    if model.task == "segment":
        return compute_metrics("segment", res["pred"], res["point_labels"]), res
    if not full:
        cd = float(np.mean([chamfer_distance(p, q) for p, q in zip(res["pred"], res["targets"])]))
        return MetricReport("complete", {"cd": cd}, len(idx)), res
    rng = np.random.default_rng(seed)
    sized = np.stack([_resize_cloud(p, len(q), rng) for p, q in zip(res["pred"], res["targets"])])
    report = compute_metrics("complete", sized, res["targets"])
    # CD on the raw decoder output, EMD on the size-matched cloud
    report.metrics["cd"] = float(np.mean([chamfer_distance(p, q)
                                          for p, q in zip(res["pred"], res["targets"])]))
    return report, res


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_run_checkpoint(path, model: TaskModel, opt: Adam | None, cfg: RunConfig, meta: dict):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        tensors.update({f"optim/{k}": v for k, v in opt.state_arrays().items()})
    info = {"config": cfg.to_dict(), "classes": _head_classes(model),
            "optim_step": opt.state.step if opt is not None else 0, **meta}
    save_checkpoint(path, tensors, info)


def _head_classes(model: TaskModel):
    if model.task == "classify":
        return int(model.head.mlp.layers[-1].weight.shape[1])
    if model.task == "segment":
        return int(model.head.cfg.classes)
    return None


def load_run_checkpoint(path):
    """Returns (model, config, meta, optimizer arrays)."""
    tensors, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"], env={})
    model = TaskModel(cfg, classes=meta.get("classes"))
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items()
                           if k.startswith("model/")})
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    return model, cfg, meta, optim


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    best_path: Path
    final_path: Path
    history: list
    test_report: MetricReport
    final_loss: float
    seconds: float


def build_dataset(cfg: RunConfig) -> datagen.CloudDataset:
    if cfg.data["manifest"]:
        kind = {"classify": "shapes", "segment": "nested", "complete": "completion"}[cfg.task]
        ds = datagen.load_dataset(cfg.data["manifest"], kind)
    else:
        ds = datagen.generate_dataset(cfg.data, cfg.seed)
    if (cfg.task == "complete") != (ds.targets is not None):
        raise ConfigError(f"dataset kind {ds.kind!r} does not fit task {cfg.task!r}")
    return ds


def run_seeds(cfg: RunConfig) -> list[int]:
    """Per-epoch shuffle and validation seeds, then the test-evaluation seed."""
    return datagen.derive_seeds(cfg.seed ^ 0x5EED, 2 * cfg.epochs + 1)


def eval_seed(cfg: RunConfig) -> int:
    return run_seeds(cfg)[-1] & 0x7FFFFFFF


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def train(cfg: RunConfig, out_dir=None, log=print, dataset=None) -> TrainResult:
    """Train ``cfg`` and evaluate the best checkpoint on the test fold.

    Writes ``train.log``, ``best.ckpt``, ``final.ckpt``, ``config.json`` and
    the test metric report into the output directory. Raises
    :class:`TrainingFault` on a non-finite loss or gradient.
    """
    t0 = time.perf_counter()
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    ds = dataset if dataset is not None else build_dataset(cfg)
    classes = ds.num_classes if cfg.task != "complete" else None
    if cfg.task == "classify":
        classes = max(classes, int(cfg.head_config()["classes"]))
    model = TaskModel(cfg, classes=classes)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, horizon=cfg.epochs)
    train_idx, val_idx, test_idx = (ds.indices(r) for r in ("train", "val", "test"))
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigError("dataset has no training or validation samples")
    n_input = cfg.data["input_points"]
    key, sign = BEST_METRIC[cfg.task]
    best_val = None
    history = []
    log_path = out / "train.log"
    log_path.write_text("")
    best_path, final_path = out / "best.ckpt", out / "final.ckpt"
    seeds = run_seeds(cfg)
    train_loss = float("nan")
    for epoch in range(cfg.epochs):
        lr_t = linear_decay_lr(cfg.lr, epoch, cfg.epochs)
        rng = np.random.default_rng(seeds[2 * epoch])
        order = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = make_batch(ds, order[s:s + cfg.batch_size], n_input, rng)
            model.zero_grad()
            loss = model.loss(model(batch["x"]), batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingFault(f"non-finite loss {value} at epoch {epoch + 1}, "
                                    f"batch {s // cfg.batch_size + 1}")
            loss.backward()
            opt.step(lr_t)
            losses.append(value)
        train_loss = float(np.mean(losses))
        report, _ = evaluate(model, ds, val_idx, cfg.batch_size, n_input,
                             seeds[2 * epoch + 1] & 0x7FFFFFFF, full=False)
        val = report.metrics[key]
        parts = [f"epoch={epoch + 1}", f"lr={_fmt(lr_t)}", f"train_loss={_fmt(train_loss)}"]
        parts += [f"val_{k}={_fmt(v)}" for k, v in report.metrics.items()]
        line = " ".join(parts)
        with log_path.open("a") as fh:
            fh.write(line + "\n")
        log(line)
        history.append({"epoch": epoch + 1, "lr": lr_t, "train_loss": train_loss,
                        **{f"val_{k}": v for k, v in report.metrics.items()}})
        if best_val is None or sign * (val - best_val) > 0:
            best_val = val
            save_run_checkpoint(best_path, model, opt, cfg,
                                {"epoch": epoch + 1, f"val_{key}": val, "kind": "best"})
    save_run_checkpoint(final_path, model, opt, cfg,
                        {"epoch": cfg.epochs, f"val_{key}": history[-1][f"val_{key}"],
                         "train_loss": train_loss, "kind": "final"})
    best_model, _, _, _ = load_run_checkpoint(best_path)
    report, res = evaluate(best_model, ds, test_idx, cfg.batch_size, n_input, eval_seed(cfg))
    report.write(out, "test_metrics")
    if cfg.task == "complete":
        write_completion_plys(out / "predictions", res["pred"], [ds.sample_ids[i] for i in test_idx])
    return TrainResult(out, best_path, final_path, history, report, train_loss,
                       time.perf_counter() - t0)


def write_completion_plys(directory, clouds, names) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for cloud, name in zip(clouds, names):
        datagen.write_ply(directory / f"{name}.ply", cloud)


def untrained_model(cfg: RunConfig, classes: int | None = None) -> TaskModel:
    """Random-weight model with the run's initialisation (baseline for completion)."""
    return TaskModel(cfg, classes=classes)
