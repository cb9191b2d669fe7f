"""Training and evaluation loops, metrics, checkpoints and density sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .archlang import NetworkBlueprint, parse_blueprint, render_blueprint
from .cloud import MetricConfig, MetricMode, PointCloud
from .datagen.augment import AugmentConfig, augment, random_input_dropout
from .datagen.corpus import Dataset
from .engine import AdamState, adam_step, rng_stream
from .network import Network, NetworkConfig

DP_RATIO = 0.95

# stream keys, so every random draw has its own independent source
_SHUFFLE, _AUGMENT, _DROPOUT, _MASKS, _BUDGET, _FPS_START, _INIT = 10, 11, 12, 13, 20, 30, 40


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.001
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    eval_every: int = 1
    dropout_training: bool = False
    network: NetworkConfig = NetworkConfig()
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")

    def to_dict(self) -> dict:
        net = self.network
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "seed": self.seed,
            "augment": self.augment.to_dict(),
            "eval_every": self.eval_every,
            "dropout_training": self.dropout_training,
            "network": {
                "group_cap": net.group_cap,
                "grouping": net.grouping,
                "interp_k": net.interp_k,
                "interp_power": net.interp_power,
                "metric": net.metric.mode.value,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        allowed = {"epochs", "batch_size", "lr", "seed", "augment", "eval_every", "dropout_training", "network", "threads"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        data = dict(data)
        if "augment" in data:
            data["augment"] = AugmentConfig.from_dict(data["augment"])
        if "network" in data:
            net = dict(data["network"])
            if "metric" in net:
                net["metric"] = MetricConfig(MetricMode(net["metric"]))
            data["network"] = NetworkConfig(**net)
        return cls(**data)


@dataclass(eq=False)
class Checkpoint:
    network: Network
    config: TrainConfig
    adam: AdamState
    epoch: int
    class_names: tuple = ()

    @property
    def blueprint(self) -> NetworkBlueprint:
        return self.network.blueprint


@dataclass(eq=False)
class TrainResult:
    checkpoint: Checkpoint
    log: List[tuple] = field(default_factory=list)  # (epoch, split, metric, value)

    def log_csv(self) -> str:
        return metric_log_csv(self.log)


def metric_log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "metric", "value"])
    for epoch, split, metric, value in rows:
        w.writerow([epoch, split, metric, repr(float(value))])
    return buf.getvalue()


# -- metrics ---------------------------------------------------------------------------

def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean(pred == truth)) if truth.size else 0.0


def mean_iou(pred, truth, classes: Optional[Sequence[int]] = None) -> float:
    """Macro IoU over ``classes`` (default: labels seen in either array).

    Classes absent from both arrays are skipped.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if classes is None:
        classes = np.union1d(pred, truth)
    ious = []
    for c in classes:
        p, t = pred == c, truth == c
        union = np.sum(p | t)
        if union:
            ious.append(np.sum(p & t) / union)
    return float(np.mean(ious)) if ious else 0.0


# -- training ---------------------------------------------------------------------------

def _labels(dataset: Dataset, clouds: Sequence[PointCloud]) -> np.ndarray:
    if dataset.segmentation:
        if any(c.labels is None for c in clouds):
            raise ValueError("segmentation corpus needs per-point labels on every cloud")
        return np.concatenate([c.labels for c in clouds])
    if any(c.names is None for c in clouds):
        raise ValueError("classification corpus needs a class label on every cloud")
    return np.array([c.names for c in clouds], dtype=np.int64)


def _check_labels(dataset: Dataset, num_classes: int) -> None:
    if dataset.num_classes != num_classes:
        raise ValueError(f"model predicts {num_classes} classes but the corpus declares {dataset.num_classes}")
    for split in ("train", "test"):
        clouds = getattr(dataset, split)
        if clouds:
            lab = _labels(dataset, clouds)
            if lab.min() < 0 or lab.max() >= num_classes:
                raise ValueError(f"{split} labels fall outside [0, {num_classes})")


def _param_norms(net: Network) -> str:
    norms = {k: float(np.linalg.norm(t.value)) for k, t in net.parameters().items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
    return ", ".join(f"{k}={v:.3g}" for k, v in worst)


def train(
    blueprint: NetworkBlueprint,
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    progress=None,
) -> TrainResult:
    """Fit a fresh network on ``dataset.train``; evaluates ``dataset.test``
    every ``eval_every`` epochs. Fully determined by ``config.seed``."""
    d, c = dataset.dims
    net = Network(blueprint, d, c, dataset.num_classes, config.network, seed=int(rng_stream(config.seed, _INIT).integers(2**31)))
    _check_labels(dataset, dataset.num_classes)
    state = AdamState(lr=config.lr)
    params = {k: t.value for k, t in net.parameters().items()}
    tensors = net.parameters()
    n = len(dataset.train)
    bs = min(config.batch_size, n)
    log: List[tuple] = []
    for epoch in range(1, config.epochs + 1):
        perm = rng_stream(config.seed, _SHUFFLE, epoch).permutation(n)
        losses, correct, seen = [], 0, 0
        for b in range(n // bs):
            batch = []
            for i in perm[b * bs : (b + 1) * bs]:
                cloud = augment(dataset.train[i], config.augment, rng_stream(config.seed, _AUGMENT, epoch, int(i)))
                if config.dropout_training:
                    p = config.augment.dropout_p or DP_RATIO
                    cloud = random_input_dropout(cloud, p, rng_stream(config.seed, _DROPOUT, epoch, int(i)))
                batch.append(cloud)
            labels = _labels(dataset, batch)
            plan = net.plan(batch, threads=config.threads)
            loss, logits = net.loss_and_grads(plan, labels, True, rng_stream(config.seed, _MASKS, epoch, b))
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b} (clouds {perm[b * bs:(b + 1) * bs].tolist()}); "
                    f"largest parameter norms: {_param_norms(net)}"
                )
            if config.lr > 0:
                adam_step(params, {k: t.grad for k, t in tensors.items()}, state)
            losses.append(loss)
            correct += int(np.sum(logits.argmax(axis=1) == labels))
            seen += len(labels)
        log.append((epoch, "train", "loss", float(np.mean(losses))))
        log.append((epoch, "train", "accuracy", correct / max(seen, 1)))
        if dataset.test and (epoch % config.eval_every == 0 or epoch == config.epochs):
            ck = Checkpoint(net, config, state, epoch, dataset.class_names)
            metrics = evaluate(ck, dataset)
            for key in ("accuracy", "miou"):
                log.append((epoch, "test", key, metrics[key]))
        if progress is not None:
            print(f"epoch {epoch}: loss {np.mean(losses):.4f}", file=progress)
    return TrainResult(Checkpoint(net, config, state, config.epochs, dataset.class_names), log)


def subsample_budget(cloud: PointCloud, budget: int, rng) -> PointCloud:
    """Uniform random subset of ``budget`` points (the cloud itself if it fits)."""
    if budget < 1:
        raise ValueError("point budget must be >= 1")
    if cloud.n <= budget:
        return cloud
    return cloud.subset(np.sort(rng.choice(cloud.n, budget, replace=False)))


def predict(checkpoint: Checkpoint, clouds: Sequence[PointCloud], starts=None, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Eval-mode logits, classification (B, K) or segmentation (sum N, K)."""
    net = checkpoint.network
    out = []
    for s in range(0, len(clouds), batch_size):
        chunk = clouds[s : s + batch_size]
        st = None if starts is None else starts[s : s + batch_size]
        out.append(net.predict(chunk, st, threads))
    return np.vstack(out)


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    point_budget: Optional[int] = None,
    fps_seed: Optional[int] = None,
    threads: int = 1,
    seed: int = 0,
) -> Dict[str, float]:
    """Accuracy, per-point accuracy and mean IoU on ``dataset.test``.

    ``point_budget`` subsamples each cloud uniformly first; ``fps_seed``
    draws a random first FPS index per cloud instead of index 0.
    """
    net = checkpoint.network
    _check_labels(dataset, net.num_classes)
    clouds = dataset.test
    if point_budget is not None:
        clouds = [subsample_budget(c, point_budget, rng_stream(seed, _BUDGET, i)) for i, c in enumerate(clouds)]
    starts = None
    if fps_seed is not None:
        starts = [int(rng_stream(fps_seed, _FPS_START, i).integers(c.n)) for i, c in enumerate(clouds)]
    logits = predict(checkpoint, clouds, starts, threads=threads)
    pred = logits.argmax(axis=1)
    truth = _labels(dataset, clouds)
    classes = range(net.num_classes)
    acc = accuracy(pred, truth)
    return {
        "accuracy": acc,
        "per_point_accuracy": acc if dataset.segmentation else float("nan"),
        "miou": mean_iou(pred, truth, classes),
        "n": float(len(truth)),
    }


SWEEP_VARIANTS = ("SSG", "SSG+DP", "MSG+DP", "MRG+DP")


def density_sweep(checkpoints: Dict[str, Checkpoint], dataset: Dataset, budgets: Sequence[int], threads: int = 1) -> List[dict]:
    """Accuracy of each model variant at each point budget."""
    budgets = [int(b) for b in budgets]
    if any(b2 >= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError(f"budgets must be strictly descending, got {budgets}")
    rows = []
    for name, ck in checkpoints.items():
        for b in budgets:
            m = evaluate(ck, dataset, point_budget=b, threads=threads)
            rows.append({"variant": name, "budget": b, "accuracy": m["accuracy"], "miou": m["miou"]})
    return rows


def sweep_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "budget", "accuracy", "miou"])
    for r in rows:
        w.writerow([r["variant"], r.get("seed", 0), r["budget"], repr(float(r["accuracy"])), repr(float(r["miou"]))])
    return buf.getvalue()


# -- checkpoints ---------------------------------------------------------------------------

MAGIC = b"HPSLCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


def _arrays(ck: Checkpoint):
    net = ck.network
    for k, t in net.parameters().items():
        yield f"param:{k}", t.value
    for k, b in net.buffers().items():
        yield f"buffer:{k}", b
    for k in net.parameters():
        if k in ck.adam.m:
            yield f"adam_m:{k}", ck.adam.m[k]
            yield f"adam_v:{k}", ck.adam.v[k]


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    net = ck.network
    entries, blobs, offset = [], [], 0
    for name, arr in _arrays(ck):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blueprint": render_blueprint(net.blueprint),
        "input_d": net.input_d,
        "input_C": net.input_C,
        "num_classes": net.num_classes,
        "class_names": list(ck.class_names),
        "config": ck.config.to_dict(),
        "epoch": ck.epoch,
        "rng": {"seed": ck.config.seed, "epoch": ck.epoch},
        "adam": {"lr": ck.adam.lr, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2, "eps": ck.adam.eps, "t": ck.adam.t},
        "entries": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(head)) + head + blob
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ck: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


def checkpoint_from_bytes(data: bytes, blueprint: Optional[NetworkBlueprint] = None) -> Checkpoint:
    if len(data) < _HEADER.size + 4:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic, version, head_len = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch: file is corrupted or truncated")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    manifest = json.loads(body[_HEADER.size : _HEADER.size + head_len].decode("utf-8"))
    blob = body[_HEADER.size + head_len :]
    stored = parse_blueprint(manifest["blueprint"])
    if blueprint is not None and blueprint != stored:
        raise CheckpointError(
            f"checkpoint blueprint {manifest['blueprint']!r} does not match requested {render_blueprint(blueprint)!r}"
        )
    config = TrainConfig.from_dict(manifest["config"])
    net = Network(stored, manifest["input_d"], manifest["input_C"], manifest["num_classes"], config.network)
    a = manifest["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
    params, buffers = net.parameters(), net.buffers()
    for e in manifest["entries"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(shape)
        kind, name = e["name"].split(":", 1)
        if kind == "param":
            target = params[name].value
        elif kind == "buffer":
            target = buffers[name]
        else:
            store = adam.m if kind == "adam_m" else adam.v
            store[name] = arr.astype(np.float64)
            continue
        if target.shape != shape:
            raise CheckpointError(f"{e['name']}: stored shape {shape} does not match {target.shape}")
        target[...] = arr
    return Checkpoint(net, config, adam, manifest["epoch"], tuple(manifest["class_names"]))


def load_checkpoint(path, blueprint: Optional[NetworkBlueprint] = None) -> Checkpoint:
    """Read a checkpoint; ``blueprint`` (optional) must match the stored one."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    try:
        return checkpoint_from_bytes(data, blueprint)
    except (KeyError, ValueError, struct.error, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
