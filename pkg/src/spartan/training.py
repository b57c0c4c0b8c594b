"""Composite loss, optimizers, training loop, and checkpoint persistence.

The training loss is the weighted sum of the task loss (softmax
cross-entropy) and the filtering loss (all filter-layer penalties summed),
scaled by ``filter_scale``.  The two streams compete: the classifier wants
signal, the filtering layers are rewarded for destroying it.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .layers import BuildConfig, Network, PixelRange, build_network
from .tensor import Parameter, Rng, Tape

CHECKPOINT_MAGIC = b"SPNT1"

OPTIMIZERS = ("adam", "sgd_momentum")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborts rather than clamping."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    filter_scale: float = 1e-5  # weight of the filtering loss in the total
    optimizer: str = "adam"
    seed: int = 0
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.filter_scale < 0:
            raise ValueError("filter scale must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LossBreakdown:
    task_loss: float
    filter_loss: float
    total: float


@dataclass
class HistoryRow:
    step: int
    epoch: int
    loss: LossBreakdown


def composite_loss(logits, labels, filter_penalties, filter_scale: float):
    """Total = task + scale * sum(penalties), built on the tape.

    Returns the total as a tape tensor plus a float breakdown.
    """
    if filter_scale < 0:
        raise ValueError("filter scale must be >= 0")
    task = T.softmax_cross_entropy(logits, labels)
    if filter_penalties:
        filt = filter_penalties[0]
        for p in filter_penalties[1:]:
            filt = T.add(filt, p)
        total = T.add(task, T.scale(filt, filter_scale))
        filt_val = filt.item()
    else:
        total = task
        filt_val = 0.0
    breakdown = LossBreakdown(task.item(), filt_val, total.item())
    drift = abs(breakdown.total - (breakdown.task_loss + filter_scale * breakdown.filter_loss))
    if drift > 1e-6 * max(1.0, abs(breakdown.total)):
        raise AssertionError(f"loss breakdown drift {drift}")
    return total, breakdown


class Adam:
    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        self.t = 0
        self.m = [np.zeros_like(p.value.data) for p in params]
        self.v = [np.zeros_like(p.value.data) for p in params]

    def step(self):
        self.t += 1
        correct1 = 1.0 - self.b1 ** self.t
        correct2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.value.data -= np.asarray(self.lr * update, dtype=p.value.dtype)


class SgdMomentum:
    def __init__(self, params: list[Parameter], cfg: TrainConfig):
        self.params = params
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum
        self.v = [np.zeros_like(p.value.data) for p in params]

    def step(self):
        for p, v in zip(self.params, self.v):
            v *= self.momentum
            v += p.grad.data
            p.value.data -= np.asarray(self.lr * v, dtype=p.value.dtype)


def make_optimizer(net: Network, cfg: TrainConfig):
    params = net.parameters()
    return Adam(params, cfg) if cfg.optimizer == "adam" else SgdMomentum(params, cfg)


def train_step(net: Network, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, optimizer) -> LossBreakdown:
    """One update: zero grads, forward, composite loss, backward, optimize."""
    if len(images) == 0:
        raise ValueError("empty batch")
    for p in net.parameters():
        p.zero_grad()
    try:
        with Tape() as tape:
            logits, penalties = net.forward(images)
            total, breakdown = composite_loss(logits, labels, penalties, cfg.filter_scale)
            tape.backward(total)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite loss or activation: {exc}") from exc
    if not np.isfinite(breakdown.total):
        raise TrainingDiverged(f"loss diverged: {breakdown}")
    optimizer.step()
    return breakdown


def evaluate_accuracy(net: Network, dataset: Dataset, limit: int | None = None,
                      batch_size: int = 512) -> float:
    """Fraction of argmax predictions matching the labels."""
    images, labels = dataset.images, dataset.labels
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    pred = net.predict(images, batch_size=batch_size)
    return float((pred == labels).mean())


@dataclass
class Checkpoint:
    candidate: str
    hyper: dict
    tensors: dict[str, np.ndarray]
    history: list[HistoryRow] = field(default_factory=list)
    epoch_accuracy: list[tuple[int, float]] = field(default_factory=list)


def train(net: Network, train_set: Dataset, cfg: TrainConfig,
          test_set: Dataset | None = None,
          progress: "callable | None" = None) -> Checkpoint:
    """Seeded epochs of shuffled batches; loss history captured every step."""
    rng = Rng(cfg.seed)
    optimizer = make_optimizer(net, cfg)
    history: list[HistoryRow] = []
    epoch_accuracy: list[tuple[int, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        for bx, by in batches(train_set, cfg.batch_size, seed=rng.split(epoch), shuffle=True):
            breakdown = train_step(net, bx, by, cfg, optimizer)
            step += 1
            history.append(HistoryRow(step, epoch, breakdown))
        if test_set is not None:
            epoch_accuracy.append((epoch, evaluate_accuracy(net, test_set)))
        if progress is not None:
            progress(epoch, history[-1] if history else None)
    return Checkpoint(
        candidate=net.candidate,
        hyper=_hyper_dict(net.build, cfg),
        tensors=_named_tensors(net),
        history=history,
        epoch_accuracy=epoch_accuracy,
    )


def _hyper_dict(build: BuildConfig, cfg: TrainConfig) -> dict:
    return {
        "filters": build.filters,
        "sigma": build.sigma,
        "input_hw": list(build.input_hw),
        "entropy_mode": build.entropy_mode,
        "build_seed": build.seed,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "filter_scale": cfg.filter_scale,
        "optimizer": cfg.optimizer,
        "train_seed": cfg.seed,
    }


def _named_tensors(net: Network) -> dict[str, np.ndarray]:
    # snapshot copies: the checkpoint must not alias live parameters
    tensors = {p.name: p.value.data.copy() for p in net.parameters()}
    for layer in net.layers:
        stats = getattr(layer, "stats", None)
        if stats is not None:
            tensors[f"{layer.name}.range_min"] = stats.x_min.astype(np.float32)
            tensors[f"{layer.name}.range_max"] = stats.x_max.astype(np.float32)
    return tensors


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "SPNT1", then a u32-le length-prefixed UTF-8 JSON metadata block
# (candidate, hyperparameters, history, epoch accuracy), then per tensor:
# u32-le name length + name, u32-le rank, u32-le extents, raw f32-le values.


def _meta_json(ckpt: Checkpoint) -> str:
    meta = {
        "candidate": ckpt.candidate,
        "hyper": ckpt.hyper,
        "history": [[r.step, r.epoch, r.loss.task_loss, r.loss.filter_loss, r.loss.total]
                    for r in ckpt.history],
        "epoch_accuracy": [[e, a] for e, a in ckpt.epoch_accuracy],
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    meta = _meta_json(ckpt).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name, arr in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    view = memoryview(data)[5:]

    def take(n: int, what: str):
        nonlocal view
        if len(view) < n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk, view = view[:n], view[n:]
        return chunk

    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta = json.loads(bytes(take(meta_len, "metadata")).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    while len(view):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if shape else 1
        raw = take(4 * count, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    history = [HistoryRow(s, e, LossBreakdown(t, f, tot))
               for s, e, t, f, tot in meta["history"]]
    return Checkpoint(
        candidate=meta["candidate"],
        hyper=meta["hyper"],
        tensors=tensors,
        history=history,
        epoch_accuracy=[(int(e), float(a)) for e, a in meta["epoch_accuracy"]],
    )


def restore_network(ckpt: Checkpoint) -> Network:
    """Rebuild the candidate architecture and load its saved parameters."""
    hyper = ckpt.hyper
    stats = None
    if "filter1.range_min" in ckpt.tensors:
        stats = PixelRange(ckpt.tensors["filter1.range_min"],
                           ckpt.tensors["filter1.range_max"])
    build = BuildConfig(
        filters=int(hyper["filters"]),
        sigma=float(hyper["sigma"]),
        input_hw=tuple(hyper["input_hw"]),
        entropy_mode=hyper["entropy_mode"],
        stats=stats,
        seed=int(hyper["build_seed"]),
    )
    net = build_network(ckpt.candidate, build)
    for param in net.parameters():
        if param.name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {param.name}")
        saved = ckpt.tensors[param.name]
        if saved.shape != param.value.shape:
            raise CheckpointError(
                f"shape mismatch for {param.name}: {saved.shape} vs {param.value.shape}"
            )
        param.value.data[...] = saved
    return net


def history_csv(history: list[HistoryRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["step", "epoch", "task_loss", "filter_loss", "total_loss"])
    for row in history:
        writer.writerow([row.step, row.epoch,
                         f"{row.loss.task_loss:.6f}",
                         f"{row.loss.filter_loss:.6f}",
                         f"{row.loss.total:.6f}"])
    return out.getvalue()


def smoothed_first_crossing(history: list[HistoryRow], threshold: float,
                            window: int = 50) -> int | None:
    """First step whose moving-average task loss falls below ``threshold``."""
    values = np.array([row.loss.task_loss for row in history], dtype=np.float64)
    if len(values) == 0:
        return None
    kernel = np.ones(min(window, len(values)))
    smooth = np.convolve(values, kernel / kernel.size, mode="valid")
    below = np.nonzero(smooth < threshold)[0]
    if len(below) == 0:
        return None
    return int(history[below[0] + kernel.size - 1].step)
