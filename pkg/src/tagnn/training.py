"""Epoch loop, learning-rate schedule, early stopping and checkpoint files."""
from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Batch, TrainExample, fnv1a64, make_batches
from .evaluation import Metrics, evaluate
from .model import LOSS_MODES, VARIANTS, ConfigError, TAGNN

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 100
    batch_size: int = 100
    lr: float = 0.001
    decay_factor: float = 0.1
    decay_every: int = 3
    l2: float = 1e-5
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    variant: str = "full"
    loss: str = "categorical"
    steps: int = 1
    k: int = 20
    select_metric: str = "mrr"
    validation_fraction: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d", "batch_size", "decay_every", "max_epochs", "patience", "steps", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0 or self.l2 < 0 or self.decay_factor <= 0:
            raise ConfigError("lr and l2 must be non-negative and decay_factor positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss!r}")
        if self.select_metric not in ("mrr", "precision"):
            raise ConfigError(f"select_metric must be 'mrr' or 'precision', got {self.select_metric!r}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")

    def to_strings(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) if isinstance(getattr(self, f.name), float)
                else str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                kwargs[f.name] = _coerce(f.type, values[f.name])
        return cls(**kwargs)


def _coerce(type_name, text: str):
    return {"int": int, "float": float}.get(str(type_name), str)(text)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step decay: ``lr * decay_factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


# ---------------------------------------------------------------------------
# one epoch


@dataclass
class EpochStats:
    mean_loss: float
    grad_norm: float
    batches: int
    examples: int


class TrainingError(RuntimeError):
    pass


def train_step(model: TAGNN, batch: Batch, optimizer: ad.Adam, lr: float, loss_mode: str) -> tuple[float, float]:
    params = model.parameters()
    with ad.Tape() as tape:
        loss = model.loss(batch.graphs, batch.labels, loss_mode)
    grads = ad.backward(loss, params, tape=tape)
    grads[model.params["embedding"]][model.pad_index] = 0.0
    grad_list = [grads[p] for p in params]
    optimizer.step(grad_list, lr=lr)
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grad_list))
    return loss.item(), norm


def train_epoch(model: TAGNN, batches: Iterable[Batch], optimizer: ad.Adam, lr: float,
                loss_mode: str = "categorical") -> EpochStats:
    """One optimizer step per batch; returns the example-weighted mean loss."""
    total, count, norms, n_batches = 0.0, 0, [], 0
    for index, batch in enumerate(batches):
        try:
            value, norm = train_step(model, batch, optimizer, lr, loss_mode)
        except ad.NumericError as exc:
            raise TrainingError(f"batch {index}: {exc}") from exc
        if not math.isfinite(value):
            raise TrainingError(f"batch {index}: non-finite loss")
        total += value * len(batch)
        count += len(batch)
        norms.append(norm)
        n_batches += 1
    if n_batches == 0:
        raise TrainingError("no batches to train on")
    return EpochStats(total / count, float(np.mean(norms)), n_batches, count)


# ---------------------------------------------------------------------------
# fit


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: TrainConfig
    vocab_hash: str = ""
    epoch: int = 0
    best_metric: float = 0.0

    def model(self) -> TAGNN:
        n_items = self.tensors["embedding"].shape[0] - 1
        params = {name: ad.parameter(np.array(value, dtype=ad.default_dtype()), name=name)
                  for name, value in self.tensors.items()}
        return TAGNN(n_items, self.config.d, self.config.variant, self.config.steps, params=params)

    @classmethod
    def from_model(cls, model: TAGNN, config: TrainConfig, vocab_hash: str = "", epoch: int = 0,
                   best_metric: float = 0.0) -> "Checkpoint":
        tensors = {name: np.array(p.data, dtype=np.float32) for name, p in model.params.items()}
        return cls(tensors, config, vocab_hash, epoch, best_metric)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_precision: float
    val_mrr: float

    def as_line(self) -> str:
        return f"{self.epoch}, {self.lr:.6g}, {self.train_loss:.6f}, {self.val_precision:.2f}, {self.val_mrr:.2f}"


@dataclass
class FitResult:
    best: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)
    model: TAGNN | None = None


def validation_split(examples: Sequence[TrainExample], fraction: float, seed: int):
    if len(examples) < 2:
        raise ValueError("need at least two examples to hold out a validation set")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_val = min(len(examples) - 1, max(1, int(round(fraction * len(examples)))))
    val = [examples[i] for i in sorted(order[:n_val])]
    train = [examples[i] for i in sorted(order[n_val:])]
    return train, val


def fit(examples: Sequence[TrainExample], n_items: int, config: TrainConfig, vocab_hash: str = "",
        on_epoch: Callable[[EpochRecord], None] | None = None,
        validate: Callable[[TAGNN], Metrics] | None = None) -> FitResult:
    """Train on a seeded 90/10 split, keeping the epoch with the best validation score.

    ``validate`` overrides the held-out evaluation (used by tests to script
    the validation curve).
    """
    config.validate()
    train, val = validation_split(examples, config.validation_fraction, config.seed)
    model = TAGNN(n_items, config.d, config.variant, config.steps, seed=config.seed)
    optimizer = ad.Adam(model.parameters(), lr=config.lr, l2=config.l2)
    if validate is None:
        def validate(m):
            return evaluate(m, val, k=config.k, batch_size=config.batch_size)

    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    best_score, stale = -math.inf, 0
    for epoch in range(config.max_epochs):
        lr = lr_at(epoch, config)
        batches = make_batches(train, config.batch_size, config.seed, epoch, pad_index=model.pad_index)
        stats = train_epoch(model, batches, optimizer, lr, config.loss)
        metrics = validate(model)
        record = EpochRecord(epoch, lr, stats.mean_loss, metrics.precision_at_k, metrics.mrr_at_k)
        history.append(record)
        log.info("epoch %s", record.as_line())
        if on_epoch:
            on_epoch(record)
        score = metrics.mrr_at_k if config.select_metric == "mrr" else metrics.precision_at_k
        if score > best_score:
            best_score, stale = score, 0
            best = Checkpoint.from_model(model, config, vocab_hash, epoch, score)
        else:
            stale += 1
            if stale >= config.patience:
                break
    return FitResult(best, history, model)


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"TAGN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(ckpt.tensors))
    for name, value in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    meta = dict(ckpt.config.to_strings())
    meta.update(vocab_hash=ckpt.vocab_hash, epoch=str(ckpt.epoch), best_metric=repr(float(ckpt.best_metric)))
    block = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    out += struct.pack("<I", len(block)) + block
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    if len(data) < 20:
        raise CheckpointError("truncated checkpoint")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    r = _Reader(body)
    r.take(4, "magic")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if fnv1a64(body) != stored:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"shape of {name}")
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (n,) = r.unpack("<I", "config length")
    meta = {}
    for line in r.take(n, "config block").decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after config block")
    return Checkpoint(
        tensors,
        TrainConfig.from_strings(meta),
        meta.get("vocab_hash", ""),
        int(meta.get("epoch", 0)),
        float(meta.get("best_metric", 0.0)),
    )


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path, vocab_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint; if ``vocab_hash`` is given it must match the stored one."""
    with open(path, "rb") as fh:
        ckpt = decode_checkpoint(fh.read())
    if vocab_hash is not None and ckpt.vocab_hash != vocab_hash:
        raise VocabularyMismatch(
            f"checkpoint was trained on vocabulary {ckpt.vocab_hash}, data uses {vocab_hash}")
    return ckpt
