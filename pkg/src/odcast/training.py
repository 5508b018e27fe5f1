"""Chronological training loop with Adam, early stopping, and checkpointing.

Each epoch replays the stream from the initial memory bank: step through
window k's events, predict window k+1, take one Adam step on the masked OD
loss against window k+1's ground truth.  The walk continues into the
validation span with updates disabled; validation MAE over all pairs drives
early stopping.  Test windows are never touched here.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import evaluation
from .autodiff import Tensor, backward, grad_of, zero_grads
from .errors import ChecksumMismatch, EmptyTrainSplit, IoError, ShapeError, VersionMismatch
from .events import NodeCatalog, TransactionEvent, batch_by_window, default_t0, od_matrix_series
from .model import (HyperParams, MemoryBank, ModelParams, empty_params, init_params,
                    od_loss, predict_od, step)

CHECKPOINT_MAGIC = b"CMODCKPT"
CHECKPOINT_VERSION = 1


# -- Adam ---------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, Tensor]], grads: Mapping[str, np.ndarray] | None,
              opt: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    ``grads`` may be None to use the gradients accumulated on the tensors by
    the last backward pass.
    """
    opt.step_count += 1
    t = opt.step_count
    correct1 = 1.0 - opt.beta1 ** t
    correct2 = 1.0 - opt.beta2 ** t
    for name, tensor in params:
        g = grads[name] if grads is not None else grad_of(tensor)
        g = np.asarray(g, dtype=float)
        if g.shape != tensor.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {tensor.data.shape}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(tensor.data)
            opt.v[name] = np.zeros_like(tensor.data)
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / correct1
        v_hat = opt.v[name] / correct2
        tensor.data = tensor.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return opt


# -- configuration ------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    """Contiguous chronological window counts: train, then validation, then test."""

    train_windows: int
    val_windows: int
    test_windows: int = 0

    def __post_init__(self):
        if self.train_windows < 2:
            raise EmptyTrainSplit("need at least two training windows (state + target)")
        if self.val_windows < 1 or self.test_windows < 0:
            raise ValueError("val_windows must be >= 1 and test_windows >= 0")

    @property
    def total(self) -> int:
        return self.train_windows + self.val_windows + self.test_windows

    @classmethod
    def from_days(cls, train_days: float, val_days: float, test_days: float, tau: float,
                  day_length: float = 86400.0) -> "Splits":
        per_day = day_length / tau
        if abs(per_day - round(per_day)) > 1e-9:
            raise ValueError(f"tau {tau} does not divide the day length {day_length}")
        per_day = round(per_day)
        return cls(train_windows=round(train_days * per_day),
                   val_windows=round(val_days * per_day),
                   test_windows=round(test_days * per_day))


@dataclass
class TrainConfig:
    max_epochs: int
    splits: Splits
    patience: int = 10
    lr: float = 1e-4
    seed: int = 0
    t0: float | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mae: float
    val_rmse: float
    val_pcc: float  # nan when validation variance is degenerate
    seconds: float

    def row(self) -> str:
        return (f"{self.epoch},{self.train_loss!r},{self.val_mae!r},{self.val_rmse!r},"
                f"{self.val_pcc!r},{self.seconds!r}")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats]
    best_epoch: int
    best_val_mae: float
    opt: AdamState


class EarlyStopper:
    """Strict-improvement tracker: stop after ``patience`` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch's metric; returns True when training should stop."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def write_history(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,train_loss,val_mae,val_rmse,val_pcc,seconds\n")
        for stats in history:
            fh.write(stats.row() + "\n")


# -- the loop ------------------------------------------------------------


def train(events: Sequence[TransactionEvent], catalog: NodeCatalog, hyper: HyperParams,
          tc: TrainConfig, on_epoch: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """Train from scratch, returning the best-validation parameters.

    Stops once validation MAE has failed to improve for ``patience``
    consecutive epochs (or after ``max_epochs``).  The memory bank is reset
    to the initial state at the start of every epoch, so epochs are
    independent replays.
    """
    tau = hyper.tau
    t0 = tc.t0 if tc.t0 is not None else default_t0(events, tau)
    splits = tc.splits
    walk_windows = splits.train_windows + splits.val_windows
    horizon = t0 + walk_windows * tau
    visible = [ev for ev in events if t0 <= ev.timestamp < horizon]
    batches = batch_by_window(visible, t0, tau, until=horizon)

    truths = od_matrix_series(visible, t0, tau, walk_windows, hyper.n)

    params = init_params(hyper, tc.seed)
    named = params.named_tensors()
    opt = AdamState(lr=tc.lr)

    history: list[EpochStats] = []
    stopper = EarlyStopper(tc.patience)
    best_state = params.state_dict()

    for epoch in range(1, tc.max_epochs + 1):
        started = time.perf_counter()
        bank = MemoryBank.initial(params, hyper, t0)
        train_losses: list[float] = []
        val_preds: list[np.ndarray] = []
        val_truths: list[np.ndarray] = []

        for w in range(walk_windows - 1):
            result = step(bank, batches[w], params, hyper, catalog)
            target = w + 1
            if target < splits.train_windows:
                pred = predict_od(result.z, params)
                loss = od_loss(pred.raw, truths[target], mse_loss=hyper.mse_loss)
                backward(loss)
                adam_step(named, None, opt)
                zero_grads(t for _, t in named)
                train_losses.append(loss.item())
            else:
                pred = predict_od(result.z, params)
                val_preds.append(pred.matrix)
                val_truths.append(truths[target])

        report = evaluation.compute_metrics(val_preds, val_truths, scope="all_pairs")
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(train_losses)),
            val_mae=report.mae,
            val_rmse=report.rmse,
            val_pcc=report.pcc if report.pcc is not None else math.nan,
            seconds=time.perf_counter() - started,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)

        should_stop = stopper.update(stats.val_mae)
        if stopper.best_epoch == epoch:
            best_state = params.state_dict()
        if should_stop:
            break

    params.load_state(best_state)
    return TrainResult(params=params, history=history, best_epoch=stopper.best_epoch,
                       best_val_mae=stopper.best, opt=opt)


# -- checkpoints ---------------------------------------------------------


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def save_checkpoint(params: ModelParams, opt: AdamState | None, hyper: HyperParams,
                    path) -> None:
    """Binary checkpoint: magic, version, JSON manifest, float64 payload, checksum."""
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.named_tensors()]
    adam_meta = None
    if opt is not None:
        adam_meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                     "step_count": opt.step_count}
        arrays.extend((f"adam.m.{name}", arr) for name, arr in sorted(opt.m.items()))
        arrays.extend((f"adam.v.{name}", arr) for name, arr in sorted(opt.v.items()))

    manifest = {
        "hyper": asdict(hyper),
        "adam": adam_meta,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(manifest_bytes)))
            fh.write(manifest_bytes)
            fh.write(payload)
            fh.write(_checksum(payload))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ModelParams, AdamState | None, HyperParams]:
    """Inverse of :func:`save_checkpoint`; bitwise-exact array round trip."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise IoError(f"{path} is not a checkpoint (bad magic bytes)")
    version = struct.unpack_from("<I", blob, 8)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    manifest_len = struct.unpack_from("<I", blob, 12)[0]
    manifest_end = 16 + manifest_len
    if manifest_end > len(blob):
        raise ChecksumMismatch("checkpoint truncated inside the manifest")
    manifest = json.loads(blob[16:manifest_end].decode("utf-8"))

    total = sum(int(np.prod(shape)) for _, shape in manifest["arrays"])
    payload_end = manifest_end + 8 * total
    if payload_end + 8 > len(blob):
        raise ChecksumMismatch("checkpoint truncated inside the payload")
    payload = blob[manifest_end:payload_end]
    if _checksum(payload) != blob[payload_end:payload_end + 8]:
        raise ChecksumMismatch("checkpoint payload failed its checksum")

    values: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest["arrays"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        values[name] = arr.reshape([int(s) for s in shape]).astype(np.float64)
        offset += count

    hyper = HyperParams(**manifest["hyper"])
    params = empty_params(hyper)
    params.load_state({k: v for k, v in values.items() if not k.startswith("adam.")})

    opt = None
    if manifest["adam"] is not None:
        meta = manifest["adam"]
        opt = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                        eps=meta["eps"], step_count=meta["step_count"])
        for key, arr in values.items():
            if key.startswith("adam.m."):
                opt.m[key[len("adam.m."):]] = arr.copy()
            elif key.startswith("adam.v."):
                opt.v[key[len("adam.v."):]] = arr.copy()
    return params, opt, hyper
