"""SGD with momentum, learning-rate schedules, checkpoints and step telemetry."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .data import Dataset, augment, batch_at_step
from .models import ModelSpec, check_params, logits, loss_and_grad
from .rng import AUGMENT, make_rng

CHECKPOINT_MAGIC = b"LTHC"
CHECKPOINT_VERSION = 1


class Diverged(ad.NumericDomainError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 128
    peak_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_milestones: list[int] = field(default_factory=list)
    warmup_steps: int = 0
    total_steps: int = 1000
    order_seed: int = 0
    augment_seed: int = 0
    init_seed: int = 0
    augment: bool = False

    def __post_init__(self):
        ms = [int(m) for m in self.lr_milestones]
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if ms and ms[-1] >= self.total_steps:
            raise ValueError("lr_milestones must be < total_steps")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.lr_milestones = ms

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


def lr_at_step(cfg: TrainConfig, step: int) -> float:
    """Learning rate used for the update at ``step`` (0-based).

    Linear warmup from ``peak/warmup`` to ``peak`` over ``warmup_steps``, then
    ``peak`` times ``decay_factor`` per milestone already reached.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    passed = sum(1 for m in cfg.lr_milestones if step >= m)
    return cfg.peak_lr * cfg.lr_decay_factor ** passed


def sgd_step(params, momentum_buf, grad, lr, momentum, weight_decay, mask=None):
    """Classical momentum SGD with L2 weight decay folded into the gradient.

    Updates ``params`` and ``momentum_buf`` in place and returns both. Masked
    coordinates get no update and are held at exactly zero.
    """
    dt = params.dtype
    g = grad + dt.type(weight_decay) * params
    momentum_buf *= dt.type(momentum)
    momentum_buf += g
    if mask is not None:
        momentum_buf *= mask
    params -= dt.type(lr) * momentum_buf
    if mask is not None:
        params *= mask
    return params, momentum_buf


@dataclass
class Checkpoint:
    params: np.ndarray
    momentum: np.ndarray
    step: int
    seeds: tuple[int, int, int] = (0, 0, 0)  # init, order, augment
    mask_ref: str = ""
    spec: ModelSpec | None = None

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.params.copy(), self.momentum.copy(), self.step, tuple(self.seeds), self.mask_ref, self.spec)

    def digest(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()


class StepLog:
    """One record per executed update: step, lr, minibatch loss, gradient norm."""

    def __init__(self):
        self.step: list[int] = []
        self.lr: list[float] = []
        self.loss: list[float] = []
        self.grad_norm: list[float] = []

    def append(self, step, lr, loss, grad_norm) -> None:
        self.step.append(step)
        self.lr.append(lr)
        self.loss.append(loss)
        self.grad_norm.append(grad_norm)

    def __len__(self) -> int:
        return len(self.step)

    def extend(self, other: "StepLog") -> None:
        for a in ("step", "lr", "loss", "grad_norm"):
            getattr(self, a).extend(getattr(other, a))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "grad_norm"])
            for row in zip(self.step, self.lr, self.loss, self.grad_norm):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])

    @classmethod
    def from_csv(cls, path) -> "StepLog":
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.append(int(r["step"]), float(r["lr"]), float(r["loss"]), float(r["grad_norm"]))
        return out


class TrainResult(NamedTuple):
    params: np.ndarray
    log: StepLog
    checkpoints: dict[int, Checkpoint]
    final: Checkpoint


def train(spec: ModelSpec, params: np.ndarray, ds: Dataset, cfg: TrainConfig, steps: int | None = None,
          mask: np.ndarray | None = None, checkpoint_at=(), resume: Checkpoint | None = None,
          early_ds: Dataset | None = None, early_steps: int = 0) -> TrainResult:
    """Run ``steps`` minibatch updates (default: the whole schedule).

    Batches for global step ``s`` come from ``early_ds`` while ``s <
    early_steps`` and from ``ds`` afterwards; the order is a pure function of
    (order_seed, epoch), so resuming from a checkpoint replays the exact run.
    ``mask`` (float 0/1 vector) pins pruned coordinates at zero.
    """
    check_params(spec, params)
    if len(ds) == 0 or (early_ds is not None and early_steps > 0 and len(early_ds) == 0):
        raise ValueError("cannot train on an empty dataset")
    start = resume.step if resume is not None else 0
    steps = cfg.total_steps - start if steps is None else int(steps)
    if start + steps > cfg.total_steps:
        raise ValueError(f"{start}+{steps} steps exceed total_steps={cfg.total_steps}")
    w = params.astype(np.float32, copy=True)
    buf = resume.momentum.astype(np.float32, copy=True) if resume is not None else np.zeros_like(w)
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float32)
        w *= m
    seeds = (cfg.init_seed, cfg.order_seed, cfg.augment_seed)
    wanted = {int(s) for s in checkpoint_at}
    ckpts: dict[int, Checkpoint] = {}
    log = StepLog()

    def snap(step):
        return Checkpoint(w.copy(), buf.copy(), step, seeds, spec=spec)

    for step in range(start, start + steps):
        if step in wanted:
            ckpts[step] = snap(step)
        src = early_ds if (early_ds is not None and step < early_steps) else ds
        rows = batch_at_step(len(src), cfg.batch_size, cfg.order_seed, step)
        x = src.images[rows]
        if cfg.augment:
            x = augment(x, make_rng(cfg.augment_seed, AUGMENT, step))
        try:
            loss, g = loss_and_grad(spec, w, x, src.labels[rows])
        except ad.NumericDomainError as e:
            raise Diverged(step) from e
        if m is not None:
            g *= m
        gn = float(np.sqrt(np.dot(g.astype(np.float64), g)))
        if not (np.isfinite(loss) and np.isfinite(gn)):
            raise Diverged(step)
        lr = lr_at_step(cfg, step)
        sgd_step(w, buf, g, lr, cfg.momentum, cfg.weight_decay, m)
        log.append(step, lr, loss, gn)
    end = start + steps
    final = snap(end)
    if end in wanted:
        ckpts[end] = final
    return TrainResult(w, log, ckpts, final)


def evaluate(spec: ModelSpec, params: np.ndarray, ds: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over ``ds``."""
    z = logits(spec, params, ds.images)
    if not np.all(np.isfinite(z)):
        return float("inf"), float(np.mean(np.nan_to_num(z).argmax(1) == ds.labels))
    loss = ad.per_example_cross_entropy(z, ds.labels).mean()
    return float(loss), float(np.mean(z.argmax(1) == ds.labels))


def grad_norm_histogram(log: StepLog, first_k: int, bins: int = 20, range=None):
    """Histogram ``(counts, edges)`` of the first ``first_k`` gradient norms."""
    vals = np.asarray(log.grad_norm[:first_k], dtype=np.float64)
    return np.histogram(vals, bins=bins, range=range)


# ------------------------------------------------------------ checkpoint file
#
# magic "LTHC" | u32 version | u64 param count | u64 step | f32le params
# | u32 len + layout JSON | u8 has-momentum [+ f32le momentum]
# | 3 x i64 seeds | u32 len + mask ref (utf-8)


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    p = np.asarray(ck.params, dtype="<f4")
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<IQQ", CHECKPOINT_VERSION, p.size, ck.step))
    out.write(p.tobytes())
    layout = json.dumps(ck.spec.to_dict(), sort_keys=True) if ck.spec is not None else ""
    out.write(_pack_str(layout))
    if ck.momentum is not None:
        out.write(b"\x01" + np.asarray(ck.momentum, dtype="<f4").tobytes())
    else:
        out.write(b"\x00")
    out.write(struct.pack("<qqq", *(int(s) for s in ck.seeds)))
    out.write(_pack_str(ck.mask_ref))
    return out.getvalue()


def save_checkpoint(path, ck: Checkpoint) -> str:
    """Write ``ck``; returns the sha256 of the file contents."""
    raw = checkpoint_bytes(ck)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n, step = struct.unpack_from("<IQQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 24
    params = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float32)
    off += 4 * n
    (ln,) = struct.unpack_from("<I", raw, off)
    off += 4
    layout = raw[off:off + ln].decode()
    off += ln
    spec = ModelSpec.from_dict(json.loads(layout)) if layout else None
    has_mom = raw[off]
    off += 1
    momentum = None
    if has_mom:
        momentum = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
    seeds = struct.unpack_from("<qqq", raw, off)
    off += 24
    (ln,) = struct.unpack_from("<I", raw, off)
    mask_ref = raw[off + 4:off + 4 + ln].decode()
    if momentum is None:
        momentum = np.zeros_like(params)
    return Checkpoint(params, momentum, int(step), tuple(seeds), mask_ref, spec)
