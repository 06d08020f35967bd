"""Magnitude pruning masks and iterative magnitude pruning with rewinding."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .models import ModelSpec
from .trainer import Checkpoint, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

MASK_MAGIC = b"LTHM"
MASK_VERSION = 1


@dataclass
class PruneMask:
    """Binary keep-vector aligned with the flat parameters.

    ``nominal`` is the exact target density (product of ``1 - fraction`` over
    rounds so far); prune counts are floored against it so realized densities
    never drift more than one coordinate from the nominal schedule.
    """

    keep: np.ndarray  # bool, True = weight survives
    prunable: np.ndarray  # bool
    round: int = 0
    parent: str = ""
    nominal: float = 1.0

    @classmethod
    def full(cls, spec_or_flags) -> "PruneMask":
        flags = spec_or_flags.prunable if isinstance(spec_or_flags, ModelSpec) else np.asarray(spec_or_flags, bool)
        return cls(np.ones(len(flags), dtype=bool), flags.copy())

    @property
    def n_prunable(self) -> int:
        return int(self.prunable.sum())

    @property
    def surviving(self) -> int:
        return int((self.keep & self.prunable).sum())

    @property
    def density(self) -> float:
        return self.surviving / max(self.n_prunable, 1)

    def as_float(self) -> np.ndarray:
        return self.keep.astype(np.float32)

    def checksum(self) -> str:
        return hashlib.sha256(np.packbits(self.keep, bitorder="little").tobytes()).hexdigest()[:16]


def apply_mask(params: np.ndarray, mask: PruneMask) -> np.ndarray:
    """Element-wise ``mask * params`` (a new array)."""
    return np.where(mask.keep, params, np.float32(0)).astype(params.dtype)


def sparsity_after_rounds(rounds: int, fraction: float = 0.2) -> float:
    """Fraction of prunable weights remaining: ``(1 - fraction) ** rounds``."""
    return (1.0 - fraction) ** rounds


def magnitude_prune(params: np.ndarray, mask: PruneMask, fraction: float,
                    spec: ModelSpec | None = None, per_layer: bool = False) -> PruneMask:
    """Remove the smallest-magnitude surviving prunable weights.

    Pruning is global across layers unless ``per_layer`` (which needs
    ``spec``). Ties are broken by ascending coordinate index.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if mask.surviving == 0:
        raise ValueError("mask is already empty")
    nominal = mask.nominal * (1.0 - fraction)
    keep = mask.keep.copy()
    if per_layer:
        if spec is None:
            raise ValueError("per-layer pruning needs the model spec")
        for s in spec.slots:
            if s.prunable:
                sl = slice(s.offset, s.stop)
                target = _keep_count(nominal * s.size)
                _prune_to(params[sl], keep[sl], np.ones(s.size, bool), target)
    else:
        target = _keep_count(nominal * mask.n_prunable)
        _prune_to(params, keep, mask.prunable, target)
    return PruneMask(keep, mask.prunable, mask.round + 1, mask.parent, nominal)


def _keep_count(x: float) -> int:
    # Prune counts are floored, so survivor counts round up; 1e-9 absorbs float noise in the products.
    return int(math.ceil(x - 1e-9))


def _prune_to(params, keep, prunable, target) -> None:
    live = np.flatnonzero(keep & prunable)
    n_prune = len(live) - target
    if n_prune <= 0:
        return
    mags = np.abs(params[live].astype(np.float64))
    order = np.lexsort((live, mags))  # magnitude first, then index
    keep[live[order[:n_prune]]] = False


@dataclass
class RoundRecord:
    round: int
    density: float
    test_acc: float
    train_acc: float
    mask_checksum: str
    start_digest: str  # sha256 of the (masked, rewound) starting weights
    final_params: np.ndarray | None = None


@dataclass
class ImpResult:
    rounds: list[RoundRecord]
    rewind: Checkpoint
    masks: list[PruneMask]
    pretrain_acc: float = float("nan")
    meta: dict = field(default_factory=dict)

    def curve(self) -> list[tuple[float, float]]:
        return [(r.density, r.test_acc) for r in self.rounds]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "density", "test_acc", "train_acc"])
            for r in self.rounds:
                w.writerow([r.round, repr(r.density), repr(r.test_acc), repr(r.train_acc)])


def read_imp_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"round": int(r["round"]), "density": float(r["density"]),
             "test_acc": float(r["test_acc"]), "train_acc": float(r["train_acc"])}
            for r in csv.DictReader(fh)
        ]


def pretrain(spec: ModelSpec, init_params: np.ndarray, ds: Dataset, t_r: int, cfg: TrainConfig) -> Checkpoint:
    """Phase 1: dense training for ``t_r`` steps; returns the rewind checkpoint."""
    if t_r > cfg.total_steps:
        raise ValueError(f"t_r={t_r} exceeds pre-training total_steps={cfg.total_steps}")
    if t_r == 0:
        return Checkpoint(init_params.astype(np.float32, copy=True), np.zeros_like(init_params, dtype=np.float32), 0,
                          (cfg.init_seed, cfg.order_seed, cfg.augment_seed), spec=spec)
    return train(spec, init_params, ds, cfg, steps=t_r).final


def imp_run(spec: ModelSpec, init_params: np.ndarray, pretrain_ds: Dataset, full_ds: Dataset, t_r: int,
            rounds: int, fraction: float, cfg_pre: TrainConfig, cfg_main: TrainConfig,
            test_ds: Dataset | None = None, per_layer: bool = False, reset_momentum: bool = False,
            keep_params: bool = False, rewind: Checkpoint | None = None) -> ImpResult:
    """Iterative magnitude pruning with rewinding to step ``t_r``.

    Phase 1 pre-trains on ``pretrain_ds`` for ``t_r`` steps (or takes the
    given ``rewind`` checkpoint). Each of ``rounds`` mask-search rounds
    trains ``mask * w_tr`` on ``full_ds`` to completion and prunes
    ``fraction`` of the surviving weights by magnitude; the final mask is then
    trained once more. Every trained network is evaluated, so the result holds
    one accuracy per density ``(1 - fraction) ** r`` for ``r = 0..rounds``.

    The momentum buffer saved with ``w_tr`` is restored at each rewind unless
    ``reset_momentum``.
    """
    if rounds < 1:
        raise ValueError("imp_run needs rounds >= 1")
    test_ds = test_ds if test_ds is not None else full_ds
    ck = rewind if rewind is not None else pretrain(spec, init_params, pretrain_ds, t_r, cfg_pre)
    pre_acc = evaluate(spec, ck.params, test_ds)[1]
    mask = PruneMask.full(spec)
    mask.parent = ck.digest()[:16]
    records, masks = [], [mask]
    for r in range(rounds + 1):
        start = apply_mask(ck.params, mask)
        resume = Checkpoint(start, np.zeros_like(start) if reset_momentum else ck.momentum.copy(), 0, ck.seeds)
        out = train(spec, start, full_ds, cfg_main, mask=mask.as_float(), resume=resume)
        # Training always runs the whole main schedule from its step 0.
        test_acc = evaluate(spec, out.params, test_ds)[1]
        train_acc = evaluate(spec, out.params, full_ds)[1]
        records.append(RoundRecord(r, mask.density, test_acc, train_acc, mask.checksum(),
                                   _digest(start), out.params if keep_params else None))
        log.info("imp round %d density %.4f test_acc %.4f", r, mask.density, test_acc)
        if r < rounds:
            mask = magnitude_prune(out.params, mask, fraction, spec, per_layer)
            masks.append(mask)
    return ImpResult(records, ck, masks, pre_acc)


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


# ------------------------------------------------------------------ mask file
# magic "LTHM" | u32 version | u64 length | u32 round | 32-byte parent hash | packed bits


def save_mask(path, mask: PruneMask, parent_hash: str = "") -> None:
    h = bytes.fromhex(parent_hash)[:32] if parent_hash else b""
    h = h.ljust(32, b"\x00")
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<IQI", MASK_VERSION, len(mask.keep), mask.round))
        fh.write(h)
        fh.write(np.packbits(mask.keep, bitorder="little").tobytes())
        fh.write(np.packbits(mask.prunable, bitorder="little").tobytes())
        fh.write(struct.pack("<d", mask.nominal))


def load_mask(path) -> tuple[PruneMask, str]:
    raw = Path(path).read_bytes()
    if raw[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file (bad magic)")
    version, n, rnd = struct.unpack_from("<IQI", raw, 4)
    if version != MASK_VERSION:
        raise ValueError(f"{path}: unsupported mask version {version}")
    off = 20
    parent = raw[off:off + 32].hex()
    off += 32
    nb = (n + 7) // 8
    keep = np.unpackbits(np.frombuffer(raw, np.uint8, nb, off), count=n, bitorder="little").astype(bool)
    off += nb
    prunable = np.unpackbits(np.frombuffer(raw, np.uint8, nb, off), count=n, bitorder="little").astype(bool)
    off += nb
    (nominal,) = struct.unpack_from("<d", raw, off)
    return PruneMask(keep, prunable, rnd, parent[:16], nominal), parent
