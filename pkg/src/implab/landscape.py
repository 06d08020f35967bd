"""Loss-landscape diagnostics: interpolation barriers, LMC onset, per-example
error and the top Hessian eigenvalue."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .models import ModelSpec, check_params, logits, loss_and_grad
from .rng import PROBE, derive_seed, make_rng
from .trainer import Checkpoint, TrainConfig, train

ONSET_THRESHOLD = 0.02
DEFAULT_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
METRICS = ("cross_entropy", "zero_one_error")


@dataclass
class BarrierReport:
    """Barrier between two networks for one metric.

    ``per_example`` holds each example's excess loss at ``alpha_star``, the
    grid point maximizing the aggregate excess, so ``aggregate`` is exactly
    their mean. ``per_example_sup`` holds each example's own maximum over the
    grid (equal to ``per_example`` in midpoint mode).
    """

    metric: str
    alphas: tuple[float, ...]
    aggregate: float
    per_example: np.ndarray
    ids: np.ndarray
    endpoint_losses: tuple[float, float]
    alpha_star: float
    per_example_sup: np.ndarray
    curve: list[float] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return "midpoint" if self.alphas == (0.5,) else "sweep"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "barrier"])
            for i, b in zip(self.ids, self.per_example):
                w.writerow([int(i), repr(float(b))])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({
                "metric": self.metric, "mode": self.mode, "alphas": list(self.alphas),
                "aggregate": self.aggregate, "alpha_star": self.alpha_star,
                "endpoint_losses": list(self.endpoint_losses), "curve": self.curve,
                "n_examples": int(len(self.ids)),
            }, fh, indent=2)


@dataclass
class ChildPair:
    parent_step: int
    a: np.ndarray
    b: np.ndarray
    seeds: tuple[tuple[int, int], tuple[int, int]]  # (order, augment) per child


def interpolate(w: np.ndarray, w_prime: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * w + (1 - alpha) * w_prime``."""
    if w.shape != w_prime.shape:
        raise ValueError("interpolation endpoints have different layouts")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return w.copy()
    if alpha == 0.0:
        return w_prime.copy()
    # Blend as w' + a (w - w') so identical endpoints stay bit-identical.
    return w_prime + w.dtype.type(alpha) * (w - w_prime)


def barrier_from_losses(loss_fn: Callable[[np.ndarray], np.ndarray], w, w_prime, mode: str = "midpoint",
                        grid=None) -> tuple[float, np.ndarray, np.ndarray, float, tuple, list, tuple]:
    """Excess of ``loss_fn`` along the segment over the linear blend of its
    endpoint values. ``loss_fn`` maps a parameter vector to per-example losses.

    Returns (aggregate, per_example_at_argmax, per_example_sup, alpha_star,
    alphas, aggregate_curve, endpoint_means).
    """
    if mode == "midpoint":
        alphas = (0.5,)
    elif mode == "sweep":
        alphas = tuple(float(a) for a in (grid if grid is not None else DEFAULT_GRID))
    else:
        raise ValueError(f"unknown barrier mode {mode!r}")
    la = np.asarray(loss_fn(w), dtype=np.float64)
    lb = np.asarray(loss_fn(w_prime), dtype=np.float64)
    excess = []
    for a in alphas:
        if a == 1.0:
            mid = la
        elif a == 0.0:
            mid = lb
        else:
            mid = np.asarray(loss_fn(interpolate(w, w_prime, a)), dtype=np.float64)
        excess.append(mid - (lb + a * (la - lb)))
    excess = np.stack(excess)
    agg = excess.mean(axis=1)
    k = int(np.argmax(agg))
    return (float(agg[k]), excess[k], excess.max(axis=0), alphas[k], alphas,
            [float(v) for v in agg], (float(la.mean()), float(lb.mean())))


def per_example_loss(spec: ModelSpec, params: np.ndarray, ds: Dataset, metric: str = "cross_entropy") -> np.ndarray:
    z = logits(spec, params, ds.images)
    if metric == "cross_entropy":
        return ad.per_example_cross_entropy(z, ds.labels)
    if metric == "zero_one_error":
        return (z.argmax(axis=1) != ds.labels).astype(np.float64)
    raise ValueError(f"unknown metric {metric!r}")


def loss_barrier(spec: ModelSpec, pair: ChildPair, ds: Dataset, metric: str = "cross_entropy",
                 mode: str = "midpoint", grid=None) -> BarrierReport:
    if len(ds) == 0:
        raise ValueError("barrier needs a non-empty dataset")
    check_params(spec, pair.a)
    check_params(spec, pair.b)
    agg, per, sup, a_star, alphas, curve, ends = barrier_from_losses(
        lambda p: per_example_loss(spec, p, ds, metric), pair.a, pair.b, mode, grid)
    return BarrierReport(metric, alphas, agg, per, ds.ids.copy(), ends, a_star, sup, curve)


def spawn_children(spec: ModelSpec, parent: Checkpoint, count: int, ds: Dataset, cfg: TrainConfig,
                   seed_base: int, from_step: int | None = None, vary_seeds: bool = True) -> list[ChildPair]:
    """Train ``count`` copies of ``parent`` to completion with different data
    order and augmentation seeds; return every unordered pair.

    Children resume the schedule at ``from_step`` (default: the parent's
    step) with the parent's momentum buffer.
    """
    step0 = parent.step if from_step is None else from_step
    children, seeds = [], []
    for i in range(count):
        j = i if vary_seeds else 0
        order, aug = derive_seed(seed_base, 1, j), derive_seed(seed_base, 2, j)
        ccfg = cfg.with_(order_seed=order, augment_seed=aug)
        start = Checkpoint(parent.params, parent.momentum, step0, parent.seeds)
        children.append(train(spec, parent.params, ds, ccfg, resume=start).params)
        seeds.append((order, aug))
    return [ChildPair(parent.step, children[i], children[j], (seeds[i], seeds[j]))
            for i, j in itertools.combinations(range(count), 2)]


def onset_from_barriers(steps, barriers, threshold: float = ONSET_THRESHOLD):
    """Smallest step from which every later barrier is below ``threshold``."""
    onset = None
    for s, b in sorted(zip(steps, barriers), reverse=True):
        if b < threshold:
            onset = s
        else:
            break
    return onset


def lmc_onset(spec: ModelSpec, parents: list[Checkpoint], ds: Dataset, cfg: TrainConfig, count: int = 2,
              seed_base: int = 0, threshold: float = ONSET_THRESHOLD, from_step: int | None = None):
    """Onset of linear mode connectivity over checkpoints at increasing steps.

    Each parent spawns ``count`` children; its barrier is the mean midpoint
    0-1 barrier over child pairs. Returns ``(onset_step_or_None, barriers)``.
    """
    barriers = []
    for p in parents:
        pairs = spawn_children(spec, p, count, ds, cfg, seed_base, from_step=from_step)
        barriers.append(float(np.mean([loss_barrier(spec, pr, ds, "zero_one_error").aggregate for pr in pairs])))
    return onset_from_barriers([p.step for p in parents], barriers, threshold), barriers


def per_example_error(spec: ModelSpec, params: np.ndarray, ds: Dataset) -> dict[int, int]:
    """0-1 loss of every example, keyed by example ID."""
    err = per_example_loss(spec, params, ds, "zero_one_error").astype(int)
    return dict(zip(ds.ids.tolist(), err.tolist()))


# ------------------------------------------------------------------- Hessian


def top_eigenvalue(grad_fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, iterations: int = 100,
                   tolerance: float = 1e-4, seed: int = 0) -> float:
    """Power iteration on finite-difference Hessian-vector products.

    ``Hv ~ (g(w + eps v) - g(w - eps v)) / (2 eps)`` with
    ``eps = 1e-3 (1 + |w|) / |v|``. Stops when the Rayleigh quotient changes
    by less than ``tolerance`` (relative) or after ``iterations`` steps.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    w64 = np.asarray(w, dtype=np.float64)
    v = make_rng(seed, PROBE).standard_normal(w64.shape)
    v /= np.linalg.norm(v)
    wn = np.linalg.norm(w64)
    lam = None
    for _ in range(iterations):
        eps = 1e-3 * (1.0 + wn) / np.linalg.norm(v)
        hv = (np.asarray(grad_fn((w64 + eps * v).astype(w.dtype)), np.float64)
              - np.asarray(grad_fn((w64 - eps * v).astype(w.dtype)), np.float64)) / (2 * eps)
        new = float(v @ hv)
        if not np.isfinite(new):
            raise ad.NumericDomainError("non-finite Rayleigh quotient in power iteration")
        nrm = np.linalg.norm(hv)
        if nrm == 0:
            return 0.0
        v = hv / nrm
        if lam is not None and abs(new - lam) <= tolerance * max(abs(new), 1e-12):
            return new
        lam = new
    return lam


def full_batch_grad(spec: ModelSpec, ds: Dataset, batch_size: int = 2048, dtype=None):
    """Gradient of the mean cross-entropy over all of ``ds`` (chunked)."""
    n = len(ds)

    def g(params):
        total = np.zeros(params.shape, dtype=np.float64)
        for i in range(0, n, batch_size):
            x, y = ds.images[i:i + batch_size], ds.labels[i:i + batch_size]
            total += len(y) * loss_and_grad(spec, params, x, y, dtype=dtype)[1]
        return total / n

    return g


def hessian_top_eigenvalue(spec: ModelSpec, params: np.ndarray, ds: Dataset, iterations: int = 100,
                           tolerance: float = 1e-4, seed: int = 0, dtype=None) -> float:
    """Top eigenvalue of the training-loss Hessian at ``params`` over ``ds``."""
    check_params(spec, params)
    return top_eigenvalue(full_batch_grad(spec, ds, dtype=dtype), params, iterations, tolerance, seed)


def histogram_rows(values, bins: int = 30, value_range=None) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=value_range)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]


def write_histogram_csv(path, values, bins: int = 30, value_range=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for row in histogram_rows(values, bins, value_range):
            w.writerow([repr(row[0]), repr(row[1]), row[2]])
