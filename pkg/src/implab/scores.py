"""Example-difficulty scores: EL2N and per-example LMC (loss-barrier) scores."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .landscape import loss_barrier, spawn_children
from .models import ModelSpec, init_params, predict_probs
from .parallel import parallel_map
from .rng import derive_seed
from .trainer import Checkpoint, TrainConfig, train

EL2N_MAX = float(np.sqrt(2.0))


@dataclass
class ScoreTable:
    ids: np.ndarray
    scores: np.ndarray
    kind: str  # "EL2N" | "LMC"
    t: int
    replicates: int
    seeds: list = field(default_factory=list)
    dataset: str = ""

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.ids.tolist(), self.scores.tolist()))

    def aligned(self, ds: Dataset) -> np.ndarray:
        """Scores in ``ds`` row order."""
        lookup = self.as_dict()
        return np.array([lookup[int(i)] for i in ds.ids])

    def save(self, path) -> None:
        """CSV ``id,score`` plus a ``.json`` metadata sidecar next to it."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "score"])
            for i, s in zip(self.ids, self.scores):
                w.writerow([int(i), repr(float(s))])
        meta = {"kind": self.kind, "t": self.t, "K": self.replicates, "seeds": list(self.seeds),
                "dataset_hash": self.dataset, "n": int(len(self.ids))}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ScoreTable":
        path = Path(path)
        ids, scores = [], []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                ids.append(int(r["id"]))
                scores.append(float(r["score"]))
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(np.array(ids, dtype=np.int64), np.array(scores), meta.get("kind", "EL2N"), int(meta.get("t", 0)),
                   int(meta.get("K", 1)), meta.get("seeds", []), meta.get("dataset_hash", ""))


def el2n_from_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example ``|p - onehot(y)|_2``."""
    err = np.asarray(probs, dtype=np.float64).copy()
    err[np.arange(len(labels)), labels] -= 1.0
    return np.linalg.norm(err, axis=1)


def _el2n_member(args) -> np.ndarray:
    spec, ds, t, cfg, seed = args
    w0 = init_params(spec, seed)
    mcfg = cfg.with_(init_seed=seed, order_seed=derive_seed(seed, 11), augment_seed=derive_seed(seed, 12))
    w = train(spec, w0, ds, mcfg, steps=t).params if t > 0 else w0
    return el2n_from_probs(predict_probs(spec, w, ds.images), ds.labels)


def el2n_scores(spec: ModelSpec, ds: Dataset, t: int, K: int, cfg: TrainConfig, seeds, jobs: int = 1) -> ScoreTable:
    """Mean over ``K`` independently initialized networks, each trained for
    ``t`` steps on ``ds``, of the L2 norm of the softmax error vector."""
    seeds = list(seeds)
    if K < 1 or len(seeds) != K:
        raise ValueError("need K >= 1 and exactly K seeds")
    members = parallel_map(_el2n_member, [(spec, ds, t, cfg, s) for s in seeds], jobs)
    # Sum in seed-sorted order so the ensemble is order-independent bit for bit.
    order = np.argsort(seeds, kind="stable")
    total = np.zeros(len(ds))
    for i in order:
        total += members[i]
    return ScoreTable(ds.ids.copy(), total / K, "EL2N", t, K, seeds, ds.digest())


def lmc_scores(spec: ModelSpec, parents, ds: Dataset, cfg: TrainConfig, children: int = 3, seed_base: int = 0,
               from_step: int | None = None, train_ds: Dataset | None = None) -> ScoreTable:
    """Per-example midpoint cross-entropy barrier averaged over child pairs.

    ``parents`` is one rewind checkpoint or a list of them (replicates); each
    spawns ``children`` children and contributes every pair.
    """
    if isinstance(parents, Checkpoint):
        parents = [parents]
    if children < 2:
        raise ValueError("need at least two children to form a pair")
    per_pair = []
    for k, p in enumerate(parents):
        pairs = spawn_children(spec, p, children, train_ds if train_ds is not None else ds, cfg,
                               derive_seed(seed_base, k), from_step=from_step)
        per_pair.extend(loss_barrier(spec, pr, ds, "cross_entropy").per_example for pr in pairs)
    scores = np.mean(per_pair, axis=0)
    return ScoreTable(ds.ids.copy(), scores, "LMC", parents[0].step, len(per_pair),
                      [seed_base], ds.digest())
