"""Experiment orchestration: configs, cached runs, sparsity curves, dominance
checks, warmup sweeps and figure export."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, SubsetSelector, corrupt_labels, load_dataset, normalize, select_subset,
                   synthetic_dataset)
from .landscape import loss_barrier, spawn_children
from .models import build_from_config, init_params
from .parallel import parallel_map
from .pruning import imp_run, read_imp_csv, save_mask
from .rng import derive_seed
from .scores import ScoreTable, el2n_scores
from .trainer import Checkpoint, Diverged, TrainConfig, evaluate, save_checkpoint, train

log = logging.getLogger(__name__)

DOMINANCE = ("dominates", "weakly_dominates", "dominated", "incomparable")


# -------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """One cell of the experiment grid.

    ``dataset`` is either a synthetic spec (``{"kind": ..., "per_class": ...}``)
    or ``{"format": "idx"|"cifar_binary", "path": ...}``. ``subset`` is
    ``{"strategy": ..., "size": M}`` plus, for score-based strategies, either
    ``"scores"`` (path to an ``id,score`` CSV) or ``"el2n": {"t", "K", "seeds"}``.
    """

    dataset: dict
    model: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [100]})
    subset: dict = field(default_factory=lambda: {"strategy": "all"})
    t_r: int = 0
    t_star: int = 0
    rounds: int = 8
    fraction: float = 0.2
    replicates: int = 1
    seeds: list = field(default_factory=lambda: [0])
    corruption: float = 0.0
    pretrain: dict = field(default_factory=dict)  # TrainConfig fields
    main: dict = field(default_factory=dict)
    per_layer: bool = False
    out_dir: str = "runs"
    name: str = ""

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if len(self.seeds) < self.replicates:
            raise ValueError("need one seed per replicate")
        if self.t_r < 0:
            raise ValueError("t_r must be >= 0")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def canonical(self) -> str:
        # Output location and label do not change results, so they stay out of the hash.
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("name")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def input_files(self) -> list[Path]:
        paths = []
        if "path" in self.dataset:
            p = Path(self.dataset["path"])
            paths.extend(sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p])
        if self.subset.get("scores"):
            paths.append(Path(self.subset["scores"]))
        return paths

    def pretrain_cfg(self) -> TrainConfig:
        base = {"total_steps": max(int(self.t_r), 1), **self.pretrain}
        return TrainConfig.from_dict(base)

    def main_cfg(self) -> TrainConfig:
        return TrainConfig.from_dict(self.main)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_splits(dataset: dict) -> tuple[Dataset, Dataset]:
    """Normalized (train, test); test uses the training statistics."""
    if "format" in dataset:
        fmt = dataset["format"]
        k = int(dataset.get("classes", 10))
        train_ds = load_dataset(dataset["path"], fmt, "train", k)
        test_ds = load_dataset(dataset["path"], fmt, "test", k)
        if "train_size" in dataset:
            train_ds = select_subset(train_ds, SubsetSelector("random_balanced", int(dataset["train_size"]),
                                                              seed=int(dataset.get("seed", 0))))
    else:
        train_ds = synthetic_dataset(dataset, "train")
        test_spec = {**dataset, "per_class": int(dataset.get("test_per_class", dataset["per_class"]))}
        test_ds = synthetic_dataset(test_spec, "test")
    train_ds = normalize(train_ds)
    return train_ds, normalize(test_ds, (train_ds.mean, train_ds.std))


# --------------------------------------------------------------------- curves


@dataclass
class SparsityCurve:
    densities: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n: int
    provenance: str = ""
    label: str = ""

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)
        if np.any(np.diff(self.densities) >= 0):
            raise ValueError("densities must be strictly decreasing")

    @property
    def stderr_flagged(self) -> bool:
        """True when the stderr column is 0 by convention (one replicate)."""
        return self.n == 1

    @classmethod
    def from_accuracies(cls, densities, accs, provenance: str = "", label: str = "") -> "SparsityCurve":
        a = np.asarray(accs, dtype=np.float64).reshape(-1, len(densities))
        n = a.shape[0]
        se = a.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(a.shape[1])
        return cls(densities, a.mean(axis=0), se, n, provenance, label)

    def at(self, max_density: float) -> np.ndarray:
        return self.densities <= max_density + 1e-12

    def rows(self) -> list[tuple[float, float, float, int]]:
        return [(float(d), float(m), float(s), self.n) for d, m, s in zip(self.densities, self.mean, self.stderr)]

    def to_json(self) -> str:
        return json.dumps({"label": self.label, "provenance": self.provenance, "n_replicates": self.n,
                           "stderr_flagged": self.stderr_flagged,
                           "rows": [{"density": d, "mean_acc": m, "stderr": s} for d, m, s, _ in self.rows()]},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SparsityCurve":
        d = json.loads(text)
        r = d["rows"]
        return cls([x["density"] for x in r], [x["mean_acc"] for x in r], [x["stderr"] for x in r],
                   int(d["n_replicates"]), d.get("provenance", ""), d.get("label", ""))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["density", "mean_acc", "stderr", "n_replicates"])
            for d, m, s, n in self.rows():
                w.writerow([repr(d), repr(m), repr(s), n])


def _same_grid(a: SparsityCurve, b: SparsityCurve) -> bool:
    return a.densities.shape == b.densities.shape and bool(np.all(np.abs(a.densities - b.densities) < 1e-9))


def compare_initializations(a: SparsityCurve, b: SparsityCurve, tolerance_in_stderr: float = 1.0,
                            max_density: float | None = None) -> str:
    """Dominance relation of curve ``a`` over curve ``b``.

    ``a`` weakly dominates ``b`` when at every density ``mean_a >= mean_b -
    tol * pooled_stderr``; it dominates when it is also ahead by more than
    ``tol * pooled_stderr`` somewhere. ``max_density`` restricts the comparison
    to the sparse end of the grid.
    """
    if not _same_grid(a, b):
        raise ValueError("curves do not share a density grid")
    sel = np.ones(len(a.densities), bool) if max_density is None else a.at(max_density)
    ma, mb = a.mean[sel], b.mean[sel]
    slack = tolerance_in_stderr * np.sqrt(a.stderr[sel] ** 2 + b.stderr[sel] ** 2)
    a_weak = bool(np.all(ma >= mb - slack))
    if a_weak and np.any(ma > mb + slack):
        return "dominates"
    if a_weak:
        return "weakly_dominates"
    if np.all(mb >= ma - slack):
        return "dominated"
    return "incomparable"


def matching_initialization_check(candidate: SparsityCurve, reference_t_star: SparsityCurve, tol: float = 1.0,
                                  max_density: float | None = None) -> bool:
    return compare_initializations(candidate, reference_t_star, tol, max_density) in ("dominates", "weakly_dominates")


# ------------------------------------------------------------------ runner


def _pretrain_set(cfg: ExperimentConfig, train_ds: Dataset, run_dir: Path, jobs: int) -> tuple[Dataset, Dataset]:
    """(corrupted-or-clean pool, selected subset) for phase 1."""
    pool = corrupt_labels(train_ds, cfg.corruption, derive_seed(cfg.seeds[0], 77)) if cfg.corruption else train_ds
    sub = dict(cfg.subset)
    strategy = sub.get("strategy", "all")
    if strategy == "all":
        return pool, pool
    size = int(sub.get("size", len(pool)))
    scores = None
    if strategy in ("lowest_score", "highest_score"):
        if sub.get("scores"):
            scores = ScoreTable.load(sub["scores"]).as_dict()
        elif "el2n" in sub:
            e = sub["el2n"]
            cache = run_dir / "el2n_scores.csv"
            if cache.exists():
                table = ScoreTable.load(cache)
            else:
                spec, _ = build_from_config(cfg.model, pool.images.shape[1:], pool.num_classes, 0)
                table = el2n_scores(spec, pool, int(e.get("t", 20)), int(e.get("K", 4)),
                                    TrainConfig.from_dict(e.get("train", cfg.main)),
                                    list(e.get("seeds", range(int(e.get("K", 4))))), jobs=jobs)
                table.save(cache)
            scores = table.as_dict()
        else:
            raise ValueError(f"{strategy} needs 'scores' or 'el2n' in the subset spec")
    sel = SubsetSelector(strategy, size, scores=scores, ids=sub.get("ids"), seed=int(sub.get("seed", cfg.seeds[0])))
    return pool, select_subset(pool, sel)


def _replicate(args) -> list[float]:
    cfg, i, pre_ds, train_ds, test_ds, rdir = args
    seed = int(cfg.seeds[i])
    csv_path = rdir / "imp.csv"
    if csv_path.exists():
        return [r["test_acc"] for r in read_imp_csv(csv_path)]
    rdir.mkdir(parents=True, exist_ok=True)
    spec, w0 = build_from_config(cfg.model, train_ds.images.shape[1:], train_ds.num_classes, seed)
    order = derive_seed(seed, 1)
    pre = cfg.pretrain_cfg().with_(init_seed=seed, order_seed=order, augment_seed=derive_seed(seed, 2))
    main = cfg.main_cfg().with_(init_seed=seed, order_seed=derive_seed(seed, 3), augment_seed=derive_seed(seed, 4))
    res = imp_run(spec, w0, pre_ds, train_ds, cfg.t_r, cfg.rounds, cfg.fraction, pre, main,
                  test_ds=test_ds, per_layer=cfg.per_layer)
    save_checkpoint(rdir / "rewind.ckpt", res.rewind)
    save_mask(rdir / "final.mask", res.masks[-1], res.rewind.digest())
    tmp = rdir / "imp.csv.tmp"
    res.to_csv(tmp)
    (rdir / "pretrain.json").write_text(json.dumps({"pretrain_acc": res.pretrain_acc}))
    tmp.replace(csv_path)  # written last: its presence marks the replicate complete
    return [r.test_acc for r in res.rounds]


def run_dir_for(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / cfg.hash()[:16]


def _manifest(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "tool_version": __version__,
            "inputs": {str(p): file_sha256(p) for p in cfg.input_files()}}


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> SparsityCurve:
    """Run (or load from cache) every replicate of ``cfg`` and aggregate.

    Artifacts live under ``out_dir/<config-hash>``: the resolved config, a
    manifest of input hashes, one directory per replicate and ``curve.json``.
    Completed replicates are never retrained, so a crashed run resumes.
    """
    rd = run_dir_for(cfg)
    rd.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg)
    curve_path = rd / "curve.json"
    man_path = rd / "manifest.json"
    if curve_path.exists() and man_path.exists():
        if json.loads(man_path.read_text()) == manifest:
            log.info("cache hit %s", rd)
            return SparsityCurve.from_json(curve_path.read_text())
        log.warning("cache at %s is stale; recomputing", rd)
        curve_path.unlink()
        for p in rd.glob("rep*/imp.csv"):
            p.unlink()
    (rd / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    train_ds, test_ds = load_splits(cfg.dataset)
    _, pre_ds = _pretrain_set(cfg, train_ds, rd, jobs)
    items = [(cfg, i, pre_ds, train_ds, test_ds, rd / f"rep{i}") for i in range(cfg.replicates)]
    accs = parallel_map(_replicate, items, jobs)
    dens = [(1.0 - cfg.fraction) ** r for r in range(cfg.rounds + 1)]
    curve = SparsityCurve.from_accuracies(dens, accs, cfg.hash(), cfg.name)
    curve.to_csv(rd / "curve.csv")
    curve_path.write_text(curve.to_json())
    return curve


def replicate_rewinds(cfg: ExperimentConfig) -> list[Checkpoint]:
    """Rewind checkpoints saved by a completed run."""
    from .trainer import load_checkpoint
    rd = run_dir_for(cfg)
    return [load_checkpoint(rd / f"rep{i}" / "rewind.ckpt") for i in range(cfg.replicates)]


def pretrain_accuracies(cfg: ExperimentConfig) -> list[float]:
    rd = run_dir_for(cfg)
    return [json.loads((rd / f"rep{i}" / "pretrain.json").read_text())["pretrain_acc"] for i in range(cfg.replicates)]


# ------------------------------------------------------------ barrier analysis


def barrier_profile(cfg: ExperimentConfig, children: int = 3, replicates: int | None = None,
                    ds: Dataset | None = None) -> dict:
    """Per-example cross-entropy midpoint barriers of children spawned from
    each replicate's rewind point and trained through the main schedule.

    Returns ``{"pair_means", "mean", "stderr", "per_example"}``; the stderr is
    over child pairs.
    """
    train_ds, _ = load_splits(cfg.dataset)
    ds = train_ds if ds is None else ds
    spec, _ = build_from_config(cfg.model, train_ds.images.shape[1:], train_ds.num_classes, 0)
    means, per = [], []
    for i, ck in enumerate(replicate_rewinds(cfg)[: replicates or cfg.replicates]):
        pairs = spawn_children(spec, ck, children, train_ds, cfg.main_cfg(), derive_seed(int(cfg.seeds[i]), 9),
                               from_step=0)
        for p in pairs:
            rep = loss_barrier(spec, p, ds, "cross_entropy")
            means.append(rep.aggregate)
            per.append(rep.per_example)
    m = np.asarray(means)
    se = float(m.std(ddof=1) / math.sqrt(len(m))) if len(m) > 1 else 0.0
    return {"pair_means": m, "mean": float(m.mean()), "stderr": se, "per_example": np.mean(per, axis=0),
            "ids": ds.ids.copy()}


def spearman(x, y) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(x, y).statistic)


# -------------------------------------------------------------- warmup sweep


@dataclass
class WarmupRow:
    warmup: int
    subset: str
    seed: int
    final_acc: float
    hessian: float
    diverged: bool


def warmup_sweep(spec, train_ds: Dataset, test_ds: Dataset, base_cfg: TrainConfig, warmup_grid, subsets: dict,
                 seeds=(0,), probe_step: int | str | None = "warmup_end", probe_size: int = 1000,
                 hessian_iters: int = 50, out_csv=None) -> list[WarmupRow]:
    """Train with ``subsets[name]`` during warmup only and all of ``train_ds``
    afterwards, for every warmup length and subset.

    The top Hessian eigenvalue is measured on a fixed probe set. With
    ``probe_step="warmup_end"`` (default) each run is probed where its own
    warmup ends (step 0 without warmup); an integer probes every run at that
    step and ``None`` at the longest warmup in the grid.
    """
    from .landscape import hessian_top_eigenvalue

    grid = [int(w) for w in warmup_grid]
    if probe_step is None:
        probe_step = max(grid)
    probe = train_ds.take(np.arange(min(probe_size, len(train_ds))))
    rows = []
    for w in grid:
        for name, sub in subsets.items():
            for s in seeds:
                cfg = base_cfg.with_(warmup_steps=w, init_seed=s, order_seed=derive_seed(s, 5))
                w0 = init_params(spec, s)
                early = sub if sub is not None else train_ds
                at = w if probe_step == "warmup_end" else int(probe_step)
                try:
                    res = train(spec, w0, train_ds, cfg, checkpoint_at=[at], early_ds=early, early_steps=w)
                except Diverged:
                    rows.append(WarmupRow(w, name, s, float("nan"), float("nan"), True))
                    continue
                ck = res.checkpoints[at]
                lam = hessian_top_eigenvalue(spec, ck.params, probe, iterations=hessian_iters, tolerance=1e-3, seed=s)
                acc = evaluate(spec, res.params, test_ds)[1]
                rows.append(WarmupRow(w, name, s, acc, lam, False))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["warmup", "subset", "seed", "final_acc", "hessian_top", "diverged"])
            for r in rows:
                wr.writerow([r.warmup, r.subset, r.seed, repr(r.final_acc), repr(r.hessian), int(r.diverged)])
    return rows


def summarize_warmup(rows: list[WarmupRow]) -> dict:
    """Mean accuracy and eigenvalue per (warmup, subset); diverged runs count as accuracy 0."""
    out: dict = {}
    for r in rows:
        out.setdefault((r.warmup, r.subset), []).append(r)
    return {k: {"acc": float(np.mean([0.0 if r.diverged else r.final_acc for r in v])),
                "hessian": float(np.nanmean([r.hessian for r in v])) if any(not r.diverged for r in v) else float("nan"),
                "diverged": sum(r.diverged for r in v)} for k, v in out.items()}


# ------------------------------------------------------------------- export


def _svg_ok(path) -> bool:
    import xml.etree.ElementTree as ET
    root = ET.parse(path).getroot()
    return root.tag.endswith("svg")


def export_figures(run_dir) -> list[Path]:
    """Plot-ready CSVs and SVG charts for everything found under ``run_dir``.

    Looks for ``*/curve.json`` (accuracy vs density), ``barriers_*.csv``
    (per-example barrier histograms) and ``correlation.csv`` (mean barrier vs
    final accuracy scatter). Returns the written paths; an empty list with a
    logged notice when nothing is found.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .landscape import write_histogram_csv

    run_dir = Path(run_dir)
    out = []
    curves = []
    for p in sorted(run_dir.rglob("curve.json")):
        c = SparsityCurve.from_json(p.read_text())
        curves.append((c.label or p.parent.name, c))
    if curves:
        rows_path = run_dir / "curves.csv"
        with open(rows_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "density", "mean_acc", "stderr", "n_replicates"])
            for label, c in curves:
                for d, m, s, n in c.rows():
                    w.writerow([label, repr(d), repr(m), repr(s), n])
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, c in curves:
            ax.errorbar(100 * c.densities, c.mean, yerr=c.stderr, label=label, marker="o", ms=3, capsize=2)
        ax.set_xscale("log")
        ax.invert_xaxis()
        ax.set_xlabel("weights remaining (%)")
        ax.set_ylabel("test accuracy")
        ax.legend(fontsize=7)
        svg = run_dir / "accuracy_vs_density.svg"
        fig.savefig(svg, format="svg")
        plt.close(fig)
        out += [rows_path, svg]
    for p in sorted(run_dir.glob("barriers_*.csv")):
        with open(p, newline="") as fh:
            vals = [float(r["barrier"]) for r in csv.DictReader(fh)]
        hist_csv = p.with_name(p.stem + "_hist.csv")
        write_histogram_csv(hist_csv, vals, bins=30)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(vals, bins=30)
        ax.set_xlabel("per-example barrier")
        ax.set_ylabel("count")
        ax.set_title(p.stem)
        svg = p.with_name(p.stem + "_hist.svg")
        fig.savefig(svg, format="svg")
        plt.close(fig)
        out += [hist_csv, svg]
    corr = run_dir / "correlation.csv"
    if corr.exists():
        with open(corr, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter([float(r["mean_barrier"]) for r in rows], [float(r["final_acc"]) for r in rows])
        for r in rows:
            ax.annotate(r["label"], (float(r["mean_barrier"]), float(r["final_acc"])), fontsize=6)
        ax.set_xlabel("mean train loss barrier")
        ax.set_ylabel("final sparse test accuracy")
        svg = run_dir / "barrier_vs_accuracy.svg"
        fig.savefig(svg, format="svg")
        plt.close(fig)
        out.append(svg)
    if not out:
        log.warning("nothing to export under %s", run_dir)
    for p in out:
        if p.suffix == ".svg" and not _svg_ok(p):
            raise ValueError(f"{p} is not well-formed SVG")
    return out


# ------------------------------------------------------------- desk grid


DESK_DATA = {"kind": "mnist_like", "per_class": 1000, "test_per_class": 300, "dims": [1, 28, 28],
             "separation": 0.8, "prototypes": 6, "noise": 0.4, "seed": 0}
DESK_T_STAR = 80
DESK_M = 1000


def desk_config(label: str, subset: dict, t_r: int, out_dir: str, replicates: int = 4,
                corruption: float = 0.0, seeds=None, **overrides) -> ExperimentConfig:
    """A cell of the desk-scale grid: MLP 784-100-10 on 10,000 synthetic
    digit-like images, budget-limited main training of 150 steps."""
    main = {"batch_size": 128, "peak_lr": 0.05, "momentum": 0.9, "weight_decay": 1e-4,
            "lr_milestones": [75, 112], "total_steps": 150}
    pre = {"batch_size": 128, "peak_lr": 0.2, "momentum": 0.9, "weight_decay": 1e-4}
    d = dict(dataset=dict(DESK_DATA), model={"kind": "mlp", "hidden": [100]}, subset=subset, t_r=t_r,
             t_star=DESK_T_STAR, rounds=8, fraction=0.2, replicates=replicates,
             seeds=list(seeds if seeds is not None else range(replicates)), corruption=corruption,
             pretrain=pre, main=main, out_dir=out_dir, name=label)
    d.update(overrides)
    return ExperimentConfig(**d)


def desk_grid(out_dir: str, replicates: int = 4) -> dict[str, ExperimentConfig]:
    ts, m = DESK_T_STAR, DESK_M
    el2n = {"t": 20, "K": 4, "seeds": [100, 101, 102, 103], "train": {"batch_size": 128, "peak_lr": 0.05,
                                                                        "total_steps": 150}}
    return {
        "all@t*": desk_config("all@t*", {"strategy": "all"}, ts, out_dir, replicates),
        "all@t*/2": desk_config("all@t*/2", {"strategy": "all"}, ts // 2, out_dir, replicates),
        "easy@t*/2": desk_config("easy@t*/2", {"strategy": "lowest_score", "size": m, "el2n": el2n}, ts // 2,
                                 out_dir, replicates),
        "random@t*/2": desk_config("random@t*/2", {"strategy": "random_balanced", "size": m, "seed": 7}, ts // 2,
                                   out_dir, replicates),
        "hard@t*/2": desk_config("hard@t*/2", {"strategy": "highest_score", "size": m, "el2n": el2n}, ts // 2,
                                 out_dir, replicates),
        "@0": desk_config("@0", {"strategy": "all"}, 0, out_dir, replicates),
    }
