"""Command-line entry point: ``implab <subcommand> --config cfg.json --out dir``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SubsetSelector, select_subset
from .experiment import (ExperimentConfig, SparsityCurve, compare_initializations, export_figures, load_splits,
                         run_dir_for, run_experiment, warmup_sweep)
from .landscape import ChildPair, lmc_onset, loss_barrier
from .models import build_from_config
from .rng import derive_seed
from .scores import ScoreTable, el2n_scores, lmc_scores
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("implab")


def _read_config(args) -> dict:
    if not args.config:
        raise SystemExit(f"{args.cmd}: --config is required")
    return json.loads(Path(args.config).read_text())


def _setup(cfg: dict, seed: int):
    train_ds, test_ds = load_splits(cfg["dataset"])
    spec, w0 = build_from_config(cfg.get("model", {"kind": "mlp", "hidden": [100]}), train_ds.images.shape[1:],
                                 train_ds.num_classes, seed)
    return spec, w0, train_ds, test_ds


def _train_cfg(cfg: dict, seed: int) -> TrainConfig:
    t = TrainConfig.from_dict(cfg.get("train", {}))
    return t.with_(init_seed=seed, order_seed=derive_seed(seed, 1), augment_seed=derive_seed(seed, 2))


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_train(args) -> int:
    from .trainer import evaluate
    cfg = _read_config(args)
    spec, w0, tr, te = _setup(cfg, args.seed)
    tc = _train_cfg(cfg, args.seed)
    ckpt_steps = cfg.get("checkpoints", [])
    res = train(spec, w0, tr, tc, steps=cfg.get("steps"), checkpoint_at=ckpt_steps)
    out = _out(args)
    res.log.to_csv(out / "log.csv")
    save_checkpoint(out / "final.ckpt", res.final)
    for s, ck in res.checkpoints.items():
        save_checkpoint(out / f"step{s}.ckpt", ck)
    loss, acc = evaluate(spec, res.params, te)
    (out / "metrics.json").write_text(json.dumps({"test_loss": loss, "test_acc": acc, "steps": res.final.step}))
    print(f"test_acc {acc:.4f}")
    return 0


def cmd_imp(args) -> int:
    d = _read_config(args)
    if args.out:
        d["out_dir"] = args.out
    if args.seed is not None and "seeds" not in d:
        d["seeds"] = [args.seed + i for i in range(int(d.get("replicates", 1)))]
    cfg = ExperimentConfig.from_dict(d)
    curve = run_experiment(cfg, jobs=args.jobs)
    for dens, m, s, n in curve.rows():
        print(f"{100 * dens:7.2f}% {m:.4f} +- {s:.4f} (n={n})")
    print(run_dir_for(cfg))
    return 0


def cmd_el2n(args) -> int:
    cfg = _read_config(args)
    spec, _, tr, _ = _setup(cfg, args.seed)
    k = int(cfg.get("K", 4))
    seeds = cfg.get("seeds", [args.seed + i for i in range(k)])
    table = el2n_scores(spec, tr, int(cfg.get("t", 20)), k, TrainConfig.from_dict(cfg.get("train", {})), seeds,
                        jobs=args.jobs)
    path = _out(args) / "el2n.csv"
    table.save(path)
    print(path)
    return 0


def cmd_lmc_score(args) -> int:
    cfg = _read_config(args)
    spec, _, tr, _ = _setup(cfg, args.seed)
    t = int(cfg.get("t", 0))
    parents = []
    for r in range(int(cfg.get("replicates", 1))):
        s = args.seed + r
        _, w0, _, _ = _setup(cfg, s)
        tc = _train_cfg(cfg, s)
        parents.append(train(spec, w0, tr, tc, steps=t).final)
    table = lmc_scores(spec, parents, tr, TrainConfig.from_dict(cfg.get("train", {})),
                       children=int(cfg.get("children", 3)), seed_base=args.seed)
    path = _out(args) / "lmc.csv"
    table.save(path)
    print(path)
    return 0


def cmd_barrier(args) -> int:
    cfg = _read_config(args)
    spec, _, tr, te = _setup(cfg, 0)
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    ds = te if args.split == "test" else tr
    grid = cfg.get("grid")
    rep = loss_barrier(spec, ChildPair(a.step, a.params, b.params, ((0, 0), (0, 0))), ds, args.metric,
                       args.mode, grid)
    out = _out(args)
    rep.to_csv(out / f"barriers_{args.metric}.csv")
    rep.to_json(out / f"barrier_{args.metric}.json")
    print(f"{args.metric} {rep.mode} barrier {rep.aggregate:.6f}")
    return 0


def cmd_onset(args) -> int:
    cfg = _read_config(args)
    spec, w0, tr, _ = _setup(cfg, args.seed)
    tc = _train_cfg(cfg, args.seed)
    steps = sorted(int(s) for s in cfg["steps"])
    res = train(spec, w0, tr, tc, steps=max(steps), checkpoint_at=steps)
    parents = [res.checkpoints[s] for s in steps]
    onset, barriers = lmc_onset(spec, parents, tr, tc, count=int(cfg.get("count", 2)), seed_base=args.seed,
                                threshold=float(cfg.get("threshold", 0.02)))
    out = _out(args)
    (out / "onset.json").write_text(json.dumps({"onset": onset, "steps": steps, "barriers": barriers}, indent=2))
    print(f"onset {onset}")
    return 0


def cmd_warmup_sweep(args) -> int:
    cfg = _read_config(args)
    spec, _, tr, te = _setup(cfg, 0)
    subsets = {}
    for name, sub in cfg.get("subsets", {"all": {"strategy": "all"}}).items():
        if sub.get("strategy", "all") == "all":
            subsets[name] = None
            continue
        scores = ScoreTable.load(sub["scores"]).as_dict() if sub.get("scores") else None
        subsets[name] = select_subset(tr, SubsetSelector(sub["strategy"], int(sub["size"]), scores=scores,
                                                         seed=int(sub.get("seed", 0))))
    seeds = cfg.get("seeds", [args.seed])
    out = _out(args)
    rows = warmup_sweep(spec, tr, te, TrainConfig.from_dict(cfg.get("train", {})), cfg["warmup_grid"], subsets,
                        seeds=seeds, probe_step=cfg.get("probe_step", "warmup_end"), out_csv=out / "warmup.csv")
    print(f"{len(rows)} runs -> {out / 'warmup.csv'}")
    return 0


def cmd_compare(args) -> int:
    a = SparsityCurve.from_json(Path(args.a).read_text())
    b = SparsityCurve.from_json(Path(args.b).read_text())
    print(compare_initializations(a, b, args.tol, args.max_density))
    return 0


def cmd_export(args) -> int:
    paths = export_figures(args.run_dir or args.out)
    if not paths:
        print("nothing to export")
    for p in paths:
        print(p)
    return 0


COMMANDS = {
    "train": cmd_train, "imp": cmd_imp, "el2n": cmd_el2n, "lmc-score": cmd_lmc_score, "barrier": cmd_barrier,
    "onset": cmd_onset, "warmup-sweep": cmd_warmup_sweep, "compare": cmd_compare, "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="implab", description="Pruning and early-training experiments")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "barrier":
            sp.add_argument("--a", required=True, help="first checkpoint")
            sp.add_argument("--b", required=True, help="second checkpoint")
            sp.add_argument("--metric", default="cross_entropy", choices=["cross_entropy", "zero_one_error"])
            sp.add_argument("--mode", default="midpoint", choices=["midpoint", "sweep"])
            sp.add_argument("--split", default="train", choices=["train", "test"])
        if name == "compare":
            sp.add_argument("--a", required=True, help="curve.json of the candidate")
            sp.add_argument("--b", required=True, help="curve.json of the reference")
            sp.add_argument("--tol", type=float, default=1.0, help="tolerance in pooled stderr")
            sp.add_argument("--max-density", type=float, default=None)
        if name == "export":
            sp.add_argument("--run-dir", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
