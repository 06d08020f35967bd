import json
import logging
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab.experiment import (ExperimentConfig, SparsityCurve, barrier_profile, compare_initializations,
                               export_figures, load_splits, matching_initialization_check, run_dir_for,
                               run_experiment, summarize_warmup, warmup_sweep)
from implab.models import build_mlp, init_params
from implab.trainer import TrainConfig, evaluate, train

DENS = [1.0, 0.8, 0.64]
BLOBS = {"kind": "gaussian_blobs", "classes": 3, "per_class": 40, "test_per_class": 20, "dims": 4,
         "separation": 3.0, "seed": 0}


def curve(mean, se=0.001, n=4):
    return SparsityCurve(DENS, mean, [se] * 3, n)


def tiny(tmp_path, **kw):
    d = dict(dataset=dict(BLOBS), model={"kind": "mlp", "hidden": [8]}, t_r=3, t_star=6, rounds=2,
             replicates=2, seeds=[0, 1], pretrain={"batch_size": 16, "peak_lr": 0.05},
             main={"batch_size": 16, "peak_lr": 0.05, "total_steps": 20}, out_dir=str(tmp_path / "runs"))
    d.update(kw)
    return ExperimentConfig(**d)


# --------------------------------------------------------------- dominance


def test_dominance_examples():
    a = curve([0.9, 0.8, 0.7])
    assert compare_initializations(a, a) == "weakly_dominates"
    assert compare_initializations(curve([0.95, 0.85, 0.75]), a) == "dominates"
    assert compare_initializations(a, curve([0.95, 0.85, 0.75])) == "dominated"
    crossing = curve([0.95, 0.8, 0.6])
    assert compare_initializations(crossing, a) == "incomparable"
    assert matching_initialization_check(a, a)
    assert not matching_initialization_check(curve([0.9, 0.7, 0.7]), a)
    # restricting to the sparse end ignores the dense crossing point
    assert compare_initializations(curve([0.5, 0.85, 0.75]), a, max_density=0.8) == "dominates"
    with pytest.raises(ValueError):
        compare_initializations(a, SparsityCurve([1.0, 0.8], [0.9, 0.8], [0, 0], 1))


def test_pooled_tolerance():
    a = curve([0.90, 0.80, 0.70], se=0.03)
    b = curve([0.92, 0.82, 0.72], se=0.03)
    # gap 0.02 < sqrt(2) * 0.03
    assert compare_initializations(a, b) == "weakly_dominates"
    assert compare_initializations(a, b, tolerance_in_stderr=0.0) == "dominated"


means = st.lists(st.floats(0, 1), min_size=3, max_size=3)


@settings(max_examples=60, deadline=None)
@given(means, means, means)
def test_dominance_reflexive_and_transitive(x, y, z):
    a, b, c = (SparsityCurve(DENS, m, [0.0] * 3, 4) for m in (x, y, z))
    weak = ("dominates", "weakly_dominates")
    assert compare_initializations(a, a, 0.0) in weak
    if compare_initializations(a, b, 0.0) in weak and compare_initializations(b, c, 0.0) in weak:
        assert compare_initializations(a, c, 0.0) in weak


def test_curve_invariants(tmp_path):
    with pytest.raises(ValueError):
        SparsityCurve([0.8, 1.0], [0, 0], [0, 0], 1)
    c = SparsityCurve.from_accuracies(DENS, [[0.9, 0.8, 0.7], [0.7, 0.6, 0.5]])
    assert c.n == 2 and c.stderr[0] == pytest.approx(np.std([0.9, 0.7], ddof=1) / np.sqrt(2))
    one = SparsityCurve.from_accuracies(DENS, [[0.9, 0.8, 0.7]])
    assert one.stderr_flagged and np.all(one.stderr == 0)
    assert json.loads(one.to_json())["stderr_flagged"] is True
    back = SparsityCurve.from_json(c.to_json())
    assert np.array_equal(back.mean, c.mean) and back.n == 2


# ------------------------------------------------------------------ runner


def test_config_hash_ignores_location(tmp_path):
    a = tiny(tmp_path)
    b = tiny(tmp_path, out_dir="elsewhere", name="x")
    assert a.hash() == b.hash()
    assert a.hash() != tiny(tmp_path, t_r=2).hash()
    with pytest.raises(ValueError):
        tiny(tmp_path, replicates=0)
    with pytest.raises(ValueError):
        tiny(tmp_path, replicates=3)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(a.to_dict())))
    assert again.hash() == a.hash()


def test_run_cache_and_reproducibility(tmp_path, caplog, monkeypatch):
    cfg = tiny(tmp_path)
    c1 = run_experiment(cfg)
    rd = run_dir_for(cfg)
    assert len(c1.densities) == 3 and c1.n == 2
    for name in ("config.json", "manifest.json", "curve.csv", "curve.json", "rep0/imp.csv", "rep0/rewind.ckpt",
                 "rep1/final.mask"):
        assert (rd / name).exists(), name
    first = (rd / "curve.json").read_bytes()
    # a cache hit must not train anything
    import implab.experiment as ex
    monkeypatch.setattr(ex, "imp_run", lambda *a, **k: pytest.fail("retrained on cache hit"))
    with caplog.at_level(logging.INFO, logger="implab.experiment"):
        c2 = run_experiment(cfg)
    assert "cache hit" in caplog.text and np.array_equal(c1.mean, c2.mean)
    monkeypatch.undo()
    # a fresh directory reproduces the same bytes
    c3 = run_experiment(tiny(tmp_path, out_dir=str(tmp_path / "other")))
    assert (run_dir_for(tiny(tmp_path, out_dir=str(tmp_path / "other"))) / "curve.json").read_bytes() == first
    assert np.array_equal(c3.mean, c1.mean)


def test_stale_cache_recomputed(tmp_path, caplog):
    scores = tmp_path / "s.csv"
    train_ds, _ = load_splits(BLOBS)
    scores.write_text("id,score\n" + "".join(f"{i},{(i * 7) % 11}\n" for i in train_ds.ids))
    cfg = tiny(tmp_path, replicates=1, seeds=[0],
               subset={"strategy": "lowest_score", "size": 30, "scores": str(scores)})
    run_experiment(cfg)
    scores.write_text("id,score\n" + "".join(f"{i},{(i * 5) % 13}\n" for i in train_ds.ids))
    with caplog.at_level(logging.WARNING):
        run_experiment(cfg)
    assert "stale" in caplog.text
    man = json.loads((run_dir_for(cfg) / "manifest.json").read_text())
    assert list(man["inputs"]) == [str(scores)]


def test_single_replicate_flagged(tmp_path):
    c = run_experiment(tiny(tmp_path, replicates=1, seeds=[3]))
    assert c.stderr_flagged and np.all(c.stderr == 0)


def test_el2n_subset_pipeline_and_barriers(tmp_path):
    cfg = tiny(tmp_path, corruption=0.5, subset={"strategy": "lowest_score", "size": 30,
                                                 "el2n": {"t": 5, "K": 2, "seeds": [0, 1]}})
    run_experiment(cfg)
    assert (run_dir_for(cfg) / "el2n_scores.csv").exists()
    prof = barrier_profile(cfg, children=2)
    assert len(prof["pair_means"]) == 2
    assert prof["mean"] == pytest.approx(np.mean(prof["pair_means"]))
    assert len(prof["per_example"]) == len(prof["ids"]) == 120


# ------------------------------------------------------------------ warmup


def test_warmup_subset_all_matches_base_trainer(tmp_path):
    train_ds, test_ds = load_splits(BLOBS)
    spec, _ = build_mlp([4, 8, 3], seed=0)
    base = TrainConfig(batch_size=16, peak_lr=0.05, total_steps=30)
    rows = warmup_sweep(spec, train_ds, test_ds, base, [0, 10], {"all": None, "same": train_ds}, seeds=(2,),
                        hessian_iters=5, out_csv=tmp_path / "w.csv")
    assert len(rows) == 4
    by = {(r.warmup, r.subset): r for r in rows}
    assert by[(10, "all")].final_acc == by[(10, "same")].final_acc
    assert by[(10, "all")].hessian == by[(10, "same")].hessian
    from implab.rng import derive_seed
    cfg = base.with_(warmup_steps=10, init_seed=2, order_seed=derive_seed(2, 5))
    ref = train(spec, init_params(spec, 2), train_ds, cfg)
    assert evaluate(spec, ref.params, test_ds)[1] == by[(10, "all")].final_acc
    header = (tmp_path / "w.csv").read_text().splitlines()[0]
    assert header == "warmup,subset,seed,final_acc,hessian_top,diverged"
    summary = summarize_warmup(rows)
    assert summary[(0, "all")]["diverged"] == 0


def test_warmup_divergence_flag():
    train_ds, test_ds = load_splits(BLOBS)
    spec, _ = build_mlp([4, 8, 3], seed=0)
    base = TrainConfig(batch_size=16, peak_lr=1e6, total_steps=20)
    rows = warmup_sweep(spec, train_ds, test_ds, base, [0], {"all": None}, hessian_iters=2)
    assert rows[0].diverged and summarize_warmup(rows)[(0, "all")]["acc"] == 0.0


# ------------------------------------------------------------------ export


def test_export_empty(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert export_figures(tmp_path) == []
    assert "nothing to export" in caplog.text
    assert list(tmp_path.iterdir()) == []


def test_export_files(tmp_path):
    for label, m in (("a", [0.9, 0.8, 0.7]), ("b", [0.85, 0.8, 0.6])):
        d = tmp_path / label
        d.mkdir()
        (d / "curve.json").write_text(SparsityCurve(DENS, m, [0.01] * 3, 4, label=label).to_json())
    vals = np.random.default_rng(0).normal(size=321)
    (tmp_path / "barriers_a.csv").write_text("id,barrier\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(vals)))
    (tmp_path / "correlation.csv").write_text("label,mean_barrier,final_acc\na,0.1,0.8\nb,0.3,0.7\n")
    out = export_figures(tmp_path)
    names = {p.name for p in out}
    assert {"curves.csv", "accuracy_vs_density.svg", "barriers_a_hist.csv", "barriers_a_hist.svg",
            "barrier_vs_accuracy.svg"} <= names
    for p in out:
        if p.suffix == ".svg":
            assert ET.parse(p).getroot().tag == "{http://www.w3.org/2000/svg}svg"
    counts = [int(r.split(",")[2]) for r in (tmp_path / "barriers_a_hist.csv").read_text().splitlines()[1:]]
    assert sum(counts) == 321
