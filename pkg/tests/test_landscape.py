import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab.autodiff import NumericDomainError
from implab.data import Dataset, normalize, synthetic_dataset
from implab.landscape import (ChildPair, barrier_from_losses, hessian_top_eigenvalue, interpolate, loss_barrier,
                              onset_from_barriers, lmc_onset, per_example_error, spawn_children, top_eigenvalue,
                              write_histogram_csv)
from implab.models import build_mlp, predict_probs
from implab.pruning import PruneMask, apply_mask, magnitude_prune
from implab.trainer import TrainConfig, evaluate, train


@pytest.fixture(scope="module")
def blobs5():
    return normalize(synthetic_dataset({"kind": "gaussian_blobs", "classes": 3, "per_class": 40, "dims": 5,
                                        "separation": 2.0, "seed": 2}))


def random_pair(seed, widths=(5, 6, 3)):
    spec, a = build_mlp(list(widths), seed=seed)
    _, b = build_mlp(list(widths), seed=seed + 1000)
    return spec, ChildPair(0, a, b, ((0, 0), (1, 1)))


# ------------------------------------------------------------ interpolation


def test_interpolate_examples():
    w = np.array([1.0, -2.0, 4.0], np.float32)
    v = np.array([3.0, 2.0, 0.0], np.float32)
    assert interpolate(w, v, 1.0).tobytes() == w.tobytes()
    assert np.all(interpolate(w, -w, 0.5) == 0)
    np.testing.assert_allclose(interpolate(w, v, 0.25), [2.5, 1.0, 1.0])
    with pytest.raises(ValueError):
        interpolate(w, v[:2], 0.5)
    with pytest.raises(ValueError):
        interpolate(w, v, 1.5)


# ----------------------------------------------------------------- barriers


def test_quadratic_oracle():
    loss = lambda p: np.array([float(p[0]) ** 2])
    w, v = np.array([1.0]), np.array([-1.0])
    assert barrier_from_losses(loss, w, v, "midpoint")[0] == pytest.approx(-1.0)
    agg, _, _, a_star, *_ = barrier_from_losses(loss, w, v, "sweep", grid=[0.0, 0.5, 1.0])
    assert agg == 0.0 and a_star in (0.0, 1.0)
    with pytest.raises(ValueError):
        barrier_from_losses(loss, w, v, "bogus")


def test_identical_endpoints(blobs5):
    spec, pair = random_pair(0)
    same = ChildPair(0, pair.a, pair.a.copy(), pair.seeds)
    for metric in ("cross_entropy", "zero_one_error"):
        for mode in ("midpoint", "sweep"):
            r = loss_barrier(spec, same, blobs5, metric, mode)
            assert r.aggregate == 0.0 and np.all(r.per_example == 0)


def test_zero_one_all_correct_is_zero(blobs5):
    spec, w0 = build_mlp([5, 16, 3], seed=0)
    cfg = TrainConfig(batch_size=32, peak_lr=0.05, total_steps=150)
    a = train(spec, w0, blobs5, cfg).params
    b = train(spec, w0, blobs5, cfg.with_(order_seed=9)).params
    r = loss_barrier(spec, ChildPair(0, a, b, ((0, 0), (9, 0))), blobs5, "zero_one_error")
    ok = [np.array(list(per_example_error(spec, p, blobs5).values())) == 0 for p in (a, b, interpolate(a, b, 0.5))]
    both = ok[0] & ok[1] & ok[2]
    assert both.sum() > 0.8 * len(blobs5)
    assert np.all(r.per_example[both] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_barrier_invariants(seed):
    ds = normalize(synthetic_dataset({"kind": "gaussian_blobs", "classes": 3, "per_class": 10, "dims": 5,
                                      "separation": 2.0, "seed": seed % 7}))
    spec, pair = random_pair(seed)
    for metric in ("cross_entropy", "zero_one_error"):
        mid = loss_barrier(spec, pair, ds, metric)
        sweep = loss_barrier(spec, pair, ds, metric, "sweep")
        assert abs(mid.aggregate - mid.per_example.mean()) <= 1e-6
        assert abs(sweep.aggregate - sweep.per_example.mean()) <= 1e-6
        assert sweep.aggregate >= mid.aggregate - 1e-12
        rev = loss_barrier(spec, ChildPair(0, pair.b, pair.a, pair.seeds), ds, metric)
        assert rev.aggregate == pytest.approx(mid.aggregate, abs=1e-6)


def test_barrier_report_files(tmp_path, blobs5):
    spec, pair = random_pair(3)
    r = loss_barrier(spec, pair, blobs5, "cross_entropy", "sweep")
    r.to_csv(tmp_path / "b.csv")
    r.to_json(tmp_path / "b.json")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == len(blobs5)
    assert np.mean([float(x["barrier"]) for x in rows]) == pytest.approx(r.aggregate, abs=1e-9)
    assert r.mode == "sweep" and len(r.curve) == 11
    with pytest.raises(ValueError):
        loss_barrier(spec, pair, blobs5.take([]))


# ----------------------------------------------------------------- children


def test_spawn_children_counts_and_seeds(blobs5):
    spec, w0 = build_mlp([5, 8, 3], seed=0)
    cfg = TrainConfig(batch_size=16, peak_lr=0.05, total_steps=30)
    p = train(spec, w0, blobs5, cfg, steps=3).final
    pairs = spawn_children(spec, p, 3, blobs5, cfg, seed_base=4)
    assert len(pairs) == 3 and all(pr.parent_step == 3 for pr in pairs)
    assert len({pr.seeds for pr in pairs}) == 3
    twins = spawn_children(spec, p, 2, blobs5, cfg, seed_base=4, vary_seeds=False)
    assert twins[0].a.tobytes() == twins[0].b.tobytes()
    assert loss_barrier(spec, twins[0], blobs5).aggregate == 0.0


def test_late_parent_more_stable():
    ds = normalize(synthetic_dataset({"kind": "mnist_like", "per_class": 40, "seed": 1}))
    spec, w0 = build_mlp([784, 32, 10], seed=0)
    cfg = TrainConfig(batch_size=32, peak_lr=0.1, total_steps=120)
    run = train(spec, w0, ds, cfg, checkpoint_at=[0, 90])
    early = [loss_barrier(spec, pr, ds).aggregate for pr in spawn_children(spec, run.checkpoints[0], 3, ds, cfg, 1)]
    late = [loss_barrier(spec, pr, ds).aggregate for pr in spawn_children(spec, run.checkpoints[90], 3, ds, cfg, 1)]
    assert np.mean(late) < np.mean(early)


# -------------------------------------------------------------------- onset


def test_onset_examples():
    assert onset_from_barriers([0, 1, 2], [0.05, 0.03, 0.02]) is None
    assert onset_from_barriers([0, 100, 200, 300, 400], [0.05, 0.01, 0.03, 0.01, 0.005]) == 300
    assert onset_from_barriers([7], [0.0]) == 7
    assert onset_from_barriers([200, 0, 100], [0.0, 0.5, 0.01]) == 100


def test_lmc_onset_runs(blobs5):
    spec, w0 = build_mlp([5, 8, 3], seed=0)
    cfg = TrainConfig(batch_size=16, peak_lr=0.05, total_steps=40)
    run = train(spec, w0, blobs5, cfg, checkpoint_at=[0, 20, 40])
    onset, bars = lmc_onset(spec, [run.checkpoints[s] for s in (0, 20, 40)], blobs5, cfg)
    assert len(bars) == 3 and bars[-1] == 0.0
    assert onset is not None and onset <= 40


# ------------------------------------------------------ per-example error


def test_per_example_error(blobs5):
    spec, w0 = build_mlp([5, 16, 3], seed=0)
    w = train(spec, w0, blobs5, TrainConfig(batch_size=32, peak_lr=0.05, total_steps=100)).params
    err = per_example_error(spec, w, blobs5)
    assert set(err) == set(blobs5.ids.tolist())
    _, acc = evaluate(spec, w, blobs5)
    assert np.mean(list(err.values())) == pytest.approx(1 - acc)
    m = magnitude_prune(w, PruneMask.full(spec), 0.7, spec)
    ws = apply_mask(w, m)
    _, acc_s = evaluate(spec, ws, blobs5)
    drop = np.mean(list(per_example_error(spec, ws, blobs5).values())) - np.mean(list(err.values()))
    assert drop == pytest.approx(acc - acc_s)
    # a "perfect" classifier: labels replaced by its own predictions
    pred = predict_probs(spec, w, blobs5.images).argmax(1)
    relabeled = Dataset(blobs5.images, pred, blobs5.ids, 3)
    assert not any(per_example_error(spec, w, relabeled).values())


# ------------------------------------------------------------------ Hessian


def test_power_iteration_diag():
    H = np.diag([4.0, 1.0])
    lam = top_eigenvalue(lambda w: H @ w, np.array([0.3, -0.2]), iterations=200, tolerance=1e-10)
    assert lam == pytest.approx(4.0, abs=1e-3)
    with pytest.raises(ValueError):
        top_eigenvalue(lambda w: w, np.zeros(2), iterations=0)
    with pytest.raises(NumericDomainError):
        top_eigenvalue(lambda w: np.full(2, np.nan), np.zeros(2))


def explicit_softmax_hessian(W, b, x, y):
    # linear model z = x W + b, W row-major (in, out); parameters [vec(W), b]
    k = W.shape[1]
    z = x @ W + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    H = 0
    for xi, pi in zip(x, p):
        J = np.hstack([np.kron(xi[None, :], np.eye(k)), np.eye(k)])
        A = np.diag(pi) - np.outer(pi, pi)
        H = H + J.T @ A @ J
    return H / len(x)


def test_hessian_matches_explicit_oracle():
    ds = normalize(synthetic_dataset({"kind": "gaussian_blobs", "classes": 4, "per_class": 15, "dims": 6,
                                      "separation": 1.5, "seed": 0}))
    spec, w = build_mlp([6, 4], seed=0)
    assert spec.total_count <= 50
    W = w[:24].astype(np.float64).reshape(6, 4)
    b = w[24:].astype(np.float64)
    x = ds.images.reshape(len(ds), -1).astype(np.float64)
    oracle = np.linalg.eigvalsh(explicit_softmax_hessian(W, b, x, ds.labels)).max()
    lam = hessian_top_eigenvalue(spec, w.astype(np.float64), ds, iterations=500, tolerance=1e-10, dtype=np.float64)
    assert abs(lam - oracle) <= 1e-3


def test_hessian_scaling_and_seed_invariance(blobs5):
    spec, w = build_mlp([5, 6, 3], seed=0)
    w64 = w.astype(np.float64)
    from implab.landscape import full_batch_grad
    g = full_batch_grad(spec, blobs5, dtype=np.float64)
    base = top_eigenvalue(g, w64, iterations=300, tolerance=1e-9)
    scaled = top_eigenvalue(lambda p: 3.0 * g(p), w64, iterations=300, tolerance=1e-9)
    assert scaled == pytest.approx(3.0 * base, rel=1e-3)
    lams = [hessian_top_eigenvalue(spec, w64, blobs5, iterations=300, tolerance=1e-9, seed=s, dtype=np.float64)
            for s in range(5)]
    assert (max(lams) - min(lams)) / np.mean(lams) <= 0.01


# ----------------------------------------------------------------- histogram


def test_histogram_conservation(tmp_path):
    v = np.random.default_rng(0).normal(size=257)
    write_histogram_csv(tmp_path / "h.csv", v, bins=13)
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(rows[0]) == ["bin_left", "bin_right", "count"]
    assert sum(int(r["count"]) for r in rows) == 257
