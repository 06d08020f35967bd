import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implab.data import normalize, synthetic_dataset
from implab.models import (LayoutError, ModelSpec, build_cnn, build_from_config, build_mlp, cnn_spec, init_params,
                           logits, mlp_spec, predict_probs, views)
from implab.trainer import TrainConfig, train


def test_mlp_param_count():
    spec, w = build_mlp([784, 100, 10], seed=0)
    assert spec.total_count == 784 * 100 + 100 + 100 * 10 + 10 == 79_510
    assert w.dtype == np.float32 and w.shape == (79_510,)


def test_seed_determinism_and_divergence():
    _, a = build_mlp([784, 100, 10], seed=0)
    _, b = build_mlp([784, 100, 10], seed=0)
    _, c = build_mlp([784, 100, 10], seed=1)
    assert a.tobytes() == b.tobytes()
    spec = mlp_spec([784, 100, 10])
    weights = spec.prunable
    # Biases start at zero for every seed, so compare weight coordinates.
    assert np.mean(a[weights] != c[weights]) >= 0.99


def test_bad_widths():
    with pytest.raises(ValueError):
        build_mlp([], seed=0)
    with pytest.raises(ValueError):
        build_mlp([5], seed=0)
    with pytest.raises(ValueError):
        build_mlp([5, 0, 2], seed=0)


def test_kaiming_bounds_and_zero_biases():
    spec, w = build_mlp([50, 20, 3], seed=4)
    for s in spec.slots:
        v = w[s.offset:s.stop]
        if s.prunable:
            bound = np.sqrt(6.0 / s.shape[0])
            assert np.abs(v).max() <= bound
        else:
            assert np.all(v == 0)


def test_cnn_count_matches_layout_table():
    spec, w = build_cnn((1, 28, 28), [8], 10, seed=0)
    assert spec.total_count == sum(s.size for s in spec.slots) == len(w)
    # conv 8*1*3*3 + 8, then 8*14*14 -> 10 dense
    assert spec.total_count == 72 + 8 + 8 * 14 * 14 * 10 + 10
    _, w2 = build_cnn((1, 28, 28), [8], 10, seed=0)
    assert w.tobytes() == w2.tobytes()


def test_cnn_zero_everything_gives_uniform():
    spec, _ = build_cnn((1, 28, 28), [8, 16], 10, seed=0)
    p = predict_probs(spec, np.zeros(spec.total_count, np.float32), np.zeros((3, 1, 28, 28), np.float32))
    np.testing.assert_allclose(p, 0.1, atol=1e-7)


def test_zero_params_any_input_uniform():
    spec = mlp_spec([6, 5, 4])
    x = np.random.default_rng(0).normal(size=(7, 6)).astype(np.float32)
    np.testing.assert_allclose(predict_probs(spec, np.zeros(spec.total_count, np.float32), x), 0.25, atol=1e-7)


def test_batch_independence():
    spec, w = build_cnn((1, 12, 12), [4], 3, seed=2)
    x = np.random.default_rng(1).normal(size=(32, 1, 12, 12)).astype(np.float32)
    full = predict_probs(spec, w, x)
    for i in (0, 13, 31):
        np.testing.assert_allclose(predict_probs(spec, w, x[i:i + 1])[0], full[i], atol=1e-6)


def test_trained_toy_matches_hand_rolled_forward():
    ds = normalize(synthetic_dataset({"kind": "gaussian_blobs", "classes": 2, "per_class": 100, "dims": 2,
                                      "separation": 3.0, "seed": 0}))
    spec, w0 = build_mlp([2, 5, 2], seed=0)
    cfg = TrainConfig(batch_size=32, peak_lr=0.1, total_steps=100)
    w = train(spec, w0, ds, cfg).params
    v = views(spec, w)
    x = ds.images.reshape(len(ds), -1).astype(np.float64)
    h = np.maximum(x @ v["0.weight"].astype(np.float64) + v["0.bias"], 0)
    z = h @ v["2.weight"].astype(np.float64) + v["2.bias"]
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    np.testing.assert_allclose(predict_probs(spec, w, ds.images), p, atol=1e-5)


def test_views_write_through_and_roundtrip():
    spec, w = build_mlp([4, 3, 2], seed=0)
    v = views(spec, w)
    v["0.bias"][:] = [1, 2, 3]
    assert list(w[spec.slots[1].offset:spec.slots[1].stop]) == [1, 2, 3]
    flat = np.concatenate([v[s.name].reshape(-1) for s in spec.slots])
    assert flat.tobytes() == w.tobytes()


def test_layout_errors():
    spec, w = build_mlp([4, 3, 2], seed=0)
    with pytest.raises(LayoutError):
        logits(spec, w[:-1], np.zeros((1, 4), np.float32))
    with pytest.raises(LayoutError):
        logits(spec, w, np.zeros((1, 5), np.float32))


def test_spec_dict_roundtrip():
    spec = cnn_spec((3, 8, 8), [4, 6], 5, pool="avg")
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec


def test_build_from_config():
    spec, _ = build_from_config({"kind": "mlp", "hidden": [7]}, (1, 2, 3), 4, seed=0)
    assert spec.total_count == 6 * 7 + 7 + 7 * 4 + 4
    with pytest.raises(ValueError):
        build_from_config({"kind": "resnet"}, (3,), 2, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=2, max_size=5))
def test_layout_invariants(widths):
    spec = mlp_spec(widths)
    off = 0
    for s in spec.slots:
        assert s.offset == off
        off = s.stop
        assert s.prunable == s.name.endswith("weight")
    assert off == spec.total_count
    assert spec.prunable.sum() + (~spec.prunable).sum() == spec.total_count
