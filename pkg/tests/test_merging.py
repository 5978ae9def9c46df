import hashlib
import json
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pma import store
from pma.merging import (
    MergeError,
    MergeStrategy,
    WeightVector,
    compute_weights,
    ema_update,
    merge,
    weighted_sum,
)

from conftest import meta, random_container


def unrolled_ema(alpha, n):
    """Weights implied by running the EMA recursion on one-hot inputs."""
    w = np.zeros(n)
    w[0] = 1.0
    for i in range(1, n):
        w = (1 - alpha) * w
        w[i] += alpha
    return w


def test_sma_ten():
    assert compute_weights(MergeStrategy.sma(), 10).weights == (0.1,) * 10


def test_wma_three():
    assert compute_weights(MergeStrategy.wma(), 3).weights == (1 / 6, 2 / 6, 3 / 6)


def test_ema_two():
    np.testing.assert_allclose(compute_weights(MergeStrategy.ema(0.2), 2).weights, [0.8, 0.2], rtol=0, atol=1e-15)


def test_ema_ten_matches_unrolled_recursion():
    w = compute_weights(MergeStrategy.ema(0.1), 10).weights
    oracle = unrolled_ema(0.1, 10)
    np.testing.assert_allclose(w, oracle, rtol=0, atol=1e-15)
    assert w[-1] == pytest.approx(0.1, abs=1e-15)
    assert w[-2] == pytest.approx(0.09, abs=1e-15)
    assert w[0] == pytest.approx(0.387420489, abs=1e-12)


def test_ema_alpha_one_keeps_only_newest():
    assert compute_weights(MergeStrategy.ema(1.0), 4).weights == (0.0, 0.0, 0.0, 1.0)


def test_custom_normalized():
    assert compute_weights(MergeStrategy.custom([1, 3]), 2).weights == (0.25, 0.75)
    with pytest.raises(MergeError, match="custom weights for n=3"):
        compute_weights(MergeStrategy.custom([1, 3]), 3)


@pytest.mark.parametrize(
    "kwargs",
    [dict(kind="EMA", alpha=0.0), dict(kind="EMA", alpha=1.5), dict(kind="EMA"), dict(kind="SMA", alpha=0.1),
     dict(kind="CUSTOM", custom_weights=(1.0, 0.0)), dict(kind="CUSTOM"), dict(kind="TIES")],
)
def test_invalid_strategies(kwargs):
    with pytest.raises(MergeError):
        MergeStrategy(**kwargs)


def test_n_must_be_positive():
    with pytest.raises(MergeError):
        compute_weights(MergeStrategy.sma(), 0)


def test_weight_vector_invariant():
    with pytest.raises(MergeError, match="sum"):
        WeightVector((0.5, 0.6))
    with pytest.raises(MergeError):
        WeightVector((1.5, -0.5))


strategies = st.one_of(
    st.just(MergeStrategy.sma()),
    st.just(MergeStrategy.wma()),
    st.floats(1e-6, 1.0).map(MergeStrategy.ema),
)


@settings(max_examples=200, deadline=None)
@given(strategy=strategies, n=st.integers(1, 10_000))
def test_weights_always_normalized(strategy, n):
    w = compute_weights(strategy, n)
    assert len(w) == n
    assert all(x >= 0 for x in w)
    assert abs(sum(w.weights) - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(weights=st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=50))
def test_custom_weights_normalized(weights):
    w = compute_weights(MergeStrategy.custom(weights), len(weights))
    assert abs(sum(w.weights) - 1.0) <= 1e-12


def test_ema_update_examples():
    np.testing.assert_array_equal(ema_update([3.0, -1.0], [1.25, 7.5], 1.0), [1.25, 7.5])
    assert ema_update([1.0], [2.0], 0.2)[0] == pytest.approx(1.2, abs=1e-15)
    with pytest.raises(MergeError):
        ema_update([1.0, 2.0], [1.0], 0.5)


def test_ema_chain_matches_closed_form(rng):
    states = [rng.standard_normal(100) for _ in range(10)]
    for alpha in (0.1, 0.2, 0.7):
        running = states[0]
        for x in states[1:]:
            running = ema_update(running, x, alpha)
        closed = weighted_sum(states, compute_weights(MergeStrategy.ema(alpha), 10).weights)
        np.testing.assert_allclose(running, closed, rtol=0, atol=1e-12)


# -- file merges --------------------------------------------------------------


def write(path, values, dtype="f32", step=0, name="w"):
    values = np.asarray(values)
    return store.write_container({name: (dtype, values.shape, values)}, meta(step, step * 10), path)


def tensor_bytes(path):
    c = store.read_container(path)
    return {name: store.load_array(c, name).tobytes() for name in c.tensors}


def test_two_container_average(tmp_path):
    a = write(tmp_path / "a.pma", [1.0, 2.0])
    b = write(tmp_path / "b.pma", [3.0, 4.0], step=1)
    merge([a, b], WeightVector((0.5, 0.5)), tmp_path / "m.pma")
    c = store.read_container(tmp_path / "m.pma")
    assert store.load_tensor(c, "w").tolist() == [2.0, 3.0]
    assert c.tensors["w"].dtype == "f32"


@pytest.mark.parametrize("mode", ["in_memory", "streaming"])
@pytest.mark.parametrize(
    "strategy", [MergeStrategy.sma(), MergeStrategy.wma(), MergeStrategy.ema(0.1), MergeStrategy.ema(0.2)]
)
@pytest.mark.parametrize("n", [2, 3, 10])
def test_identical_inputs_reproduce_f32(tmp_path, rng, mode, strategy, n):
    random_container(rng, tmp_path / "c.pma", n_tensors=4, max_dim=30)
    merge([tmp_path / "c.pma"] * n, compute_weights(strategy, n), tmp_path / "m.pma", mode, strategy)
    assert tensor_bytes(tmp_path / "m.pma") == tensor_bytes(tmp_path / "c.pma")


def test_identical_inputs_reproduce_f64_pair(tmp_path, rng):
    random_container(rng, tmp_path / "c.pma", dtype="f64", max_dim=30)
    merge([tmp_path / "c.pma"] * 2, compute_weights(MergeStrategy.sma(), 2), tmp_path / "m.pma")
    assert tensor_bytes(tmp_path / "m.pma") == tensor_bytes(tmp_path / "c.pma")


def test_streaming_matches_in_memory(tmp_path, rng):
    paths = []
    for i in range(10):
        p = tmp_path / f"c{i}.pma"
        store.write_container(
            {"a": ("f32", (300, 7), rng.standard_normal((300, 7))), "b": ("f64", (5,), rng.standard_normal(5)),
             "z": ("f32", (0,), [])},
            meta(i, i * 10),
            p,
        )
        paths.append(p)
    w = compute_weights(MergeStrategy.ema(0.2), 10)
    r1 = merge(paths, w, tmp_path / "mem.pma", "in_memory")
    r2 = merge(paths, w, tmp_path / "stream.pma", "streaming", chunk_elems=64)
    assert (tmp_path / "mem.pma").read_bytes() == (tmp_path / "stream.pma").read_bytes()
    assert r1 == r2


def test_merge_is_left_to_right_f64_then_rounded(tmp_path, rng):
    xs = [rng.standard_normal(257).astype(np.float32) for _ in range(4)]
    paths = [write(tmp_path / f"c{i}.pma", x) for i, x in enumerate(xs)]
    w = compute_weights(MergeStrategy.wma(), 4).weights
    expected = np.empty(257, dtype=np.float32)
    for j in range(257):
        acc = 0.0
        for wi, x in zip(w, xs):
            acc = acc + wi * float(x[j])
        expected[j] = np.float32(acc)
    merge(paths, WeightVector(w), tmp_path / "m.pma")
    assert tensor_bytes(tmp_path / "m.pma")["w"] == expected.tobytes()


def test_custom_uniform_matches_sma_bytes(tmp_path, rng):
    paths = [write(tmp_path / f"c{i}.pma", rng.standard_normal(64), dtype="f64") for i in range(7)]
    merge(paths, compute_weights(MergeStrategy.sma(), 7), tmp_path / "sma.pma")
    merge(paths, compute_weights(MergeStrategy.custom([0.3] * 7), 7), tmp_path / "custom.pma")
    assert tensor_bytes(tmp_path / "sma.pma") == tensor_bytes(tmp_path / "custom.pma")


def test_sma_affine_invariance(tmp_path, rng):
    xs = [rng.standard_normal(100) for _ in range(5)]
    c = rng.standard_normal(100)
    plain = [write(tmp_path / f"p{i}.pma", x, "f64") for i, x in enumerate(xs)]
    shifted = [write(tmp_path / f"s{i}.pma", x + c, "f64") for i, x in enumerate(xs)]
    w = compute_weights(MergeStrategy.sma(), 5)
    merge(plain, w, tmp_path / "mp.pma")
    merge(shifted, w, tmp_path / "ms.pma")
    a = store.load_tensor(store.read_container(tmp_path / "mp.pma"), "w")
    b = store.load_tensor(store.read_container(tmp_path / "ms.pma"), "w")
    scale = np.max(np.abs(np.stack(xs))) + np.max(np.abs(c))
    np.testing.assert_allclose(b, a + c, rtol=0, atol=8 * np.finfo(float).eps * scale)


def test_metadata_and_report(tmp_path, rng):
    paths = [write(tmp_path / f"c{i}.pma", rng.standard_normal(4), step=10 * (i + 1)) for i in range(3)]
    s = MergeStrategy.ema(0.2)
    w = compute_weights(s, 3)
    report = merge(paths, w, tmp_path / "m.pma", strategy=s)
    c = store.read_container(tmp_path / "m.pma")
    assert c.metadata["step"] == "30"
    assert json.loads(c.metadata["merge.sources"]) == [str(p) for p in paths]
    assert json.loads(c.metadata["merge.weights"]) == list(w.weights)
    assert c.metadata["merge.strategy"] == "EMA(alpha=0.2)"
    on_disk = json.loads((tmp_path / "m.pma.report.json").read_text())
    assert on_disk == report
    assert report["sha256"] == hashlib.sha256((tmp_path / "m.pma").read_bytes()).hexdigest()
    assert report["per_tensor"] == [{"name": "w", "elements": 4}]
    assert report["strategy"] == {"kind": "EMA", "alpha": 0.2}


def test_mismatches_name_first_offender(tmp_path):
    a = store.write_container({"a": ("f32", [2], [1, 2]), "b": ("f32", [2], [1, 2])}, meta(), tmp_path / "a.pma")
    b = store.write_container({"a": ("f32", [3], [1, 2, 3]), "b": ("f32", [1], [1])}, meta(), tmp_path / "b.pma")
    c = store.write_container({"a": ("f64", [2], [1, 2]), "b": ("f32", [2], [1, 2])}, meta(), tmp_path / "c.pma")
    d = store.write_container({"a": ("f32", [2], [1, 2])}, meta(), tmp_path / "d.pma")
    w = compute_weights(MergeStrategy.sma(), 2)
    with pytest.raises(MergeError, match="tensor 'a': shape"):
        merge([a, b], w, tmp_path / "m.pma")
    with pytest.raises(MergeError, match="tensor 'a': dtype"):
        merge([a, c], w, tmp_path / "m.pma")
    with pytest.raises(MergeError, match="tensor 'b' missing"):
        merge([a, d], w, tmp_path / "m.pma")
    with pytest.raises(MergeError, match="tensor 'b' in"):
        merge([d, a], w, tmp_path / "m.pma")
    with pytest.raises(MergeError, match="3 weights for 2"):
        merge([a, a], compute_weights(MergeStrategy.sma(), 3), tmp_path / "m.pma")


def test_streaming_peak_memory_bounded(tmp_path, rng):
    n = 1 << 21  # 8 MiB of f32
    paths = [write(tmp_path / f"c{i}.pma", rng.standard_normal(n).astype(np.float32)) for i in range(4)]
    w = compute_weights(MergeStrategy.sma(), 4)
    tracemalloc.start()
    merge(paths, w, tmp_path / "m.pma", "streaming", chunk_elems=1 << 16)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak <= 2 * 4 * n + (1 << 20)
