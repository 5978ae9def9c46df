import csv
import json

import numpy as np
import pytest

from pma import analysis
from pma.analysis import AnalysisError, QuadraticOracle, empirical_hessian, quadratic_loss, surface_grid, taylor_report
from pma.merging import MergeStrategy, compute_weights, merge_states
from pma.testbed import DataConfig, ModelConfig, TrainConfig, WsdSchedule, toy, train, trainer


def test_quadratic_loss_examples(rng):
    o = QuadraticOracle(np.zeros(3), 2 * np.eye(3), 0.0)
    assert quadratic_loss(o, [0.0, 1.0, 0.0]) == 1.0
    o = QuadraticOracle.random(rng, 5)
    assert quadratic_loss(o, o.theta_star) == o.loss_at_opt
    theta = rng.standard_normal(5)
    d = (theta - o.theta_star).reshape(5, 1)
    explicit = o.loss_at_opt + 0.5 * (d.T @ o.hessian @ d).item()
    assert quadratic_loss(o, theta) == pytest.approx(explicit, rel=1e-13)
    with pytest.raises(AnalysisError, match="entries"):
        quadratic_loss(o, np.zeros(4))


def test_oracle_validation():
    with pytest.raises(AnalysisError, match="symmetric"):
        QuadraticOracle(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(AnalysisError, match="positive definite"):
        QuadraticOracle(np.zeros(2), [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(AnalysisError, match="shape"):
        QuadraticOracle(np.zeros(3), np.eye(2))


def test_symmetric_pair(rng):
    o = QuadraticOracle.random(rng, 6)
    delta = rng.standard_normal(6)
    r = taylor_report(o, [o.theta_star + delta, o.theta_star - delta])
    assert r.merged_loss_exact == pytest.approx(o.loss_at_opt, abs=1e-14)
    assert r.cross_sum == pytest.approx(-r.diag_sum, rel=1e-12)
    assert r.condition_holds


def test_identical_deviations_fail_strict_inequality(rng):
    o = QuadraticOracle.random(rng, 6)
    theta = o.theta_star + rng.standard_normal(6)
    for k in (2, 3, 7):
        r = taylor_report(o, [theta] * k)
        assert not r.condition_holds
        assert r.merged_loss_predicted == pytest.approx(r.avg_individual_loss, rel=1e-14)


def test_small_k_errors(rng):
    o = QuadraticOracle.random(rng, 3)
    with pytest.raises(AnalysisError, match="at least two"):
        taylor_report(o, [o.theta_star])
    with pytest.raises(AnalysisError):
        taylor_report(o, [np.zeros(3), np.zeros(4)])


def test_condition_matches_brute_force_sweep():
    rng = np.random.default_rng(2024)
    agree = 0
    for i in range(1000):
        d, k = 10, int(rng.integers(2, 9))
        o = QuadraticOracle.random(rng, d, cond=float(10 ** rng.uniform(0, 4)))
        if i % 10 == 0:
            thetas = [o.theta_star + rng.standard_normal(d)] * k  # equality case
        elif i % 10 == 1:
            base = rng.standard_normal(d)
            thetas = [o.theta_star + base + 1e-3 * rng.standard_normal(d) for _ in range(k)]
        else:
            thetas = [o.theta_star + rng.standard_normal(d) * rng.uniform(0.1, 3) for _ in range(k)]
        r = taylor_report(o, thetas)
        avg = float(np.mean([quadratic_loss(o, t) for t in thetas]))
        merged = quadratic_loss(o, np.mean(thetas, axis=0))
        gap = avg - merged
        better = gap > 1e-12 * max(abs(avg), abs(merged))
        agree += r.condition_holds == better
    assert agree == 1000


@pytest.mark.parametrize("d, k", [(1, 2), (4, 3), (10, 8), (50, 5)])
def test_prediction_exact_for_quadratics(d, k):
    rng = np.random.default_rng(d * 100 + k)
    o = QuadraticOracle.random(rng, d)
    thetas = [o.theta_star + rng.standard_normal(d) for _ in range(k)]
    r = taylor_report(o, thetas)
    assert r.merged_loss_predicted == pytest.approx(r.merged_loss_exact, rel=1e-9)
    identity = ((k - 1) * r.diag_sum - r.cross_sum) / (2 * k * k)
    assert r.avg_individual_loss - r.merged_loss_predicted == pytest.approx(identity, rel=1e-9, abs=1e-12)
    assert (identity > 0) == r.condition_holds
    assert np.array_equal(r.q_matrix, r.q_matrix.T)
    assert np.min(np.linalg.eigvalsh(r.q_matrix)) >= -1e-10
    assert r.diag_sum >= 0


def test_weighted_report_matches_weighted_merge(rng):
    o = QuadraticOracle.random(rng, 8)
    thetas = [o.theta_star + rng.standard_normal(8) for _ in range(4)]
    w = compute_weights(MergeStrategy.ema(0.3), 4).weights
    r = taylor_report(o, thetas, w)
    merged = np.sum([wi * t for wi, t in zip(w, thetas)], axis=0)
    assert r.merged_loss_exact == pytest.approx(quadratic_loss(o, merged), rel=1e-13)
    assert r.merged_loss_predicted == pytest.approx(r.merged_loss_exact, rel=1e-9)
    avg = sum(wi * quadratic_loss(o, t) for wi, t in zip(w, thetas))
    assert r.avg_individual_loss == pytest.approx(avg, rel=1e-12)


def test_report_json(tmp_path, rng):
    o = QuadraticOracle.random(rng, 3)
    r = taylor_report(o, [rng.standard_normal(3) for _ in range(3)])
    d = json.loads(r.save(tmp_path / "r.json").read_text())
    assert d["k"] == 3 and len(d["q_matrix"]) == 3 and d["condition_holds"] == r.condition_holds


def test_empirical_hessian_recovers_quadratic(rng):
    o = QuadraticOracle.random(rng, 12, cond=10)
    h = empirical_hessian(lambda t: quadratic_loss(o, t), o.theta_star + 0.1 * rng.standard_normal(12))
    assert np.linalg.norm(h - o.hessian) / np.linalg.norm(o.hessian) < 1e-6
    assert np.array_equal(h, h.T)


def test_empirical_hessian_of_linear_is_zero(rng):
    a = rng.standard_normal(7)
    h = empirical_hessian(lambda t: float(a @ t) + 3.0, rng.standard_normal(7))
    assert np.max(np.abs(h)) < 1e-6


def test_empirical_hessian_errors():
    with pytest.raises(AnalysisError, match="cap"):
        empirical_hessian(lambda t: 0.0, np.zeros(201))
    with pytest.raises(AnalysisError, match="non-finite"):
        empirical_hessian(lambda t: float("nan"), np.zeros(2))


def test_trajectory_report_records_reference(rng):
    o = QuadraticOracle.random(rng, 4, cond=5)
    thetas = [o.theta_star + 0.5 * rng.standard_normal(4) for _ in range(3)]
    r = analysis.trajectory_report(lambda t: quadratic_loss(o, t), thetas, candidates=[o.theta_star])
    assert r.notes["reference_index"] == 4
    assert r.notes["hessian_shift"] == 0.0
    assert r.merged_loss_predicted == pytest.approx(r.notes["merged_loss_true"], rel=1e-6)


def test_surface_center_is_minimum(rng):
    o = QuadraticOracle.random(rng, 6)
    s = o.theta_star
    grid = surface_grid(lambda t: quadratic_loss(o, t), s, 1, 4,
                        ((s[1] - 1, s[1] + 1), (s[4] - 2, s[4] + 2)), resolution=21)
    assert grid.values.shape == (21, 21)
    assert grid.argmin() == (10, 10)


def test_surface_csv(tmp_path, rng):
    o = QuadraticOracle.random(rng, 3)
    grid = surface_grid(lambda t: quadratic_loss(o, t), np.zeros(3), 0, 2, ((0, 1), (0, 1)), resolution=2,
                        checkpoints=[("a", np.ones(3)), ("b", np.arange(3.0))])
    surface, points = grid.write_csv(tmp_path)
    rows = list(csv.reader(open(surface)))
    assert rows[0] == ["x", "y", "value"] and len(rows) == 5
    assert [float(v) for v in rows[4]] == [1.0, 1.0, quadratic_loss(o, [1.0, 0.0, 1.0])]
    pts = list(csv.reader(open(points)))
    assert pts[0] == ["label", "x", "y", "value"]
    assert pts[2][:3] == ["b", "0.0", "2.0"]


def test_surface_errors():
    f = lambda t: 0.0  # noqa: E731
    with pytest.raises(AnalysisError, match="out of range"):
        surface_grid(f, np.zeros(3), 0, 3, ((0, 1), (0, 1)))
    with pytest.raises(AnalysisError, match="differ"):
        surface_grid(f, np.zeros(3), 1, 1, ((0, 1), (0, 1)))
    with pytest.raises(AnalysisError, match="resolution"):
        surface_grid(f, np.zeros(3), 0, 1, ((0, 1), (0, 1)), resolution=1)


@pytest.mark.slow
def test_merged_point_overlay_beats_median_checkpoint(tmp_path):
    model = ModelConfig("mlp", (8, 16, 1))
    wins = 0
    for seed in range(10):
        cfg = TrainConfig(seed=seed, model=model, data=DataConfig("regression", 2048, 1024, 0.5), steps=1500,
                          batch_size=16, schedule=WsdSchedule(0.02, 0.0, 100, 1400, 0), checkpoint_every=50)
        m = train(cfg, tmp_path / str(seed))
        data = trainer.dataset_for(cfg)
        states = [trainer.load_params(m.path_of(e)) for e in m.entries[-10:]]
        merged = toy.flatten(merge_states(states, compute_weights(MergeStrategy.sma(), 10)))
        flats = [toy.flatten(s) for s in states]
        fn = lambda t: trainer.val_loss(toy.unflatten(t, model), cfg, data)  # noqa: E731
        lo, hi = np.min(flats, axis=0), np.max(flats, axis=0)
        grid = surface_grid(fn, merged, 0, 1, ((lo[0], hi[0]), (lo[1], hi[1])), resolution=5,
                            checkpoints=[(f"ckpt{i}", f) for i, f in enumerate(flats)] + [("merged", merged)])
        values = [v for label, _, _, v in grid.points]
        wins += values[-1] <= np.median(values[:-1])
    assert wins >= 7
