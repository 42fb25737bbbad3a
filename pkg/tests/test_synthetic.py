import json
import math

import numpy as np
import pytest

from stockpot.geometry import distance_to, geometry_report, pseudo_center
from stockpot.merge import interpolation_ratio
from stockpot.synthetic import (
    SpecError,
    SyntheticSpec,
    TrajectoryParams,
    brute_force_optimal_t,
    concentration_stats,
    default_spec,
    load_spec,
    sample_ensemble,
    simulate_trajectories,
)
from stockpot.tensor_store import Checkpoint, serialize


def test_zero_sigma_samples_equal_mu():
    spec = SyntheticSpec.build([("a", (5,)), ("b", (2, 3))], sigma=0.0, seed=1)
    ens = sample_ensemble(spec, 4)
    assert all(m == ens.center for m in ens.models)


def test_sampling_is_reproducible():
    a = sample_ensemble(default_spec(seed=9), 3)
    b = sample_ensemble(default_spec(seed=9), 3)
    assert [serialize(m) for m in a.models] == [serialize(m) for m in b.models]
    assert serialize(a.anchor) == serialize(b.anchor)
    c = sample_ensemble(default_spec(seed=10), 3)
    assert serialize(a.models[0]) != serialize(c.models[0])


def test_sample_squared_radius_matches_trace():
    spec = default_spec(seed=2)
    ens = sample_ensemble(spec, 20)
    for u in spec.units:
        sq = [np.sum((m[u.name].values - spec.mu[u.name]) ** 2) for m in ens.models]
        assert np.mean(sq) == pytest.approx(u.n * spec.sigma[u.name] ** 2, rel=0.02)


def test_spec_validation():
    with pytest.raises(SpecError):
        SyntheticSpec.build([("a", (0,))])
    with pytest.raises(SpecError):
        SyntheticSpec.build([("a", (3,))], sigma=-1.0)
    with pytest.raises(SpecError):
        SyntheticSpec.build([("a", (3,)), ("a", (3,))])
    with pytest.raises(SpecError):
        SyntheticSpec.from_json({"units": [{"shape": [3]}]})


def test_spec_from_json(tmp_path):
    config = {
        "seed": 4,
        "sigma": 0.1,
        "units": [
            {"name": "x", "shape": [3], "mu": [1, 2, 3], "anchor_offset": [0, 0, 1]},
            {"name": "y", "shape": [2, 2], "sigma": 0.5},
        ],
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(config))
    spec = load_spec(path)
    assert spec.seed == 4
    assert spec.sigma == {"x": 0.1, "y": 0.5}
    assert spec.mu["x"].tolist() == [1.0, 2.0, 3.0]
    assert spec.anchor_arrays()["x"].tolist() == [1.0, 2.0, 4.0]


def test_concentration_anchor_at_mu():
    spec = SyntheticSpec.build([("w", (100, 100))], sigma=0.01, offset_ratio=0.0, seed=3)
    (row,) = concentration_stats(spec, 20)
    assert row.predicted_norm_mean == pytest.approx(math.sqrt(10_000 * 0.01**2))
    assert row.norm_rel_dev < 0.02
    assert row.predicted_angle_deg == pytest.approx(90.0)


def test_concentration_sixty_degrees():
    for row in concentration_stats(default_spec(seed=8), 20):
        assert row.predicted_angle_deg == pytest.approx(60.0)
        assert row.angle_dev_deg < 1.5
        # first-order std prediction is within a factor of 1.5 of the measurement
        assert 1 / 1.5 < row.measured_angle_std_deg / row.predicted_angle_std_deg < 1.5


def test_concentration_zero_sigma():
    spec = SyntheticSpec.build([("w", (50,))], sigma=0.0, seed=0)
    spec.anchor_offset["w"] = np.linspace(-1.0, 1.0, 50)
    (row,) = concentration_stats(spec, 5)
    assert row.measured_angle_std_deg == 0.0
    assert row.measured_norm_std == 0.0


def test_shell_radius_scales_with_sigma_and_sqrt_n():
    radii = {}
    for sigma in (0.01, 0.04):
        for side in (50, 200):
            spec = SyntheticSpec.build([("w", (side, side))], sigma=sigma, offset_ratio=0.0, seed=1)
            ens = sample_ensemble(spec, 10)
            radii[sigma, side] = np.mean([distance_to(m, ens.center).global_distance for m in ens.models])
    assert radii[0.04, 50] / radii[0.01, 50] == pytest.approx(4.0, rel=0.02)
    assert radii[0.01, 200] / radii[0.01, 50] == pytest.approx(4.0, rel=0.02)


def test_variance_reduction_law():
    ens = sample_ensemble(default_spec(seed=13), 8)
    scaled = [
        distance_to(pseudo_center(ens.models[:n]), ens.center).global_distance * math.sqrt(n) for n in (1, 2, 4, 8)
    ]
    assert max(scaled) / min(scaled) - 1 < 0.05


# -- trajectories


def test_trajectory_param_validation():
    with pytest.raises(ValueError):
        TrajectoryParams(2, 0.5, (0.5, 1.0))
    with pytest.raises(ValueError):
        TrajectoryParams(2, 0.0, (1.0, 1.0))
    with pytest.raises(ValueError):
        TrajectoryParams(2, 0.5, (1.0,))


def test_full_step_without_noise_reaches_mu():
    spec = default_spec(seed=1)
    run = simulate_trajectories(spec, TrajectoryParams(3, 1.0, (0.0, 0.0, 0.0)), [0, 1])
    mu = Checkpoint.from_arrays(spec.mu)
    assert all(t[0] == mu for t in run.trajectories)
    assert run.centers[0] == mu


def test_trajectories_are_deterministic():
    spec = default_spec(seed=2)
    params = TrajectoryParams.decaying(3)
    a = simulate_trajectories(spec, params, [0, 1])
    b = simulate_trajectories(spec, params, [0, 1])
    assert a.trajectories == b.trajectories


def test_decaying_noise_shrinks_angles():
    spec = default_spec(seed=5)
    params = TrajectoryParams.decaying(6, eta=0.3, start=1.0, decay=0.7)
    run = simulate_trajectories(spec, params, list(range(20)))
    means = []
    for epoch in range(params.epochs):
        report = geometry_report([t[epoch] for t in run.trajectories], run.anchor)
        means.append(np.mean([u.mean_angle_deg for u in report.units]))
        # consistent angles across seeds at one timestamp
        assert all(u.std_angle_deg < 1.0 for u in report.units)
    assert all(b <= a + 1.0 for a, b in zip(means, means[1:]))
    assert means[-1] < means[0]


def test_rebranch_records_merges():
    spec = default_spec(seed=7)
    run = simulate_trajectories(spec, TrajectoryParams.decaying(3, rebranch=True), [0, 1])
    assert len(run.merged) == 3
    with pytest.raises(ValueError):
        simulate_trajectories(spec, TrajectoryParams.decaying(3, rebranch=True), [0])


# -- brute-force oracle


def test_brute_force_mean_at_center_gives_one():
    spec = SyntheticSpec.build([("w", (40,))], seed=0)
    ens = sample_ensemble(spec, 3)
    center = pseudo_center(ens.models)
    t, d = brute_force_optimal_t(ens.anchor, ens.models, center, 0.001)
    assert t == 1.0
    assert d < 1e-12


def test_brute_force_anchor_at_center_gives_zero():
    mu = np.array([1.0, -2.0, 0.5, 3.0])
    anchor = Checkpoint.from_arrays({"w": mu})
    models = [Checkpoint.from_arrays({"w": mu + e}) for e in np.eye(4)[:3]]
    t, d = brute_force_optimal_t(anchor, models, anchor, 0.01)
    assert (t, d) == (0.0, 0.0)


def test_brute_force_grid_includes_endpoint():
    anchor = Checkpoint.from_arrays({"w": np.zeros(2)})
    models = [Checkpoint.from_arrays({"w": np.ones(2)})] * 2
    target = Checkpoint.from_arrays({"w": np.ones(2)})
    assert brute_force_optimal_t(anchor, models, target, 0.3)[0] == 1.0


def test_brute_force_agrees_with_closed_form_in_aggregate():
    errors = []
    for seed in range(10):
        ens = sample_ensemble(default_spec(seed=100 + seed), 3)
        from stockpot.merge import stock_merge
        from stockpot.geometry import Granularity, Kind

        _, report = stock_merge(ens.anchor, ens.models, Granularity(Kind.GLOBAL))
        t_star, _ = brute_force_optimal_t(ens.anchor, ens.models, ens.center, 0.001)
        errors.append(abs(report.units[0].t - t_star))
    assert np.mean(errors) < 0.006
