import datetime as dt
import math

import numpy as np
import pytest

from obsim import data as od


def _dates(n, start="2020-01-01"):
    first = dt.date.fromisoformat(start)
    return [first + dt.timedelta(days=i) for i in range(n)]


def _table(columns, values, source, dates=None):
    values = np.asarray(values, dtype=np.float64)
    dates = dates if dates is not None else _dates(values.shape[0])
    return od.RawTable(columns, dates, values, source)


def _ingest(obs, sim, target="a", **kw):
    return od.ingest(obs, sim, od.IngestConfig(target=target, **kw))


def test_column_with_sixty_percent_missing_is_dropped():
    vals = np.ones((10, 2))
    vals[:6, 1] = np.nan
    obs = _table(["a", "b"], vals, od.OBSERVED)
    sim = _table(["a"], np.linspace(0, 1, 10).reshape(-1, 1), od.SIMULATED)
    ds = _ingest(obs, sim)
    assert ds.obs_names == ["a"]


def test_column_with_half_missing_is_kept():
    vals = np.ones((10, 2))
    vals[:5, 1] = np.nan
    obs = _table(["a", "b"], vals, od.OBSERVED)
    sim = _table(["a"], np.linspace(0, 1, 10).reshape(-1, 1), od.SIMULATED)
    ds = _ingest(obs, sim)
    assert ds.obs_names == ["a", "b"]


def test_min_max_scaling_identity_case():
    obs = _table(["a"], [[0.0], [5.0], [10.0]], od.OBSERVED)
    sim = _table(["a"], [[0.0], [5.0], [10.0]], od.SIMULATED)
    ds = _ingest(obs, sim)
    np.testing.assert_allclose(ds.x_obs[:, 0], [0.0, 0.5, 1.0])


def test_constant_column_scales_to_zeros():
    obs = _table(["a", "c"], [[0.0, 7.0], [5.0, 7.0], [10.0, 7.0]], od.OBSERVED)
    sim = _table(["a"], [[0.0], [5.0], [10.0]], od.SIMULATED)
    ds = _ingest(obs, sim)
    np.testing.assert_array_equal(ds.x_obs[:, 1], np.zeros(3))


def test_dropped_target_is_a_hard_error():
    vals = np.ones((10, 2))
    vals[:8, 1] = np.nan
    obs = _table(["a", "t"], vals, od.OBSERVED)
    sim = _table(["a"], np.ones((10, 1)), od.SIMULATED)
    with pytest.raises(od.IngestError, match="target"):
        _ingest(obs, sim, target="t")


def test_zero_overlap_is_a_hard_error():
    obs = _table(["a"], np.linspace(0, 1, 5).reshape(-1, 1), od.OBSERVED)
    sim = _table(["z"], np.linspace(0, 1, 5).reshape(-1, 1), od.SIMULATED)
    with pytest.raises(od.IngestError, match="overlap"):
        _ingest(obs, sim)


def test_overlap_matching_is_case_insensitive():
    obs = _table(["Temp", "y"], np.random.default_rng(0).random((6, 2)), od.OBSERVED)
    sim = _table(["temp"], np.random.default_rng(1).random((6, 1)), od.SIMULATED)
    ds = _ingest(obs, sim, target="y")
    assert ds.overlap == [(0, 0)]


def test_overlap_override_file_pairs():
    obs = _table(["a", "y"], np.random.default_rng(0).random((6, 2)), od.OBSERVED)
    sim = _table(["b"], np.random.default_rng(1).random((6, 1)), od.SIMULATED)
    ds = _ingest(obs, sim, target="y", overlap_pairs=[("a", "b")])
    assert ds.overlap == [(0, 0)]
    with pytest.raises(od.IngestError):
        _ingest(obs, sim, target="y", overlap_pairs=[("nope", "b")])


def test_unscale_round_trip():
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(20, 3)) * 7.0 + 3.0
    obs = _table(["a", "b", "y"], raw, od.OBSERVED)
    sim = _table(["a", "b"], rng.normal(size=(20, 2)), od.SIMULATED)
    ds = _ingest(obs, sim, target="y")
    np.testing.assert_allclose(ds.unscale(ds.x_obs, od.OBSERVED), raw, atol=1e-12)


def test_daily_resample_means_duplicate_dates_and_aligns_rows():
    d0 = dt.date(2020, 1, 1)
    obs = od.RawTable(
        ["a"],
        [d0, d0, d0 + dt.timedelta(days=1)],
        np.array([[1.0], [3.0], [5.0]]),
        od.OBSERVED,
    )
    sim = od.RawTable(
        ["a"],
        [d0, d0 + dt.timedelta(days=1), d0 + dt.timedelta(days=2)],
        np.array([[2.0], [4.0], [9.0]]),
        od.SIMULATED,
    )
    ds = _ingest(obs, sim)
    assert ds.dates == ["2020-01-01", "2020-01-02"]  # day 3 has no observed row
    assert ds.x_obs.shape[0] == ds.x_sim.shape[0] == 2
    # joint min/max over {2 (=mean of 1,3), 5} and {2, 4}: scaled obs day one = 0
    assert ds.x_obs[0, 0] == 0.0


def test_mask_marks_exactly_the_genuinely_observed_cells():
    vals = np.array([[1.0, 2.0], [np.nan, 3.0], [4.0, np.nan], [2.0, 2.5]])
    obs = _table(["a", "b"], vals, od.OBSERVED)
    sim = _table(["a", "b"], np.random.default_rng(2).random((4, 2)), od.SIMULATED)
    ds = _ingest(obs, sim, target="a")
    np.testing.assert_array_equal(ds.mask_obs, [[1, 1], [0, 1], [1, 0], [1, 1]])
    assert np.isfinite(ds.x_obs).all()


def test_imputed_values_stay_inside_scaled_range():
    rng = np.random.default_rng(9)
    vals = rng.normal(size=(40, 3))
    drop = rng.random((40, 2)) < 0.3
    vals[:, :2] = np.where(drop, np.nan, vals[:, :2])
    obs = _table(["a", "b", "y"], vals, od.OBSERVED)
    sim = _table(["a", "b"], rng.normal(size=(40, 2)), od.SIMULATED)
    ds = _ingest(obs, sim, target="y")
    assert ds.x_obs.min() >= 0.0 and ds.x_obs.max() <= 1.0


# ---------------------------------------------------------------------------
# synthetic generator


def test_edge_probability_zero_gives_empty_graph():
    spec = od.SyntheticSpec(
        n_nodes=4, edge_prob=0.0, n_sim_only=0, n_shifted=0, n_obs=30, n_sim=30, seed=1
    )
    _, truth = od.generate_synthetic_pair(spec)
    assert truth.adjacency.sum() == 0


def test_edge_probability_one_gives_complete_dag():
    spec = od.SyntheticSpec(
        n_nodes=3, edge_prob=1.0, n_sim_only=0, n_shifted=0, n_obs=30, n_sim=30, seed=2
    )
    _, truth = od.generate_synthetic_pair(spec)
    assert truth.adjacency.sum() == 3  # complete DAG on 3 nodes


def test_generator_is_deterministic():
    spec = od.SyntheticSpec(n_nodes=5, n_obs=40, n_sim=60, seed=7)
    a, ta = od.generate_synthetic_pair(spec)
    b, tb = od.generate_synthetic_pair(spec)
    assert np.array_equal(a.x_obs, b.x_obs)
    assert np.array_equal(a.x_sim, b.x_sim)
    assert np.array_equal(a.mask_obs, b.mask_obs)
    assert np.array_equal(ta.adjacency, tb.adjacency)


def test_generated_graph_always_acyclic_and_dataset_valid():
    for seed in range(10):
        spec = od.SyntheticSpec(
            n_nodes=6,
            edge_prob=0.5,
            n_sim_only=2,
            n_obs=25,
            n_sim=40,
            seed=seed,
            nonlinear=bool(seed % 2),
        )
        ds, truth = od.generate_synthetic_pair(spec)  # both validate on build
        assert len(truth.nodes) == 8
        assert ds.x_sim.shape == (40, 8)
        assert ds.x_obs.shape == (25, 6)
        assert ds.target_name in ds.obs_names


def test_aligned_prefix_shares_values_on_unshifted_columns():
    spec = od.SyntheticSpec(
        n_nodes=5, n_shifted=0, n_sim_only=1, n_obs=30, n_sim=50, missing_rate=0.2, seed=3
    )
    ds, _ = od.generate_synthetic_pair(spec)
    genuine = ds.mask_obs == 1.0
    np.testing.assert_allclose(
        ds.x_obs[genuine], ds.x_sim[: spec.n_obs, : spec.n_nodes][genuine], atol=1e-12
    )


# ---------------------------------------------------------------------------
# bias report


def _manual_dual(x_obs, x_sim, overlap=None):
    p = x_obs.shape[1]
    d = x_sim.shape[1]
    return od.DualDataset(
        obs_names=[f"c{i}" for i in range(p)],
        sim_names=[f"c{i}" for i in range(d)],
        x_obs=x_obs,
        x_sim=x_sim,
        mask_obs=np.ones_like(x_obs),
        overlap=overlap or [(i, i) for i in range(min(p, d))],
        target_index=0,
        obs_min=np.zeros(p),
        obs_max=np.ones(p),
        sim_min=np.zeros(d),
        sim_max=np.ones(d),
    )


def test_bias_report_identical_columns_is_zero():
    x = np.random.default_rng(0).random((50, 2))
    report = od.bias_report(_manual_dual(x, x.copy()))
    for entry in report:
        assert entry.mean_diff == 0.0
        assert entry.hist_kl == 0.0


def test_bias_report_additive_shift_mean_difference():
    x = np.random.default_rng(1).random((200, 1)) * 0.6
    report = od.bias_report(_manual_dual(x, x + 0.2))
    assert report[0].mean_diff == pytest.approx(0.2, abs=1e-12)


def test_bias_report_ranks_shifted_column_first():
    spec = od.SyntheticSpec(
        n_nodes=6, n_shifted=1, shift_sigma=1.5, n_sim_only=0, n_obs=200, n_sim=400, seed=4
    )
    ds, _ = od.generate_synthetic_pair(spec)
    report = od.bias_report(ds)
    top = report[0]
    rest = report[1:]
    assert top.hist_kl > max(e.hist_kl for e in rest)
    assert abs(top.mean_diff) > max(abs(e.mean_diff) for e in rest)


def test_histogram_kl_identical_samples_zero():
    x = np.random.default_rng(2).random(100)
    assert od.histogram_kl(x, x.copy()) == 0.0


# ---------------------------------------------------------------------------
# ground-truth graph IO


def test_graph_json_round_trip(tmp_path):
    g = od.GroundTruthGraph(["a", "b", "c"], np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]]))
    path = tmp_path / "g.json"
    g.save(path)
    loaded = od.GroundTruthGraph.load(path)
    assert loaded.nodes == g.nodes
    np.testing.assert_array_equal(loaded.adjacency, g.adjacency)


def test_graph_csv_edge_list_round_trip(tmp_path):
    g = od.GroundTruthGraph(["a", "b", "c"], np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]]))
    path = tmp_path / "g.csv"
    g.save(path)
    loaded = od.GroundTruthGraph.load(path)
    assert set(loaded.edges()) == set(g.edges())


def test_cyclic_ground_truth_rejected():
    with pytest.raises(ValueError, match="acyclic"):
        od.GroundTruthGraph(["a", "b"], np.array([[0, 1], [1, 0]]))
    with pytest.raises(ValueError):
        od.GroundTruthGraph(["a", "b"], np.array([[1, 0], [0, 0]]))
    with pytest.raises(ValueError):
        od.GroundTruthGraph(["a", "b"], np.array([[0, 2], [0, 0]]))


def test_raw_table_validation():
    with pytest.raises(od.IngestError, match="unique"):
        _table(["a", "A"], np.ones((3, 2)), od.OBSERVED)
    with pytest.raises(od.IngestError, match="non-decreasing"):
        od.RawTable(
            ["a"],
            [dt.date(2020, 1, 2), dt.date(2020, 1, 1)],
            np.ones((2, 1)),
            od.OBSERVED,
        )


def test_raw_table_from_csv(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("date,a,b\n2020-01-01,1.5,\n2020-01-02,,2.5\n")
    table = od.RawTable.from_csv(path, od.OBSERVED)
    assert table.columns == ["a", "b"]
    assert math.isnan(table.values[0, 1]) and math.isnan(table.values[1, 0])
    assert table.values[0, 0] == 1.5


def test_subset_aligned_resamples_rows():
    x = np.random.default_rng(3).random((10, 2))
    ds = _manual_dual(x, x.copy())
    sub = ds.subset_aligned(np.array([1, 1, 4]))
    assert sub.x_obs.shape == (3, 2)
    np.testing.assert_array_equal(sub.x_obs[0], sub.x_obs[1])
