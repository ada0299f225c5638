import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogcache.model import (
    DemandModel,
    InstanceFormatError,
    VersionMismatchError,
    aggregate_popularity,
    build_grid_topology,
    cell_average_preferences,
    instance_from_positions,
    load_instance,
    make_demand,
    owner_bs,
    save_instance,
    zipf_preferences,
)


def lens_area(r, d):
    """Intersection area of two radius-r discs whose centres are d apart."""
    return 2 * r * r * math.acos(d / (2 * r)) - (d / 2) * math.sqrt(4 * r * r - d * d)


class TestTopology:
    def test_standard_scenario(self):
        inst = build_grid_topology(10, 100, seed=1)
        assert inst.M == 10 and inst.K == 100
        sizes = [len(A) for A in inst.serving_sets]
        assert min(sizes) >= 1
        assert any(s == 2 for s in sizes)

    def test_single_cell(self):
        inst = build_grid_topology(1, 1, seed=0)
        assert inst.connectivity.tolist() == [[True]]

    def test_connectivity_matches_radius(self):
        inst = build_grid_topology(10, 300, seed=4)
        assert np.array_equal(inst.connectivity, inst.distances() <= inst.cell_radius)

    def test_views_agree(self):
        inst = build_grid_topology(5, 80, seed=2)
        for k, A in enumerate(inst.serving_sets):
            for m in range(inst.M):
                assert (m in A) == (k in inst.coverage_sets[m]) == bool(inst.connectivity[k, m])

    def test_seeded_determinism(self):
        a = build_grid_topology(10, 100, seed=9)
        b = build_grid_topology(10, 100, seed=9)
        assert a.user_positions.tobytes() == b.user_positions.tobytes()
        assert not np.array_equal(a.user_positions, build_grid_topology(10, 100, seed=10).user_positions)

    def test_lens_area_oracle(self):
        assert lens_area(150, 200) == pytest.approx(15489, abs=2)
        union = 2 * math.pi * 150**2 - lens_area(150, 200)
        assert lens_area(150, 200) / union == pytest.approx(0.123, abs=5e-4)

    @pytest.mark.parametrize("K, seed, sigmas", [(50, 7, 4.0), (20000, 7, 4.0)])
    def test_overlap_fraction(self, K, seed, sigmas):
        inst = build_grid_topology(2, K, seed=seed)
        frac = np.mean([len(A) == 2 for A in inst.serving_sets])
        expected = lens_area(150, 200) / (2 * math.pi * 150**2 - lens_area(150, 200))
        assert abs(frac - expected) <= sigmas * math.sqrt(expected * (1 - expected) / K)

    def test_uniform_drop_density(self):
        K = 100_000
        inst = build_grid_topology(10, K, seed=3)
        union = 10 * math.pi * 150**2 - 9 * lens_area(150, 200)
        expected = math.pi * 150**2 / union
        per_cell = inst.connectivity.mean(axis=0)
        assert np.all(np.abs(per_cell / expected - 1) < 0.05)

    def test_rejects_non_overlapping_cells(self):
        with pytest.raises(ValueError):
            build_grid_topology(3, 10, cell_radius=90, bs_spacing=200)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            build_grid_topology(0, 10)

    def test_grid_geometry(self):
        inst = build_grid_topology(9, 50, seed=0, geometry="grid")
        assert inst.bs_positions.shape == (9, 2)
        assert len(np.unique(inst.bs_positions[:, 1])) == 3


class TestZipf:
    def test_rows_and_max_entry(self):
        p, _ = zipf_preferences(1000, np.full(4, 0.65), seed=3)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        h = np.sum(np.arange(1, 1001) ** -0.65)
        np.testing.assert_allclose(p.max(axis=1), 1.0 / h, rtol=1e-12)

    def test_zero_skew_uniform(self):
        p, _ = zipf_preferences(5, [0.0], seed=0)
        np.testing.assert_allclose(p[0], 0.2)

    def test_ramp_concentrates_on_last_user(self):
        d = make_demand(100, 200, 0.2 + 4.8 * np.arange(1, 101) / 100, seed=3)
        assert d.preferences[-1].max() > 10 * d.preferences[0].max()

    def test_ranks_define_probabilities(self):
        p, ranks = zipf_preferences(30, [0.8, 1.5], seed=1)
        for k, g in enumerate((0.8, 1.5)):
            w = ranks[k].astype(float) ** -g
            np.testing.assert_allclose(p[k], w / w.sum(), rtol=1e-12)
            assert sorted(ranks[k]) == list(range(1, 31))

    def test_users_differ(self):
        _, ranks = zipf_preferences(50, [1.0, 1.0], seed=5)
        assert not np.array_equal(ranks[0], ranks[1])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.floats(0.0, 6.0), st.integers(0, 2**31))
    def test_rows_normalised(self, N, gamma, seed):
        p, _ = zipf_preferences(N, [gamma, gamma / 2], seed=seed)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_negative_skew_rejected(self):
        with pytest.raises(ValueError):
            zipf_preferences(5, [-0.1])


class TestDemandModel:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            DemandModel(np.array([[0.5, 0.4]]))

    def test_backhaul_positive(self):
        with pytest.raises(ValueError):
            DemandModel(np.array([[1.0]]), backhaul_delay_s=0.0)

    def test_support_and_pairs(self):
        d = DemandModel(np.array([[0.5, 0.0, 0.5], [0.0, 1.0, 0.0]]))
        assert d.support_sets == ((0, 2), (1,))
        assert d.pairs == [(0, 0), (2, 0), (1, 1)]
        assert d.support_index(2, 0) == 1
        with pytest.raises(KeyError):
            d.support_index(1, 0)

    def test_backhaul_matrix(self):
        d = DemandModel(np.array([[1.0, 0.0]]), backhaul_delay_s=np.array([[30.0, 50.0]]))
        assert d.backhaul_matrix().tolist() == [[30.0, 50.0]]


class TestAggregates:
    def test_two_users_symmetric(self):
        inst = instance_from_positions([(0, 0)], [(10, 0), (20, 0)])
        agg = aggregate_popularity(DemandModel(np.array([[1.0, 0.0], [0.0, 1.0]])), inst)
        np.testing.assert_allclose(agg.global_, [0.5, 0.5])

    def test_single_user_identity(self):
        inst = instance_from_positions([(0, 0)], [(10, 0)])
        row = np.array([[0.1, 0.6, 0.3]])
        np.testing.assert_allclose(aggregate_popularity(DemandModel(row), inst).global_, row[0])

    def test_local_rows_match_direct_average(self):
        inst = build_grid_topology(10, 100, seed=1)
        d = make_demand(100, 200, 0.65, seed=3)
        agg = aggregate_popularity(d, inst)
        np.testing.assert_allclose(agg.local.sum(axis=1), 1.0, atol=1e-9)
        for m in range(10):
            users = [k for k in range(100) if inst.connectivity[k, m]]
            direct = sum(d.preferences[k] for k in users) / len(users)
            np.testing.assert_allclose(agg.local[m], direct, rtol=1e-12)

    def test_empty_cell_is_uniform_and_flagged(self):
        inst = instance_from_positions([(0, 0), (1000, 0)], [(10, 0)])
        with pytest.warns(UserWarning):
            agg = aggregate_popularity(DemandModel(np.array([[1.0, 0.0]])), inst)
        assert agg.empty_cells == (1,)
        np.testing.assert_allclose(agg.local[1], 0.5)

    def test_cell_average_preferences(self):
        inst = build_grid_topology(4, 40, seed=2)
        d = make_demand(40, 20, 1.0, seed=2)
        approx = cell_average_preferences(d, inst)
        owners = owner_bs(inst)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            local = aggregate_popularity(d, inst).local
        np.testing.assert_allclose(approx, local[owners])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        inst = build_grid_topology(4, 30, seed=5)
        d = make_demand(30, 12, 0.2 + 4.8 * np.arange(1, 31) / 30, seed=6)
        save_instance(tmp_path / "a.fgi", inst, d)
        inst2, d2 = load_instance(tmp_path / "a.fgi")
        assert np.array_equal(inst.user_positions, inst2.user_positions)
        assert np.array_equal(inst.bs_positions, inst2.bs_positions)
        assert np.array_equal(inst.connectivity, inst2.connectivity)
        assert (inst2.seed, d2.seed) == (5, 6)
        assert inst2.cell_radius == inst.cell_radius and inst2.geometry == inst.geometry
        assert np.array_equal(d.preferences, d2.preferences)
        assert np.array_equal(d.gammas, d2.gammas)
        assert np.array_equal(d.permutations, d2.permutations)
        assert d2.file_bits == d.file_bits and d2.backhaul_delay_s == d.backhaul_delay_s

    def test_round_trip_matrix_backhaul(self, tmp_path):
        inst = instance_from_positions([(0, 0)], [(10, 0), (20, 0)])
        d = DemandModel(np.array([[0.25, 0.75], [1.0, 0.0]]), backhaul_delay_s=np.array([[40.0, 41.0], [42.0, 43.5]]))
        save_instance(tmp_path / "b.fgi", inst, d)
        _, d2 = load_instance(tmp_path / "b.fgi")
        assert np.array_equal(d2.backhaul_matrix(), d.backhaul_matrix())

    def test_truncated_file(self, tmp_path):
        inst = build_grid_topology(2, 10, seed=0)
        save_instance(tmp_path / "c.fgi", inst, make_demand(10, 4, 1.0))
        lines = (tmp_path / "c.fgi").read_text().splitlines()
        (tmp_path / "c.fgi").write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(InstanceFormatError):
            load_instance(tmp_path / "c.fgi")

    def test_version_mismatch_names_both(self, tmp_path):
        inst = build_grid_topology(2, 10, seed=0)
        save_instance(tmp_path / "d.fgi", inst, make_demand(10, 4, 1.0))
        text = (tmp_path / "d.fgi").read_text().replace("FGI 1", "FGI 0", 1)
        (tmp_path / "d.fgi").write_text(text)
        with pytest.raises(VersionMismatchError) as err:
            load_instance(tmp_path / "d.fgi")
        assert "0" in str(err.value) and "1" in str(err.value)
        assert (err.value.found, err.value.expected) == (0, 1)

    def test_not_an_instance(self, tmp_path):
        (tmp_path / "e.fgi").write_text("hello\n")
        with pytest.raises(InstanceFormatError):
            load_instance(tmp_path / "e.fgi")
