import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agnostic_net import layers as L
from agnostic_net.dann import TrainConfig, make_network
from agnostic_net.evaluation import (SWEEP_COLUMNS, ActivationMap, CrossDomainTable, ProbeConfig, SweepResult,
                                     accuracy, activation_map, activation_maps, compare_maps, cross_domain_eval,
                                     feature_response_map, in_mask_mass, least_correlated, probe_agnosticism,
                                     sweep_alpha, train_probe)

HEAD = L.parse_layers(["dense 16", "relu", "dense 2"])


class TestProbe:
    def test_constant_representation_is_chance(self):
        z = np.ones((40, 5))
        y = np.tile([0, 1], 20)
        assert train_probe(z, y, z, y, HEAD, ProbeConfig(epochs=5)) == 0.5

    def test_one_hot_label_is_found(self):
        rng = np.random.default_rng(0)
        y_tr, y_te = rng.integers(0, 2, 200), rng.integers(0, 2, 100)
        z_tr, z_te = np.eye(2)[y_tr], np.eye(2)[y_te]
        assert train_probe(z_tr, y_tr, z_te, y_te, HEAD, ProbeConfig(epochs=10)) >= 0.99

    def test_reversal_layer_is_dropped(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 2, 100)
        head = [L.LayerSpec("grl")] + HEAD
        assert train_probe(np.eye(2)[y], y, np.eye(2)[y], y, head, ProbeConfig(epochs=5)) >= 0.99

    def test_frozen_network_is_not_modified(self, tiny_dataset):
        net = make_network(tiny_dataset, seed=0)
        before = {k: v.data.copy() for k, v in net.params.items()}
        probe_agnosticism(net, tiny_dataset, ProbeConfig(epochs=1))
        assert all(np.array_equal(before[k], v.data) for k, v in net.params.items())


class TestAccuracy:
    def test_constant_network_on_balanced_split(self, tiny_dataset):
        net = make_network(tiny_dataset, seed=0)
        for p in net.params.group("target").values():
            p.data = np.zeros_like(p.data)
        assert accuracy(net, tiny_dataset["target_test_iid"]) == 0.5

    def test_empty_split(self, tiny_dataset):
        from agnostic_net.data import Split
        with pytest.raises(ValueError):
            accuracy(make_network(tiny_dataset), Split.empty(40))


class TestMaps:
    def test_feature_response(self):
        feats = np.zeros((2, 2, 2))
        feats[0, 0, 0], feats[1, 1, 1], feats[1, 0, 1] = 4.0, 2.0, -3.0
        out = feature_response_map(feats, (4, 4))
        expected = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0.5, 0.5], [0, 0, 0.5, 0.5]])
        np.testing.assert_array_equal(out, expected)

    def test_all_negative_response_stays_zero(self):
        assert not feature_response_map(-np.ones((3, 2, 2)), (4, 4)).any()

    def test_in_mask_mass_counts_ties(self):
        values = np.zeros((10, 10))
        values[0, :5] = 1.0
        values[1, :10] = 0.5
        mask = np.zeros((10, 10), bool)
        mask[0] = True
        # k = 10: threshold 0.5, top set = 15 pixels, 5 of them in the mask
        assert in_mask_mass(values, mask) == pytest.approx(5 / 15)

    def test_in_mask_mass_extremes(self):
        values = np.random.default_rng(0).random((8, 8))
        assert in_mask_mass(values, np.ones((8, 8), bool)) == 1.0
        assert in_mask_mass(values, np.zeros((8, 8), bool)) == 0.0
        assert in_mask_mass(np.zeros((8, 8)), np.ones((8, 8), bool)) == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_in_mask_mass_is_a_fraction(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.integers(0, 4, size=(6, 6)).astype(float)
        mask = rng.random((6, 6)) < 0.4
        assert 0.0 <= in_mask_mass(values, mask) <= 1.0

    def test_pearson(self):
        a = np.arange(16.0).reshape(4, 4)
        assert compare_maps(a, a) == pytest.approx(1.0)
        assert compare_maps(a, -a) == pytest.approx(-1.0)
        assert compare_maps(a, np.ones((4, 4))) == 0.0
        with pytest.raises(ValueError):
            compare_maps(a, np.ones((2, 2)))

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_pearson_matches_numpy(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(20), rng.random(20)
        assert compare_maps(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)

    def test_least_correlated_order(self):
        base = np.arange(9.0).reshape(3, 3)
        maps_a = [ActivationMap(base)] * 3
        maps_b = [ActivationMap(base), ActivationMap(-base), ActivationMap(np.ones((3, 3)))]
        ranked = least_correlated(maps_a, maps_b)
        assert [i for i, _ in ranked] == [1, 2, 0]
        assert least_correlated(maps_a, maps_b, 1)[0][0] == 1

    def test_network_maps(self, tiny_dataset):
        net = make_network(tiny_dataset, seed=0)
        split = tiny_dataset["target_test_iid"]
        maps, masks = activation_maps(net, split, 32)
        assert len(maps) == len(split) and maps[0].shape == (32, 32) and masks.shape == (len(split), 32, 32)
        assert all(m.values.max() <= 1.0 and m.values.min() >= 0.0 for m in maps)
        single = activation_map(net, split.images[0, 4:36, 4:36])
        np.testing.assert_allclose(single.values, maps[0].values, rtol=1e-12, atol=1e-12)


class TestSweep:
    def test_summary_is_mean_and_population_std(self):
        rows = [{"alpha": a, "repeat_seed": s, "acc_target_test": v, "acc_target_swapped": v,
                 "acc_context_test": v, "probe_acc": v}
                for a, s, v in [(0.0, 0, 0.5), (0.0, 1, 0.7), (0.8, 0, 1.0), (0.8, 1, 0.9), (0.8, 2, 0.8)]]
        summary = SweepResult(rows).summary()
        assert summary[0]["acc_target_test_mean"] == pytest.approx(0.6)
        assert summary[0]["acc_target_test_std"] == pytest.approx(0.1)
        assert summary[1]["repeats"] == 3
        assert summary[1]["probe_acc_std"] == pytest.approx(np.std([1.0, 0.9, 0.8]))

    def test_grid_order_csv_and_worker_independence(self, tiny_dataset, tmp_path):
        cfg = TrainConfig.desk(epochs=1, seed=2)
        probe = ProbeConfig(epochs=1)
        serial = sweep_alpha(tiny_dataset, cfg, [0.0, 0.8], 3, probe_cfg=probe)
        parallel = sweep_alpha(tiny_dataset, cfg, [0.0, 0.8], 3, probe_cfg=probe, jobs=2)
        assert [(r["alpha"], r["repeat_seed"]) for r in serial.rows] == [
            (0.0, 2), (0.0, 3), (0.0, 4), (0.8, 2), (0.8, 3), (0.8, 4)]
        text = serial.to_csv(tmp_path / "s.csv")
        assert parallel.to_csv() == text
        assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS)
        assert SweepResult.from_csv(tmp_path / "s.csv").to_csv() == text
        assert serial.summary_csv().startswith("# ")

    def test_alpha_range_checked(self, tiny_dataset):
        with pytest.raises(ValueError):
            sweep_alpha(tiny_dataset, TrainConfig(epochs=0), [1.2], 1)


def test_cross_domain_table(tiny_dataset):
    table = cross_domain_eval(tiny_dataset, TrainConfig.desk(epochs=1, seed=0))
    assert isinstance(table, CrossDomainTable)
    values = [table.target_model_on_target, table.target_model_on_context,
              table.context_model_on_target, table.context_model_on_context]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert table.to_csv().splitlines()[0] == "model,target_test,context_test"
