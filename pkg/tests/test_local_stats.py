import numpy as np
import pytest

from hpgmn.graph import (SplitSet, generate_heterophilous_sbm, make_graph,
                         random_splits)
from hpgmn.local_stats import (PseudoLabels, StatMasks,
                               assemble_local_statistics, cache_key,
                               fit_pseudo_label_estimator,
                               label_wise_class_distribution,
                               label_wise_feature_distribution,
                               load_statistics_cache, ppr_diffusion,
                               save_statistics_cache)
from hpgmn.nn import TrainConfig


def pl_of(labels):
    return PseudoLabels(labels=np.asarray(labels, dtype=np.int64),
                        source="estimated")


class TestPseudoLabelEstimator:
    def test_separable_fixture_high_accuracy(self):
        g = generate_heterophilous_sbm(40, 2, 0.02, 0.2, 4.0, seed=3)
        split = random_splits(g, n_splits=1, seed=0)[0]
        pl = fit_pseudo_label_estimator(
            g, split, TrainConfig(max_epochs=150, patience=30, seed=1),
            hidden=64)
        held = np.setdiff1d(np.arange(g.num_nodes), split.train)
        acc = np.mean(pl.labels[held] == g.labels[held])
        assert acc > 0.9
        assert pl.source == "ground_truth_on_train"

    def test_train_nodes_keep_ground_truth(self):
        g = generate_heterophilous_sbm(30, 3, 0.02, 0.2, 0.0, seed=4)
        split = random_splits(g, n_splits=1, seed=0)[0]
        pl = fit_pseudo_label_estimator(
            g, split, TrainConfig(max_epochs=50, patience=10, seed=2),
            hidden=16)
        assert (pl.labels[split.train] == g.labels[split.train]).all()

    def test_uninformative_features_near_chance(self):
        g = generate_heterophilous_sbm(60, 2, 0.02, 0.2, 0.0, seed=5)
        split = random_splits(g, n_splits=1, seed=0)[0]
        pl = fit_pseudo_label_estimator(
            g, split, TrainConfig(max_epochs=100, patience=20, seed=3),
            hidden=32)
        held = np.setdiff1d(np.arange(g.num_nodes), split.train)
        acc = np.mean(pl.labels[held] == g.labels[held])
        assert abs(acc - 0.5) <= 0.1

    def test_single_class_dataset_all_zero(self):
        rng = np.random.default_rng(0)
        g = make_graph(10, [(0, 1), (2, 3)], rng.random((10, 4)),
                       np.zeros(10, dtype=int), num_classes=1)
        split = SplitSet(0, np.arange(5), np.arange(5, 8), np.arange(8, 10))
        pl = fit_pseudo_label_estimator(
            g, split, TrainConfig(max_epochs=20, patience=5, seed=0),
            hidden=8)
        assert (pl.labels == 0).all()

    def test_deterministic_given_seed(self):
        g = generate_heterophilous_sbm(25, 2, 0.05, 0.2, 1.0, seed=6)
        split = random_splits(g, n_splits=1, seed=0)[0]
        cfg = TrainConfig(max_epochs=60, patience=15, seed=9)
        a = fit_pseudo_label_estimator(g, split, cfg, hidden=16)
        b = fit_pseudo_label_estimator(g, split, cfg, hidden=16)
        assert (a.labels == b.labels).all()


class TestClassDistribution:
    def test_counts_neighbors_per_class(self):
        g = make_graph(4, [(0, 1), (0, 2), (0, 3)],
                       np.zeros((4, 2)) + 1.0, [0, 0, 0, 1], num_classes=2)
        r2 = label_wise_class_distribution(g, pl_of([0, 0, 1, 0]))
        np.testing.assert_array_equal(r2[0], [2, 1])

    def test_isolated_node_zero_row(self):
        g = make_graph(3, [(0, 1)], np.ones((3, 2)), [0, 1, 0], num_classes=2)
        r2 = label_wise_class_distribution(g, pl_of([0, 1, 0]))
        np.testing.assert_array_equal(r2[2], [0, 0])

    def test_row_sums_equal_degrees(self, sbm_bundle):
        g, _, pl, _, _ = sbm_bundle
        r2 = label_wise_class_distribution(g, pl)
        # independent degree computation straight from the edge list
        deg = np.zeros(g.num_nodes)
        for u, v in g.edges:
            deg[u] += 1
            deg[v] += 1
        np.testing.assert_array_equal(r2.sum(axis=1), deg)

    def test_single_class_gives_degree_vector(self):
        g = make_graph(4, [(0, 1), (1, 2)], np.ones((4, 2)),
                       [0, 0, 0, 0], num_classes=1)
        r2 = label_wise_class_distribution(g, pl_of([0, 0, 0, 0]))
        np.testing.assert_array_equal(r2[:, 0], [1, 2, 1, 0])

    def test_permutation_equivariance(self):
        g = generate_heterophilous_sbm(10, 2, 0.1, 0.3, 1.0, seed=8)
        pl = pl_of(g.labels)
        r2 = label_wise_class_distribution(g, pl)
        rng = np.random.default_rng(0)
        perm = rng.permutation(g.num_nodes)
        inv = np.argsort(perm)
        g2 = make_graph(g.num_nodes, inv[g.edges], g.features[perm],
                        g.labels[perm], num_classes=g.num_classes)
        r2p = label_wise_class_distribution(g2, pl_of(g2.labels))
        np.testing.assert_array_equal(r2p, r2[perm])


class TestFeatureDistribution:
    def test_single_neighbor_block(self):
        x = np.array([[9.0, 9.0], [1.0, 2.0]])
        g = make_graph(2, [(0, 1)], x, [1, 0], num_classes=2)
        r3 = label_wise_feature_distribution(g, pl_of([1, 0]))
        np.testing.assert_array_equal(r3[0], [1, 2, 0, 0])

    def test_two_neighbors_averaged(self):
        x = np.array([[5.0, 5.0], [0.0, 2.0], [2.0, 0.0]])
        g = make_graph(3, [(0, 1), (0, 2)], x, [1, 0, 0], num_classes=2)
        r3 = label_wise_feature_distribution(g, pl_of([1, 0, 0]))
        np.testing.assert_array_equal(r3[0][:2], [1, 1])

    def test_matches_naive_double_loop(self, sbm_bundle):
        g, _, pl, _, _ = sbm_bundle
        r3 = label_wise_feature_distribution(g, pl)
        f, c = g.num_features, g.num_classes
        expected = np.zeros((g.num_nodes, c * f))
        for v in range(g.num_nodes):
            for cls in range(c):
                members = [u for u in g.neighbors(v) if pl.labels[u] == cls]
                if members:
                    block = sum(g.features[u] for u in members) / len(members)
                    expected[v, cls * f:(cls + 1) * f] = block
        np.testing.assert_allclose(r3, expected, atol=1e-12)

    def test_single_class_equals_plain_neighbor_mean(self):
        g = make_graph(3, [(0, 1), (0, 2)],
                       np.array([[1.0], [2.0], [4.0]]), [0, 0, 0],
                       num_classes=1)
        r3 = label_wise_feature_distribution(g, pl_of([0, 0, 0]))
        np.testing.assert_allclose(r3[:, 0], [3.0, 1.0, 1.0])


class TestPprDiffusion:
    def test_single_node_geometric_series(self):
        g = make_graph(1, [], np.ones((1, 1)), [0], num_classes=1)
        for alpha in (0.1, 0.5, 0.85):
            s = ppr_diffusion(g, alpha, 50)
            assert s[0, 0] == pytest.approx(1 - (1 - alpha) ** 51, abs=1e-12)

    def test_two_node_closed_form(self):
        g = make_graph(2, [(0, 1)], np.ones((2, 1)), [0, 0], num_classes=1)
        alpha = 0.5
        s = ppr_diffusion(g, alpha, 200)
        # oracle: solve (I - (1-a)T) X = a I for the self-loop-augmented T
        t = np.full((2, 2), 0.5)
        expected = np.linalg.solve(np.eye(2) - (1 - alpha) * t,
                                   alpha * np.eye(2))
        np.testing.assert_allclose(s, expected, atol=1e-10)
        np.testing.assert_allclose(s, [[0.75, 0.25], [0.25, 0.75]], atol=1e-10)

    def test_column_sums_exact(self, sbm_graph):
        for alpha, k_max in ((0.15, 32), (0.5, 8), (0.9, 3)):
            s = ppr_diffusion(sbm_graph, alpha, k_max)
            expected = 1 - (1 - alpha) ** (k_max + 1)
            np.testing.assert_allclose(s.sum(axis=0), expected, atol=1e-10)

    def test_k_max_zero_returns_scaled_identity(self, sbm_graph):
        s = ppr_diffusion(sbm_graph, 0.3, 0)
        np.testing.assert_allclose(s, 0.3 * np.eye(sbm_graph.num_nodes),
                                   atol=1e-15)

    def test_alpha_out_of_range_rejected(self, sbm_graph):
        for alpha in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                ppr_diffusion(sbm_graph, alpha, 5)

    def test_entries_nonnegative_and_monotone_in_k(self, sbm_graph):
        s8 = ppr_diffusion(sbm_graph, 0.2, 8)
        s16 = ppr_diffusion(sbm_graph, 0.2, 16)
        assert (s8 >= 0).all()
        assert (s16 - s8 >= -1e-15).all()

    def test_permutation_equivariance(self):
        g = generate_heterophilous_sbm(8, 2, 0.1, 0.4, 1.0, seed=9)
        s = ppr_diffusion(g, 0.2, 12)
        rng = np.random.default_rng(1)
        perm = rng.permutation(g.num_nodes)
        inv = np.argsort(perm)
        g2 = make_graph(g.num_nodes, inv[g.edges], g.features[perm],
                        g.labels[perm], num_classes=g.num_classes)
        s2 = ppr_diffusion(g2, 0.2, 12)
        np.testing.assert_allclose(s2, s[np.ix_(perm, perm)], atol=1e-12)

    def test_isolated_node_column_still_sums(self):
        g = make_graph(3, [(0, 1)], np.ones((3, 2)), [0, 1, 0], num_classes=2)
        s = ppr_diffusion(g, 0.15, 16)
        np.testing.assert_allclose(s.sum(axis=0), 1 - 0.85 ** 17, atol=1e-12)


class TestAssemble:
    def test_texas_block_widths(self, texas_dir):
        from hpgmn.graph import load_dataset
        g, splits = load_dataset(texas_dir)
        pl = pl_of(g.labels)
        diffusion = ppr_diffusion(g, 0.15, 4)
        stats = assemble_local_statistics(g, pl, diffusion, StatMasks())
        assert stats.widths() == {"attributes": 1703, "class_dist": 5,
                                  "feature_dist": 8515, "diffusion": 183}

    def test_attributes_only(self, sbm_graph):
        masks = StatMasks(True, False, False, False)
        stats = assemble_local_statistics(sbm_graph, masks=masks)
        np.testing.assert_array_equal(stats.blocks["attributes"],
                                      sbm_graph.features)
        assert list(stats.widths()) == ["attributes"]

    def test_all_masks_off_rejected(self, sbm_graph):
        with pytest.raises(ValueError, match="no local statistic"):
            assemble_local_statistics(
                sbm_graph, masks=StatMasks(False, False, False, False))

    def test_missing_inputs_rejected(self, sbm_graph):
        with pytest.raises(ValueError, match="pseudo-labels"):
            assemble_local_statistics(
                sbm_graph, masks=StatMasks(True, True, False, False))
        with pytest.raises(ValueError, match="diffusion"):
            assemble_local_statistics(
                sbm_graph, pl_of(sbm_graph.labels),
                masks=StatMasks(True, True, True, True))

    def test_dimension_mismatch_rejected(self, sbm_graph):
        wrong = np.eye(sbm_graph.num_nodes + 1)
        with pytest.raises(ValueError, match="does not match"):
            assemble_local_statistics(sbm_graph, pl_of(sbm_graph.labels),
                                      wrong, StatMasks())


class TestStatisticsCache:
    def test_roundtrip(self, tmp_path, sbm_bundle):
        _, _, _, _, stats = sbm_bundle
        path = tmp_path / "stats.npz"
        save_statistics_cache(path, stats)
        loaded = load_statistics_cache(path)
        assert loaded is not None
        assert loaded.masks == stats.masks
        for name, m in stats.blocks.items():
            np.testing.assert_array_equal(loaded.blocks[name], m)

    def test_missing_file_returns_none(self, tmp_path):
        assert load_statistics_cache(tmp_path / "absent.npz") is None

    def test_version_bump_invalidates(self, tmp_path, sbm_bundle, monkeypatch):
        _, _, _, _, stats = sbm_bundle
        path = tmp_path / "stats.npz"
        save_statistics_cache(path, stats)
        import hpgmn.local_stats as mod
        monkeypatch.setattr(mod, "CACHE_VERSION", mod.CACHE_VERSION + 1)
        assert load_statistics_cache(path) is None

    def test_cache_key_sensitivity(self):
        base = cache_key("h", 0, 0.15, 32, 7)
        assert cache_key("h", 1, 0.15, 32, 7) != base
        assert cache_key("h", 0, 0.2, 32, 7) != base
        assert cache_key("h", 0, 0.15, 16, 7) != base
        assert cache_key("h", 0, 0.15, 32, 8) != base
        assert cache_key("h", 0, 0.15, 32, 7) == base
