import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from hypothesis import given, settings, strategies as st

from owrec import (
    LabeledDataset,
    MetricModel,
    NcmModel,
    NnoModel,
    OwrError,
    TauSearchConfig,
    default_tau_grid,
    estimate_softmax_theta,
    estimate_tau,
    f1_at_tau,
    increment_learn,
    inverse_ball_volume,
    nno_score,
    predict_closed,
    recognize,
)
from owrec.ncm import class_means

INV_PI = 0.31830988618379067154
# peak of a 3-dimensional cap with tau = 2, evaluated half-way down the slope
CAP3_HALF = 0.014920775914865187728


def _cluster_ds(centers, per_class, spread, seed, first_label=1):
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for i, c in enumerate(centers):
        c = np.asarray(c, dtype=float)
        rows.append(c + rng.normal(0, spread, (per_class, c.size)))
        labels.append(np.full(per_class, first_label + i))
    return LabeledDataset(np.vstack(rows), np.concatenate(labels))


def _model_1d(tau):
    ncm = NcmModel.build(MetricModel.identity(1), [(1, [0.0]), (2, [10.0])])
    return NnoModel(ncm, tau)


class TestBallVolume:
    def test_known_values(self):
        assert_allclose(inverse_ball_volume(1, 2.0), 0.25, rtol=1e-15)
        assert_allclose(inverse_ball_volume(2, 1.0), INV_PI, rtol=1e-15)
        assert_allclose(inverse_ball_volume(3, 2.0), 2 * CAP3_HALF, rtol=1e-15)


class TestNnoModel:
    def test_tau_validation(self):
        ncm = NcmModel.build(MetricModel.identity(1), [(1, [0.0])])
        with pytest.raises(OwrError):
            NnoModel(ncm, 0.0)
        with pytest.raises(OwrError):
            NnoModel(ncm, float("nan"))

    def test_norm_const_coherence(self):
        ncm = NcmModel.build(MetricModel.identity(2), [(1, [0.0, 0.0])])
        model = NnoModel(ncm, 1.0)
        assert_allclose(model.norm_const, INV_PI, rtol=0, atol=1e-16)
        with pytest.raises(OwrError, match="norm"):
            NnoModel(ncm, 1.0, norm_const=0.5)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        metric = MetricModel(rng.normal(size=(2, 3)))
        ncm = NcmModel.build(metric, [(c, rng.normal(size=3)) for c in (1, 4, 6)])
        model = NnoModel(ncm, 0.73)
        p = tmp_path / "nno.owrn"
        model.save(p)
        back = NnoModel.load(p)
        assert back.tau == model.tau
        assert back.norm_const == model.norm_const
        assert_array_equal(back.ncm.means, model.ncm.means)
        assert_array_equal(back.ncm.metric.w, metric.w)


class TestScore:
    def test_peak_at_mean(self):
        model = _model_1d(tau=2.0)
        assert nno_score(model, np.array([0.0]), 0) == model.norm_const

    def test_two_dim_peak_is_inverse_area(self):
        ncm = NcmModel.build(MetricModel.identity(2), [(1, [3.0, -1.0])])
        model = NnoModel(ncm, 1.0)
        assert_allclose(nno_score(model, np.array([3.0, -1.0]), 0), INV_PI,
                        rtol=0, atol=1e-16)

    def test_three_dim_half_way(self):
        ncm = NcmModel.build(MetricModel.identity(3), [(1, [0.0, 0.0, 0.0])])
        model = NnoModel(ncm, 2.0)
        x = np.array([1.0, 0.0, 0.0])
        assert_allclose(nno_score(model, x, 0), CAP3_HALF, rtol=1e-14)

    def test_zero_at_and_beyond_boundary(self):
        model = _model_1d(tau=2.0)
        assert nno_score(model, np.array([2.0]), 0) == 0.0
        assert nno_score(model, np.array([5.0]), 0) == 0.0

    def test_monotone_along_rays(self):
        rng = np.random.default_rng(1)
        metric = MetricModel(rng.normal(size=(2, 4)))
        mu = rng.normal(size=4)
        model = NnoModel(NcmModel.build(metric, [(1, mu)]), 1.5)
        for _ in range(20):
            u = rng.normal(size=4)
            scores = [nno_score(model, mu + t * u, 0) for t in np.linspace(0, 3, 40)]
            assert all(b <= a + 1e-15 for a, b in zip(scores, scores[1:]))

    def test_index_check(self):
        with pytest.raises(OwrError, match="out of range"):
            nno_score(_model_1d(1.0), np.array([0.0]), 5)


class TestRecognize:
    def test_known_means_recovered(self):
        rng = np.random.default_rng(2)
        metric = MetricModel(rng.normal(size=(3, 4)))
        means = [(c, rng.normal(size=4)) for c in (1, 3, 8)]
        model = NnoModel(NcmModel.build(metric, means), 1.0)
        for c, mu in means:
            assert recognize(model, np.asarray(mu)) == c

    def test_distant_point_rejected(self):
        model = _model_1d(tau=1.0)
        assert recognize(model, np.array([100.0])) == 0

    def test_acceptance_matches_closed_prediction(self):
        rng = np.random.default_rng(3)
        metric = MetricModel(rng.normal(size=(2, 3)))
        means = [(c + 1, rng.normal(size=3)) for c in range(4)]
        model = NnoModel(NcmModel.build(metric, means), 2.0)
        for x in rng.normal(0, 2, size=(300, 3)):
            got = recognize(model, x)
            if got != 0:
                assert got == predict_closed(model.ncm, x)

    def test_score_positive_iff_accepted(self):
        rng = np.random.default_rng(4)
        metric = MetricModel.identity(2)
        means = [(1, [0.0, 0.0]), (2, [4.0, 0.0])]
        model = NnoModel(NcmModel.build(metric, means), 1.5)
        for x in rng.uniform(-3, 7, size=(300, 2)):
            best = max(nno_score(model, x, i) for i in range(2))
            assert (recognize(model, x) != 0) == (best > 0.0)


class TestF1:
    def test_perfect(self):
        assert f1_at_tau([1, 2, 0], [1, 2, 0]) == 1.0

    def test_all_rejected(self):
        assert f1_at_tau([0, 0], [1, 2]) == 0.0

    def test_hand_counted_example(self):
        preds = [1, 2, 3, 0, 5, 0]
        truth = [1, 2, 3, 4, 0, 0]
        # 4 accepted, 3 of them correct known: precision 3/4, recall 3/4
        assert f1_at_tau(preds, truth) == 0.75

    def test_no_known_truth(self):
        assert f1_at_tau([0, 0], [0, 0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(OwrError):
            f1_at_tau([1], [1, 2])

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_bounded(self, truth):
        preds = list(reversed(truth))
        assert 0.0 <= f1_at_tau(preds, truth) <= 1.0


class TestTauSearch:
    def _setup(self):
        known = _cluster_ds([(0.0, 0.0), (10.0, 0.0)], 9, 0.05, seed=5)
        unknown = _cluster_ds([(500.0, 0.0)], 6, 0.05, seed=6, first_label=3)
        return known, unknown, MetricModel.identity(2)

    def test_tie_takes_smallest_candidate(self):
        known, unknown, metric = self._setup()
        cfg = TauSearchConfig(grid=(1.0, 5.0, 20.0, 80.0), fold_count=3, seed=0)
        assert estimate_tau(known, unknown, metric, cfg) == 1.0

    def test_degenerate_candidate_loses(self):
        known, unknown, metric = self._setup()
        cfg = TauSearchConfig(grid=(1e-4, 1.0), fold_count=3, seed=0)
        assert estimate_tau(known, unknown, metric, cfg) == 1.0

    def test_single_candidate(self):
        known, unknown, metric = self._setup()
        cfg = TauSearchConfig(grid=(2.5,), fold_count=3, seed=1)
        assert estimate_tau(known, unknown, metric, cfg) == 2.5

    def test_chosen_tau_separates(self):
        known, unknown, metric = self._setup()
        grid = tuple(float(g) for g in np.geomspace(0.01, 1000.0, 25))
        tau = estimate_tau(known, unknown, metric,
                           TauSearchConfig(grid=grid, fold_count=3, seed=2))
        model = NnoModel(NcmModel.from_dataset(metric, known), tau)
        assert all(recognize(model, x) == 0 for x in unknown.features)
        assert all(recognize(model, x) == y
                   for x, y in zip(known.features, known.labels))

    def test_empty_unknown_impossible(self):
        # datasets cannot be empty, so a missing unknown pool fails upstream
        pool = _cluster_ds([(9.0, 9.0)], 3, 0.01, seed=0, first_label=9)
        with pytest.raises(OwrError):
            pool.subset([])

    def test_too_few_samples_per_class(self):
        known, unknown, metric = self._setup()
        thin = known.subset(np.flatnonzero(known.labels == 1)[:2])
        merged = LabeledDataset(
            np.vstack([thin.features, known.features[known.labels == 2]]),
            np.concatenate([thin.labels, known.labels[known.labels == 2]]),
        )
        with pytest.raises(OwrError, match="needs at least"):
            estimate_tau(merged, unknown, metric,
                         TauSearchConfig(grid=(1.0,), fold_count=3))

    def test_grid_validation(self):
        with pytest.raises(OwrError):
            TauSearchConfig(grid=())
        with pytest.raises(OwrError):
            TauSearchConfig(grid=(2.0, 1.0))
        with pytest.raises(OwrError):
            TauSearchConfig(grid=(0.0, 1.0))
        with pytest.raises(OwrError):
            TauSearchConfig(grid=(1.0,), fold_count=1)


class TestThetaSearch:
    def test_returns_grid_member(self):
        known = _cluster_ds([(0.0, 0.0), (10.0, 0.0)], 9, 0.05, seed=7)
        unknown = _cluster_ds([(5.0, 8.0)], 6, 0.05, seed=8, first_label=3)
        grid = (0.1, 0.5, 0.9)
        theta = estimate_softmax_theta(known, unknown, MetricModel.identity(2), grid)
        assert theta in grid

    def test_grid_range_checked(self):
        known = _cluster_ds([(0.0,), (10.0,)], 6, 0.05, seed=9)
        unknown = _cluster_ds([(99.0,)], 4, 0.05, seed=10, first_label=3)
        with pytest.raises(OwrError):
            estimate_softmax_theta(known, unknown, MetricModel.identity(1), (0.5, 1.5))


class TestDefaultGrid:
    def test_shape_and_monotonicity(self):
        known = _cluster_ds([(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], 8, 0.3, seed=11)
        grid = default_tau_grid(known, MetricModel.identity(2), count=40)
        assert len(grid) == 40
        assert all(g > 0 for g in grid)
        assert all(a < b for a, b in zip(grid, grid[1:]))

    def test_brackets_useful_range(self):
        known = _cluster_ds([(0.0, 0.0), (10.0, 0.0)], 8, 0.3, seed=12)
        grid = default_tau_grid(known, MetricModel.identity(2))
        # a workable threshold (between spread and gap) must lie inside the grid
        assert grid[0] < 2.0 < grid[-1]


class TestIncrement:
    def _base(self, rng):
        metric = MetricModel(rng.normal(size=(2, 3)))
        ncm = NcmModel.build(metric, [(1, rng.normal(size=3)), (2, rng.normal(size=3))])
        return NnoModel(ncm, 1.0)

    def test_single_sample_class(self):
        rng = np.random.default_rng(13)
        model = self._base(rng)
        row = rng.normal(size=3)
        out = increment_learn(model, LabeledDataset([row], [5]))
        idx = list(out.ncm.ids).index(5)
        assert_array_equal(out.ncm.means[idx], row)
        assert out.tau == model.tau

    def test_matches_batch_rebuild(self):
        rng = np.random.default_rng(14)
        model = self._base(rng)
        added = model
        pool_rows = [np.zeros((0, 3))]
        pool_labels = [np.zeros(0, dtype=int)]
        for c in (3, 4, 5):
            rows = rng.normal(size=(6, 3))
            added = increment_learn(added, LabeledDataset(rows, np.full(6, c)))
            pool_rows.append(rows)
            pool_labels.append(np.full(6, c))
        pool = LabeledDataset(np.vstack(pool_rows), np.concatenate(pool_labels))
        batch_means = dict(class_means(pool))
        for c in (3, 4, 5):
            idx = list(added.ncm.ids).index(c)
            assert np.max(np.abs(added.ncm.means[idx] - batch_means[c])) <= 1e-12

    def test_order_insensitive(self):
        rng = np.random.default_rng(15)
        model = self._base(rng)
        chunks = [(c, rng.normal(size=(4, 3))) for c in (7, 3, 9, 5)]
        a = model
        for c, rows in chunks:
            a = increment_learn(a, LabeledDataset(rows, np.full(4, c)))
        b = model
        for c, rows in reversed(chunks):
            b = increment_learn(b, LabeledDataset(rows, np.full(4, c)))
        assert_array_equal(a.ncm.ids, b.ncm.ids)
        assert_array_equal(a.ncm.means, b.ncm.means)

    def test_existing_class_rejected(self):
        rng = np.random.default_rng(16)
        model = self._base(rng)
        with pytest.raises(OwrError, match="already registered"):
            increment_learn(model, LabeledDataset(rng.normal(size=(2, 3)), [1, 1]))

    def test_multi_label_batch_rejected(self):
        rng = np.random.default_rng(17)
        model = self._base(rng)
        with pytest.raises(OwrError, match="exactly one label"):
            increment_learn(model, LabeledDataset(rng.normal(size=(2, 3)), [5, 6]))

    def test_old_behaviour_preserved(self):
        rng = np.random.default_rng(18)
        metric = MetricModel.identity(2)
        ncm = NcmModel.build(metric, [(1, [0.0, 0.0]), (2, [10.0, 0.0])])
        model = NnoModel(ncm, 1.0)
        out = increment_learn(model, LabeledDataset([[0.0, 10.0]], [3]))
        for x in rng.normal(0, 0.3, size=(50, 2)):
            assert recognize(out, x) == recognize(model, x)
