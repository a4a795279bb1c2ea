import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsnet import anchors as K
from rsnet.errors import FormatError
from rsnet.head import Anchor

MODES = ((1.0, 1.0), (8.0, 8.0))


def two_cluster_corpus(n=12, seed=0, jitter=0.05):
    """Shapes jittered by +-``jitter`` around the two generating modes, split evenly."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        w, h = MODES[i % 2]
        out.append((w * rng.uniform(1 - jitter, 1 + jitter), h * rng.uniform(1 - jitter, 1 + jitter)))
    return out


def exhaustive_two_means(samples):
    """Best 2-partition under sum of (1 - IoU to own mean); centroids area-sorted."""
    s = np.asarray(samples, dtype=np.float64)
    best_cost, best = np.inf, None
    n = len(s)
    for mask in range(1, 2 ** (n - 1)):
        members = np.array([(mask >> i) & 1 for i in range(n)], bool)
        cost, cents = 0.0, []
        for part in (s[members], s[~members]):
            c = part.mean(axis=0)
            cents.append(c)
            cost += sum(1 - K.shape_iou(p, c) for p in part)
        if cost < best_cost:
            best_cost, best = cost, cents
    return sorted(best, key=lambda c: c[0] * c[1])


def mode_recovery(seed=0, n=12):
    corpus = two_cluster_corpus(n, seed)
    anchors = K.kmeans_anchors(corpus, k=2, seed=seed)
    ious = [K.shape_iou((a.p_w, a.p_h), m) for a, m in zip(anchors, MODES)]
    oracle = exhaustive_two_means(corpus)
    gap = max(abs(a.p_w - o[0]) + abs(a.p_h - o[1]) for a, o in zip(anchors, oracle))
    return min(ious), gap


def avg_iou_by_k(samples, ks=(1, 2, 3, 4), seed=0):
    return [K.avg_iou(samples, K.kmeans_anchors(samples, k=k, seed=seed)) for k in ks]


class TestShapeIoU:
    def test_identical(self):
        assert K.shape_iou((3, 2), (3, 2)) == 1.0

    def test_nested(self):
        assert K.shape_iou((2, 2), (4, 4)) == 0.25

    def test_crossed(self):
        assert K.shape_iou((1, 4), (4, 1)) == pytest.approx(1 / 7)

    def test_non_positive(self):
        with pytest.raises(ValueError):
            K.shape_iou((0, 1), (1, 1))

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)),
           st.tuples(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)))
    def test_symmetric_unit_interval(self, a, b):
        v = K.shape_iou(a, b)
        assert 0 < v <= 1
        assert v == pytest.approx(K.shape_iou(b, a))


class TestKMeans:
    def test_identical_samples_k1(self):
        [a] = K.kmeans_anchors([(2.5, 1.5)] * 7, k=1)
        assert (a.p_w, a.p_h) == (2.5, 1.5)

    def test_k_equals_distinct(self):
        samples = [(1, 1), (3, 1), (2, 5), (6, 6)]
        anchors = K.kmeans_anchors(samples, k=4)
        assert sorted((a.p_w, a.p_h) for a in anchors) == sorted(samples)
        assert K.avg_iou(samples, anchors) == 1.0

    def test_area_ascending(self):
        anchors = K.kmeans_anchors(two_cluster_corpus(40, 3) + [(3, 3), (4, 2)], k=4)
        areas = [a.p_w * a.p_h for a in anchors]
        assert areas == sorted(areas)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            K.kmeans_anchors([(1, 1), (1, 1), (2, 2)], k=3)

    def test_empty(self):
        with pytest.raises(ValueError):
            K.kmeans_anchors([], k=1)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            K.kmeans_anchors([(1, -1)], k=1)

    def test_deterministic(self):
        corpus = two_cluster_corpus(30, 1) + [(2, 5), (5, 2)]
        assert K.kmeans_anchors(corpus, 3, seed=4) == K.kmeans_anchors(corpus, 3, seed=4)

    @pytest.mark.parametrize("seed", range(10))
    def test_two_clusters_recover_modes(self, seed):
        worst_iou, gap = mode_recovery(seed)
        assert worst_iou >= 0.9
        assert gap < 1e-9

    @pytest.mark.parametrize("n", [4, 7, 10])
    def test_matches_exhaustive_oracle_small(self, n):
        corpus = two_cluster_corpus(n, seed=n, jitter=0.2)
        got = K.kmeans_anchors(corpus, 2, seed=0)
        for a, o in zip(got, exhaustive_two_means(corpus)):
            assert (a.p_w, a.p_h) == pytest.approx(tuple(o), abs=1e-9)

    def test_anchors_inside_envelope(self):
        rng = np.random.default_rng(5)
        samples = rng.uniform(0.5, 9, size=(60, 2))
        for a in K.kmeans_anchors(samples, 5, seed=1):
            assert samples[:, 0].min() <= a.p_w <= samples[:, 0].max()
            assert samples[:, 1].min() <= a.p_h <= samples[:, 1].max()

    def test_empty_cluster_reseed(self):
        # duplicates pull the farthest-point picks together so one cluster starts empty-prone
        samples = [(1, 1)] * 20 + [(1.01, 1.0), (9, 9)]
        anchors = K.kmeans_anchors(samples, k=3, seed=0)
        assert len(anchors) == 3
        assert all(np.isfinite([a.p_w, a.p_h]).all() for a in anchors)


class TestAvgIoU:
    def test_perfect(self):
        assert K.avg_iou([(1, 2), (3, 4)], [(1, 2), (3, 4)]) == 1.0

    def test_single_anchor(self):
        assert K.avg_iou([(2, 2), (4, 4)], [(2, 2)]) == 0.625

    def test_superset_never_lower(self):
        rng = np.random.default_rng(0)
        samples = rng.uniform(0.5, 5, size=(30, 2))
        base = [(1, 1), (3, 2)]
        assert K.avg_iou(samples, base + [(4, 4)]) >= K.avg_iou(samples, base)

    def test_empty(self):
        with pytest.raises(ValueError):
            K.avg_iou([], [(1, 1)])

    @pytest.mark.parametrize("seed", range(5))
    def test_non_decreasing_in_k(self, seed):
        rng = np.random.default_rng(seed)
        samples = np.column_stack([rng.lognormal(0.5, 0.6, 80), rng.lognormal(0.5, 0.6, 80)])
        values = avg_iou_by_k(samples)
        assert all(b >= a for a, b in zip(values, values[1:])), values


class TestAnchorFile:
    def test_round_trip(self, tmp_path):
        anchors = [Anchor(1.25, 0.5), Anchor(3.0, 4.125)]
        K.save_anchors(anchors, tmp_path / "a.txt")
        assert K.load_anchors(tmp_path / "a.txt") == anchors

    def test_format(self):
        assert K.format_anchors([Anchor(1, 2)]) == "1.000000 2.000000\n"

    @pytest.mark.parametrize("text,line", [("1 2\n3\n", 2), ("1 x\n", 1), ("1 -2\n", 1), ("1 2 3\n", 1)])
    def test_errors(self, text, line):
        with pytest.raises(FormatError) as err:
            K.parse_anchors(text)
        assert err.value.line == line

    def test_empty_file(self):
        with pytest.raises(FormatError):
            K.parse_anchors("\n\n")
