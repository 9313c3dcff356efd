"""Greedy max-min dispersion, the grid skeleton, and the exhaustive reference."""

import math

import numpy as np
import pytest

from btp.diversity import (
    DiversityConfig,
    brute_force_maxmin,
    distance_matrix,
    greedy_maxmin,
    min_pairwise_distance,
    spatial_init,
    sum_of_distances,
)
from btp.errors import ValidationError


# ---------------------------------------------------------------------------
# distances


def test_distance_matrix_hand_values():
    pts = np.array([[0.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(distance_matrix(pts, "manhattan"), [[0, 2], [2, 0]])
    np.testing.assert_allclose(
        distance_matrix(pts, "euclidean"), [[0, math.sqrt(2)], [math.sqrt(2), 0]]
    )
    axes = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    dmat = distance_matrix(axes, "cosine_distance")
    assert dmat[0, 1] == pytest.approx(1.0)
    assert dmat[0, 2] == pytest.approx(2.0)
    np.testing.assert_array_equal(np.diag(dmat), [0, 0, 0])


def test_distance_matrix_validation():
    with pytest.raises(ValidationError):
        distance_matrix(np.ones(3), "euclidean")
    with pytest.raises(ValidationError):
        distance_matrix(np.ones((2, 2)), "chebyshev")
    with pytest.raises(ValidationError, match="zero-norm"):
        distance_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]), "cosine_distance")


def test_subset_statistics():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert min_pairwise_distance(pts, [0, 1, 2], "euclidean") == pytest.approx(1.0)
    assert sum_of_distances(pts, [0, 1, 2], "euclidean") == pytest.approx(6.0)
    assert min_pairwise_distance(pts, [2], "euclidean") == 0.0
    assert sum_of_distances(pts, [], "euclidean") == 0.0


# ---------------------------------------------------------------------------
# greedy max-min


def test_greedy_on_a_line():
    pts = np.array([[0.0], [10.0], [1.0], [9.0]])
    # centroid is 5.0; points 0 and 1 tie at distance 5, lower index seeds
    np.testing.assert_array_equal(greedy_maxmin(pts, 2, "euclidean"), [0, 1])
    np.testing.assert_array_equal(greedy_maxmin(pts, 3, "euclidean"), [0, 1, 2])


def test_greedy_initial_is_prefix():
    pts = np.array([[0.0], [10.0], [1.0], [9.0]])
    got = greedy_maxmin(pts, 3, "euclidean", initial=[2])
    assert got[0] == 2
    np.testing.assert_array_equal(greedy_maxmin(pts, 2, "euclidean", initial=[2, 0]), [2, 0])


def test_greedy_initial_validation():
    pts = np.zeros((4, 2)) + np.arange(4)[:, None]
    with pytest.raises(ValidationError):
        greedy_maxmin(pts, 2, "euclidean", initial=[1, 1])
    with pytest.raises(ValidationError):
        greedy_maxmin(pts, 2, "euclidean", initial=[4])
    with pytest.raises(ValidationError):
        greedy_maxmin(pts, 2, "euclidean", initial=[0, 1, 2])


def test_greedy_seed_rules():
    pts = np.array([[0.0], [10.0], [4.0]])
    assert greedy_maxmin(pts, 1, "euclidean", seed_rule="spatial_first_point")[0] == 0
    assert greedy_maxmin(pts, 1, "euclidean", seed_rule="farthest_from_centroid")[0] == 1
    with pytest.raises(ValidationError):
        greedy_maxmin(pts, 1, "euclidean", seed_rule="random")


def test_greedy_cosine_zero_centroid_rejected():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(ValidationError, match="centroid"):
        greedy_maxmin(pts, 1, "cosine_distance")


def test_greedy_permutation_equivariance():
    """Relabeling candidates relabels the selection the same way."""
    rng = np.random.default_rng(10)
    for _ in range(10):
        pts = rng.standard_normal((12, 3))
        perm = rng.permutation(12)
        sel = greedy_maxmin(pts, 5, "euclidean")
        sel_perm = greedy_maxmin(pts[perm], 5, "euclidean")
        np.testing.assert_array_equal(perm[sel_perm], sel)


def test_greedy_rigid_motion_invariance():
    rng = np.random.default_rng(11)
    pts = rng.standard_normal((10, 2))
    base = greedy_maxmin(pts, 4, "euclidean")
    np.testing.assert_array_equal(greedy_maxmin(pts + 3.7, 4, "euclidean"), base)
    np.testing.assert_array_equal(greedy_maxmin(pts * 0.25, 4, "euclidean"), base)


def test_greedy_within_half_of_optimum():
    # triangle-inequality metrics guarantee the greedy min distance is at
    # least half the exhaustive optimum
    rng = np.random.default_rng(12)
    for metric in ("euclidean", "manhattan"):
        for _ in range(10):
            n = int(rng.integers(6, 11))
            k = int(rng.integers(2, 5))
            pts = rng.standard_normal((n, 3))
            opt, _ = brute_force_maxmin(pts, k, metric)
            got = min_pairwise_distance(pts, greedy_maxmin(pts, k, metric), metric)
            assert got >= 0.5 * opt - 1e-12


def test_greedy_bounds():
    pts = np.ones((3, 2))
    with pytest.raises(ValidationError):
        greedy_maxmin(pts, 0, "euclidean")
    with pytest.raises(ValidationError):
        greedy_maxmin(pts, 4, "euclidean")
    with pytest.raises(ValidationError):
        greedy_maxmin(np.zeros((0, 2)), 1, "euclidean")


# ---------------------------------------------------------------------------
# grid skeleton


def test_spatial_init_two_by_two():
    np.testing.assert_array_equal(spatial_init(2, 2, 2), [0, 3])
    np.testing.assert_array_equal(spatial_init(2, 2, 4), [0, 3, 1, 2])


def test_spatial_init_single_row():
    np.testing.assert_array_equal(spatial_init(1, 5, 2), [0, 4])
    np.testing.assert_array_equal(spatial_init(1, 5, 3), [0, 4, 2])


def test_spatial_init_four_by_four():
    np.testing.assert_array_equal(spatial_init(4, 4, 4, "manhattan"), [0, 15, 3, 9])


def test_spatial_init_deterministic_per_shape():
    np.testing.assert_array_equal(
        spatial_init(3, 4, 5, "euclidean"), spatial_init(3, 4, 5, "euclidean")
    )


def test_spatial_init_validation():
    with pytest.raises(ValidationError):
        spatial_init(0, 3, 1)
    with pytest.raises(ValidationError):
        spatial_init(2, 2, 5)
    with pytest.raises(ValidationError):
        spatial_init(2, 2, 2, "cosine_distance")


# ---------------------------------------------------------------------------
# exhaustive reference


def test_brute_force_singleton_and_ties():
    sq = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    assert brute_force_maxmin(sq, 1, "euclidean") == (math.inf, (0,))
    val, subset = brute_force_maxmin(sq, 2, "euclidean")
    assert val == pytest.approx(math.sqrt(2))
    assert subset == (0, 3)  # both diagonals tie; lexicographically smaller wins


def test_brute_force_guard_refuses_large_instances():
    pts = np.zeros((20, 2))
    with pytest.raises(ValidationError, match="guard"):
        brute_force_maxmin(pts, 10, "euclidean", guard=1000)


def test_greedy_never_beats_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(10):
        pts = rng.standard_normal((8, 2))
        k = int(rng.integers(2, 5))
        opt, _ = brute_force_maxmin(pts, k, "euclidean")
        got = min_pairwise_distance(pts, greedy_maxmin(pts, k, "euclidean"), "euclidean")
        assert got <= opt + 1e-12


# ---------------------------------------------------------------------------
# config


def test_diversity_config_defaults_and_validation():
    cfg = DiversityConfig()
    assert cfg.spatial_metric == "manhattan"
    assert cfg.semantic_metric == "cosine_distance"
    assert cfg.seed_rule == "farthest_from_centroid"
    with pytest.raises(ValidationError):
        DiversityConfig(spatial_metric="cosine_distance")
    with pytest.raises(ValidationError):
        DiversityConfig(semantic_metric="manhattan")
    with pytest.raises(ValidationError):
        DiversityConfig(seed_rule="first")
