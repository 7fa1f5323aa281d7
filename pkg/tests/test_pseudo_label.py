import math

import numpy as np
import pytest

from rchc.errors import ClusteringError, ContractError, StatisticsError
from rchc.pseudo_label import (
    HISTOGRAM_BINS,
    INITIAL,
    REFINED,
    CentroidSet,
    assign_nearest,
    conflict_flags,
    cosine_distance,
    generate_pseudo_labels,
    threshold_stats,
    uncertainty_ratio,
    uncertainty_ratios,
    weighted_centroids,
    write_histogram,
    write_pseudo_label_table,
)


def _centroids(rows):
    rows = np.asarray(rows, dtype=float)
    return CentroidSet(centroids=rows, pass_=REFINED, degenerate=np.zeros(len(rows), dtype=bool))


def _brute_force_distances(embeddings, centroids):
    return np.array([[cosine_distance(z, c) for c in centroids] for z in embeddings])


def _separable_clusters(rng, n=100):
    labels = np.repeat([0, 1], n // 2)
    means = np.array([[5.0, 1.0], [1.0, 5.0]])
    embeddings = means[labels] + rng.normal(scale=0.5, size=(n, 2))
    return embeddings, labels


# --- distances ---

def test_cosine_distance_examples():
    u = np.array([0.3, -1.2, 2.0])
    assert abs(cosine_distance(u, u)) < 1e-9
    assert math.isclose(cosine_distance([1.0, 0.0], [0.0, 1.0]), 1.0)
    assert abs(cosine_distance(u, -u) - 2.0) < 1e-9
    assert math.isclose(cosine_distance([0.0, 0.0], [1.0, 0.0]), 1.0)
    with pytest.raises(ContractError):
        cosine_distance([1.0], [1.0, 2.0])


# --- centroids and assignment ---

def test_weighted_centroids_examples(rng):
    embeddings = rng.normal(size=(10, 3))
    uniform = weighted_centroids(embeddings, np.full((10, 4), 0.25))
    assert uniform.pass_ == INITIAL
    assert np.allclose(uniform.centroids, embeddings.mean(axis=0), atol=1e-8)

    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    hard = weighted_centroids(embeddings, np.eye(3)[labels])
    for k in range(3):
        assert np.allclose(hard.centroids[k], embeddings[labels == k].mean(axis=0), atol=1e-8)

    small = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]])
    weights = np.array([[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
    expected = np.array([
        (0.5 * small[0] + 0.2 * small[1] + 0.9 * small[2]) / 1.6,
        (0.5 * small[0] + 0.8 * small[1] + 0.1 * small[2]) / 1.4,
    ])
    assert np.allclose(weighted_centroids(small, weights).centroids, expected, atol=1e-8)


def test_assign_nearest_examples():
    centroids = _centroids([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert assign_nearest(np.array([[-1.0, 0.0]]), centroids)[0] == 2
    assert assign_nearest(np.array([[1.0, 1.0]]), centroids)[0] == 0


def test_assign_nearest_matches_brute_force(rng):
    for _ in range(50):
        n, k, d = rng.integers(1, 201), rng.integers(2, 11), rng.integers(2, 17)
        embeddings, centroids = rng.normal(size=(n, d)), rng.normal(size=(k, d))
        distances = _brute_force_distances(embeddings, centroids)
        expected = [min(range(k), key=lambda j: (row[j], j)) for row in distances]
        assert np.array_equal(assign_nearest(embeddings, _centroids(centroids)), expected)


def test_all_degenerate_centroids_fail():
    degenerate = weighted_centroids(np.ones((3, 2)), np.zeros((3, 2)))
    assert degenerate.degenerate.all()
    with pytest.raises(ClusteringError):
        assign_nearest(np.ones((3, 2)), degenerate)


def test_single_usable_centroid_is_a_clustering_failure():
    centroids = CentroidSet(
        centroids=np.array([[1.0, 0.0], [0.0, 0.0]]), pass_=REFINED, degenerate=np.array([False, True]),
    )
    with pytest.raises(ClusteringError) as info:
        uncertainty_ratios(np.ones((3, 2)), centroids)
    assert info.value.exit_code == 3


# --- uncertainty ratio ---

def test_uncertainty_ratio_examples():
    centroids = _centroids([[1.0, 0.0], [-1.0, 0.1]])
    assert uncertainty_ratio([1.0, 0.0], centroids) < 1e-9

    assert math.isclose(uncertainty_ratio([1.0, 1.0], _centroids([[1.0, 0.0], [0.0, 1.0]])), 1.0)

    # distances 0.2 and 0.5 from the sample (1, 0)
    near, far = math.acos(0.8), math.acos(0.5)
    centroids = _centroids([[math.cos(near), math.sin(near)], [math.cos(far), -math.sin(far)]])
    assert math.isclose(uncertainty_ratio([1.0, 0.0], centroids), 0.4, abs_tol=1e-9)


def test_tied_nearest_centroids_give_maximal_ratio():
    centroids = _centroids([[1.0, 0.0], [2.0, 0.0], [0.0, -1.0]])
    assert uncertainty_ratio([0.0, 1.0], centroids) == 1.0


def test_uncertainty_ratios_match_brute_force(rng):
    for _ in range(50):
        n, k, d = rng.integers(1, 201), rng.integers(2, 11), rng.integers(2, 17)
        embeddings, centroids = rng.normal(size=(n, d)), rng.normal(size=(k, d))
        ordered = np.sort(np.maximum(_brute_force_distances(embeddings, centroids), 0.0), axis=1)
        expected = np.where(ordered[:, 1] > 0, ordered[:, 0] / ordered[:, 1], 1.0)
        ratios = uncertainty_ratios(embeddings, _centroids(centroids))
        assert np.allclose(ratios, expected, rtol=0, atol=1e-12)
        assert np.all((ratios >= 0.0) & (ratios <= 1.0))


def test_uncertainty_ratio_is_monotone_in_nearest_distance():
    far = [0.0, 1.0]
    ratios = [
        uncertainty_ratio([1.0, 0.0], _centroids([[math.cos(a), math.sin(a)], far]))
        for a in (0.1, 0.2, 0.4, 0.6)
    ]
    assert ratios == sorted(ratios)
    assert len(set(ratios)) == len(ratios)


# --- pseudo-labels ---

def test_generate_pseudo_labels_on_separable_clusters(rng):
    embeddings, labels = _separable_clusters(rng)
    probs = np.where(np.eye(2)[labels] == 1, 0.7, 0.3)
    table, refined = generate_pseudo_labels(embeddings, probs, epoch=3)

    assert refined.pass_ == REFINED
    assert np.array_equal(table.pseudo_labels, labels)
    assert table.epoch_stamp == 3
    assert np.array_equal(table.sample_ids, np.arange(len(labels)))
    assert np.all((table.ratios >= 0.0) & (table.ratios <= 1.0))


def test_refinement_does_not_hurt_on_separable_data(rng):
    embeddings, labels = _separable_clusters(rng, n=200)
    probs = np.eye(2)[labels] * 0.8 + 0.1
    wrong = rng.random(200) < 0.1
    probs[wrong] = probs[wrong][:, ::-1]
    table, _ = generate_pseudo_labels(embeddings, probs)
    assert np.mean(table.pseudo_labels == labels) >= np.mean(table.provisional_labels == labels)


def test_consistent_one_hot_input_is_a_fixed_point(rng):
    embeddings, labels = _separable_clusters(rng)
    table, _ = generate_pseudo_labels(embeddings, np.eye(2)[labels].astype(float))
    assert np.array_equal(table.pseudo_labels, table.provisional_labels)


def test_single_sample():
    table, _ = generate_pseudo_labels(np.array([[0.5, -1.0]]), np.array([[0.6, 0.4]]))
    assert len(table) == 1
    assert table.pseudo_labels[0] in (0, 1)
    assert 0.0 <= table.ratios[0] <= 1.0


def test_generate_pseudo_labels_is_deterministic(rng):
    embeddings = rng.normal(size=(40, 3))
    probs = rng.dirichlet(np.ones(4), size=40)
    first, _ = generate_pseudo_labels(embeddings, probs)
    second, _ = generate_pseudo_labels(embeddings, probs)
    assert np.array_equal(first.pseudo_labels, second.pseudo_labels)
    assert first.ratios.tobytes() == second.ratios.tobytes()


def test_empty_class_keeps_initial_centroid(rng):
    embeddings = np.vstack([rng.normal([4.0, 0.0], 0.1, size=(10, 2)), rng.normal([0.0, 4.0], 0.1, size=(10, 2))])
    probs = np.tile([0.45, 0.45, 0.10], (20, 1))
    table, refined = generate_pseudo_labels(embeddings, probs)
    assert np.all(np.isfinite(refined.centroids))
    assert not refined.degenerate.any()
    assert len(table) == 20


# --- conflict set ---

def test_conflict_flags_examples():
    assert not conflict_flags([1], [1], [0.1], 0.65)[0]
    assert conflict_flags([1], [2], [0.3], 0.65)[0]
    assert not conflict_flags([1], [2], [0.7], 0.65)[0]


def test_conflict_flags_threshold_extremes(rng):
    pseudo, hypotheses = rng.integers(0, 4, size=100), rng.integers(0, 4, size=100)
    ratios = rng.uniform(0.0, 0.999, size=100)
    assert not conflict_flags(pseudo, hypotheses, ratios, 0.0).any()
    assert np.array_equal(conflict_flags(pseudo, hypotheses, ratios, 1.0), pseudo != hypotheses)
    with pytest.raises(ContractError):
        conflict_flags(pseudo, hypotheses, ratios, 1.5)


# --- threshold statistics ---

def test_threshold_stats_examples():
    stats = threshold_stats([0.2, 0.6, 0.9], [True, True, True])
    assert stats.median == 0.6
    assert stats.count == 3

    stats = threshold_stats([0.4] * 5, [True] * 5)
    assert stats.mean == pytest.approx(0.4) and stats.median == pytest.approx(0.4)

    with pytest.raises(StatisticsError):
        threshold_stats([0.2, 0.3], [False, False])


def test_threshold_stats_histogram_and_median(rng):
    ratios = rng.beta(5, 3, size=1000)
    mask = rng.random(1000) < 0.8
    stats = threshold_stats(ratios, mask)

    selected = np.sort(ratios[mask])
    n = selected.size
    oracle = selected[n // 2] if n % 2 else (selected[n // 2 - 1] + selected[n // 2]) / 2
    assert stats.median == oracle
    assert stats.counts.sum() == mask.sum()
    assert len(stats.counts) == HISTOGRAM_BINS
    assert np.allclose(stats.bin_edges, np.arange(HISTOGRAM_BINS + 1) / HISTOGRAM_BINS)


# --- exports ---

def test_pseudo_label_table_export(rng, tmp_path):
    table, _ = generate_pseudo_labels(rng.normal(size=(12, 3)), rng.dirichlet(np.ones(3), size=12), epoch=2)
    flags = rng.random(12) < 0.3
    path = tmp_path / "pl.csv"
    write_pseudo_label_table(table, flags, path)

    assert path.read_text().splitlines()[0] == "sample_id,pseudo_label,ratio,conflict_flag,epoch"
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape == (12, 5)
    assert np.array_equal(rows[:, 1], table.pseudo_labels)
    assert np.array_equal(rows[:, 3].astype(bool), flags)
    assert np.all(rows[:, 4] == 2)


def test_histogram_export(tmp_path):
    stats = threshold_stats([0.01, 0.52, 0.53, 0.99], [True] * 4)
    path = tmp_path / "hist.csv"
    write_histogram(stats, path)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert rows.shape == (HISTOGRAM_BINS, 3)
    assert rows[:, 2].sum() == 4
