import json
import math
from collections import Counter

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from core.model import mean_taxicab_distances
from shared.errors import ConfigError, DataError
from synth.generators import (
    gen_bacon,
    gen_response,
    gen_threshold_normal,
    generate_dataset,
    log_stirling_table,
    uniform_partition_fixed_blocks,
)


def test_uncontaminated_columns_equal_their_latent_vectors():
    matrix, truth = gen_bacon(n=40, p=30, r0=1.0, seed=5)
    latent = np.asarray(truth.latent)
    labels = np.asarray(truth.labels)
    assert latent.shape == (40, truth.q0)
    np.testing.assert_array_equal(matrix.bits, latent[:, labels])
    assert len(labels) == matrix.p == 30 - len(truth.dropped_columns)
    np.testing.assert_allclose(truth.q_matrix, np.eye(2))


def test_bacon_generator_is_reproducible():
    first, truth_a = gen_bacon(n=30, p=40, seed=9)
    second, truth_b = gen_bacon(n=30, p=40, seed=9)
    np.testing.assert_array_equal(first.bits, second.bits)
    assert truth_a == truth_b
    third, _ = gen_bacon(n=30, p=40, seed=10)
    assert not np.array_equal(first.bits, third.bits) or first.p != third.p


def test_bacon_generator_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        gen_bacon(r0=0.4)
    with pytest.raises(ConfigError):
        gen_bacon(d0=1.0)


def test_bacon_cell_rates_follow_channel():
    matrix, truth = gen_bacon(n=400, p=120, r0=0.875, seed=2)
    latent = np.asarray(truth.latent)[:, truth.labels]
    q = np.asarray(truth.q_matrix)
    for s in (0, 1):
        cells = matrix.bits[latent == s]
        se = math.sqrt(q[s, 1] * (1 - q[s, 1]) / cells.size)
        # dropped constant columns bias the rate slightly, so allow a wider band
        assert abs(cells.mean() - q[s, 1]) < 4 * se + 0.01


def test_stirling_numbers():
    table = np.exp(log_stirling_table(6, 3))
    assert table[5, 2] == pytest.approx(15)
    assert table[6, 3] == pytest.approx(90)
    assert table[4, 4] == pytest.approx(1)


def test_fixed_block_partitions_are_uniform(rng):
    draws = Counter(tuple(uniform_partition_fixed_blocks(6, 3, rng)) for _ in range(18000))
    assert len(draws) == 90
    assert all(max(labels) == 2 for labels in draws)
    _, pvalue = stats.chisquare(list(draws.values()))
    assert pvalue > 1e-4
    with pytest.raises(ConfigError):
        uniform_partition_fixed_blocks(3, 4, rng)


def test_threshold_columns_are_fair_coins():
    matrix, truth = gen_threshold_normal(n=2000, p=40, phi0=0.9, seed=4)
    assert np.all(np.abs(matrix.bits.mean(axis=0) - 0.5) < 0.06)
    assert 1 <= truth.q0 < 40 // 4
    assert truth.phi0 == 0.9


def test_strong_correlation_makes_cluster_columns_agree():
    matrix, truth = gen_threshold_normal(n=500, p=40, phi0=0.999, seed=6)
    labels = np.asarray(truth.labels)
    dist = mean_taxicab_distances(matrix.bits)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(labels.size, dtype=bool)
    assert dist[same & off_diag].max() < 0.05
    if truth.q0 > 1:
        assert dist[~same].min() > 0.3
    with pytest.raises(ConfigError):
        gen_threshold_normal(phi0=1.0)


def test_response_predictors_and_split():
    matrix, _ = gen_threshold_normal(n=200, p=80, phi0=0.2, seed=1)
    data, truth = gen_response(matrix, size_s=5, beta_star=0.85, seed=3)
    dist = mean_taxicab_distances(matrix.bits)
    s = truth.predictors
    assert len(s) == 5
    assert all(0.4 < dist[a, b] < 0.6 for a in s for b in s if a < b)
    assert len(data.train_idx) == 160 and len(data.test_idx) == 40
    assert not set(data.train_idx) & set(data.test_idx)


def test_response_mean_tracks_predictor_count():
    matrix, _ = gen_threshold_normal(n=400, p=60, phi0=0.2, seed=8)
    data, truth = gen_response(matrix, size_s=3, beta_star=1.2, sigma0=0.5, seed=2, train_fraction=1.0)
    y = np.asarray(data.y_train)
    signal = matrix.bits[np.asarray(data.train_idx)][:, truth.predictors].sum(axis=1)
    resid = y - 0.6 - 1.2 * signal
    assert abs(resid.mean()) < 4 * 0.5 / math.sqrt(y.size)


def test_null_response_has_no_signal():
    matrix, _ = gen_threshold_normal(n=300, p=60, phi0=0.2, seed=8)
    data, _ = gen_response(matrix, size_s=2, beta_star=0.0, sigma0=0.5, seed=1)
    y = np.asarray(data.y_train)
    assert abs(y.mean()) < 4 * 0.5 / math.sqrt(y.size)
    assert y.std() == pytest.approx(0.5, rel=0.15)


def test_infeasible_window_is_reported():
    matrix, _ = gen_threshold_normal(n=50, p=40, phi0=0.5, seed=1)
    with pytest.raises(DataError, match="taxicab"):
        gen_response(matrix, size_s=2, window=(0.0, 1e-6), seed=1)


def test_generate_dataset_writes_files(tmp_path):
    params = {"n": 60, "p": 40, "size_s": 3, "window": [0.2, 0.8]}
    paths = generate_dataset("response", params, seed=3, out_dir=tmp_path / "sim")
    assert set(paths) == {"design", "truth", "responses"}
    design = pd.read_csv(paths["design"])
    assert design.columns[0] == "subject_id"
    truth = json.loads(paths["truth"].read_text())
    assert truth["generator"] == "bacon" and len(truth["predictors"]) == 3
    responses = pd.read_csv(paths["responses"])
    assert set(responses["split"]) == {"train", "test"}
    assert len(responses) == 60


def test_generate_dataset_rejects_bad_requests(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset("mystery", {}, seed=0, out_dir=tmp_path)
    with pytest.raises(ConfigError):
        generate_dataset("bacon", {"n": 20, "p": 10, "beta_star": 1.0}, seed=0, out_dir=tmp_path)
