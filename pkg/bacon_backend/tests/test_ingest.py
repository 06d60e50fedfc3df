import numpy as np
import pandas as pd
import pytest

from data.ingest import (
    export_matrix,
    ingest,
    load_bundle,
    make_response_data,
    read_adjacency_packed,
    read_responses,
    write_adjacency_packed,
    write_responses,
)
from shared.errors import DataError
from shared.models import BinaryDesignMatrix


def symmetric(upper_bits, size):
    mat = np.zeros((size, size), dtype=np.int64)
    rows, cols = np.triu_indices(size, k=1)
    mat[rows, cols] = upper_bits
    return mat + mat.T


def write_text_subject(directory, name, mat):
    np.savetxt(directory / f"{name}.txt", mat, fmt="%d")


def test_csv_round_trip(tmp_path, block_matrix):
    path = tmp_path / "design.csv"
    export_matrix(block_matrix, path)
    result = ingest(path)
    np.testing.assert_array_equal(result.matrix.bits, block_matrix.bits)
    assert result.matrix.column_ids == block_matrix.column_ids
    assert result.matrix.subject_ids == block_matrix.subject_ids
    assert result.removed == []


def test_constant_columns_are_dropped(tmp_path):
    frame = pd.DataFrame({"subject_id": ["a", "b", "c"], "x1": [0, 1, 1], "x2": [1, 1, 1], "x3": [0, 0, 0]})
    frame.to_csv(tmp_path / "m.csv", index=False)
    result = ingest(tmp_path / "m.csv")
    assert result.matrix.column_ids == ["x1"]
    assert result.removed == ["x2", "x3"]
    assert result.raw_columns == 3


def test_non_binary_csv_is_rejected(tmp_path):
    pd.DataFrame({"x1": [0, 2], "x2": [1, 0]}).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(DataError):
        ingest(tmp_path / "bad.csv")
    with pytest.raises(DataError):
        ingest(tmp_path / "missing.csv")


def test_two_regions_single_varying_edge(tmp_path):
    write_text_subject(tmp_path, "s1", symmetric([1], 2))
    write_text_subject(tmp_path, "s2", symmetric([0], 2))
    result = ingest(tmp_path, regions=["left", "right"])
    assert result.matrix.p == 1
    assert result.matrix.column_ids == ["right--left"]
    assert result.column_map.loc[0, "region_a"] == "right"


def test_lower_triangle_vectorization_order(tmp_path):
    gen = np.random.default_rng(4)
    mats = [symmetric(gen.integers(0, 2, 6), 4) for _ in range(30)]
    for i, mat in enumerate(mats):
        write_text_subject(tmp_path, f"s{i:02d}", mat)
    result = ingest(tmp_path)
    rows, cols = np.tril_indices(4, k=-1)
    expected_ids = [f"R{a + 1}--R{b + 1}" for a, b in zip(rows, cols)]
    kept = result.column_map["raw_index"].to_numpy()
    assert result.matrix.column_ids == [expected_ids[j] for j in kept]
    np.testing.assert_array_equal(result.matrix.bits[0], mats[0][rows, cols][kept])
    # column map is a bijection onto the retained columns
    assert result.column_map["column_id"].is_unique
    assert len(result.column_map) == result.matrix.p


def test_asymmetric_matrix_is_rejected(tmp_path):
    mat = symmetric([1, 0, 1], 3)
    mat[0, 1] = 0
    write_text_subject(tmp_path, "s1", mat)
    write_text_subject(tmp_path, "s2", symmetric([0, 1, 1], 3))
    with pytest.raises(DataError, match="symmetric"):
        load_bundle(tmp_path)


def test_packed_adjacency_round_trip(tmp_path):
    mat = symmetric([1, 0, 1, 1, 0, 1], 4)
    write_adjacency_packed(tmp_path / "a.bin", mat, "subject-7")
    sid, back = read_adjacency_packed(tmp_path / "a.bin")
    assert sid == "subject-7"
    np.testing.assert_array_equal(back, mat)
    write_adjacency_packed(tmp_path / "b.bin", symmetric([0, 1, 1, 0, 0, 1], 4), "subject-8")
    bundle = load_bundle(tmp_path)
    assert bundle.subject_ids == ["subject-7", "subject-8"]


def test_response_split_from_file(tmp_path, block_matrix):
    responses = pd.DataFrame({
        "subject_id": block_matrix.subject_ids,
        "y": np.arange(block_matrix.n, dtype=float),
        "split": ["train"] * 9 + ["test"] * 3,
    })
    data = make_response_data(block_matrix, responses, np.random.default_rng(0))
    assert data.train_idx == list(range(9))
    assert data.test_idx == [9, 10, 11]
    assert data.y_test == [9.0, 10.0, 11.0]

    path = tmp_path / "responses.csv"
    write_responses(path, block_matrix, data)
    again = make_response_data(block_matrix, read_responses(path), np.random.default_rng(1))
    assert again == data


def test_random_split_and_unknown_subjects(block_matrix):
    responses = pd.DataFrame({"subject_id": block_matrix.subject_ids, "y": np.linspace(0, 1, block_matrix.n)})
    data = make_response_data(block_matrix, responses, np.random.default_rng(3))
    assert len(data.train_idx) == 10 and len(data.test_idx) == 2
    stray = pd.DataFrame({"subject_id": ["nobody"], "y": [1.0]})
    with pytest.raises(DataError):
        make_response_data(block_matrix, stray, np.random.default_rng(0))


def test_missing_response_columns(tmp_path):
    pd.DataFrame({"subject_id": ["a"], "score": [1.0]}).to_csv(tmp_path / "r.csv", index=False)
    with pytest.raises(DataError):
        read_responses(tmp_path / "r.csv")


def test_design_matrix_validation():
    with pytest.raises(ValueError):
        BinaryDesignMatrix(bits=np.array([[0, 1], [0, 1]]), column_ids=["a", "b"], subject_ids=["s1", "s2"])
