import numpy as np
import pytest

from htqe import autodiff as ad
from htqe.embeddings import (PAD, UNK, EmbeddingFormatError, load_embeddings, lookup,
                             random_embeddings, save_embeddings)


def write(tmp_path, text, name="vec.txt"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_two_tokens_plus_reserved(tmp_path):
    table = load_embeddings(write(tmp_path, "cat 0.1 0.2 0.3\n猫 -1 0 1.5\n"), 3)
    assert len(table) == 4
    assert table.vocab[UNK] != table.vocab[PAD]
    np.testing.assert_array_equal(lookup(table, ["cat"]).data, [[0.1, 0.2, 0.3]])
    np.testing.assert_array_equal(lookup(table, ["猫"]).data, [[-1.0, 0.0, 1.5]])
    np.testing.assert_array_equal(table.matrix.data[table.pad_index], np.zeros(3))


def test_header_line_is_skipped(tmp_path):
    table = load_embeddings(write(tmp_path, "2 3\na 1 2 3\nb 4 5 6\n"), 3)
    assert len(table) == 4 and "2" not in table.vocab


def test_short_line_names_line_number(tmp_path):
    with pytest.raises(EmbeddingFormatError, match=r":2:"):
        load_embeddings(write(tmp_path, "a 1 2 3\nb 4 5\n"), 3)


def test_duplicates_keep_first(tmp_path):
    table = load_embeddings(write(tmp_path, "a 1 1\na 2 2\nb 3 3\n"), 2)
    assert table.duplicates == 1
    np.testing.assert_array_equal(lookup(table, ["a"]).data, [[1, 1]])


def test_unknown_tokens_use_unk_row(tmp_path):
    table = load_embeddings(write(tmp_path, "a 1 1\n"), 2, seed=4)
    unk = table.matrix.data[table.unk_index]
    assert np.all(np.abs(unk) <= 0.05)
    np.testing.assert_array_equal(lookup(table, ["never-seen"]).data[0], unk)
    again = load_embeddings(write(tmp_path, "a 1 1\n"), 2, seed=4)
    np.testing.assert_array_equal(again.matrix.data[again.unk_index], unk)


def test_lowercase_flag(tmp_path):
    table = load_embeddings(write(tmp_path, "cat 1 1\n"), 2, lowercase=True)
    np.testing.assert_array_equal(lookup(table, ["CAT"]).data, [[1, 1]])
    cased = load_embeddings(write(tmp_path, "cat 1 1\n"), 2)
    assert cased.index("CAT") == cased.unk_index


def test_lookup_gradient_lands_on_used_rows_only():
    table = random_embeddings(["x", "y", "z"], 2, seed=0)
    base = table.matrix.data.copy()
    w = np.array([[0.3, -1.2], [2.0, 0.5]])

    def value(matrix):
        return float((matrix[[0, 2]] * w).sum())

    ad.sum(lookup(table, ["x", "z"]) * ad.constant(w)).backward()
    numeric = np.zeros_like(base)
    eps = 1e-6
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            up, down = base.copy(), base.copy()
            up[i, j] += eps
            down[i, j] -= eps
            numeric[i, j] = (value(up) - value(down)) / (2 * eps)
    np.testing.assert_allclose(table.matrix.grad, numeric, atol=1e-9)
    assert np.all(table.matrix.grad[1] == 0)
    assert np.all(table.matrix.grad[table.pad_index] == 0)


def test_lookup_is_total_and_deterministic():
    table = random_embeddings(["a"], 3, seed=1)
    first = lookup(table, ["a", "??", ""]).data
    np.testing.assert_array_equal(first, lookup(table, ["a", "??", ""]).data)
    with pytest.raises(ValueError):
        lookup(table, [])


def test_save_load_round_trip(tmp_path):
    table = random_embeddings(["a", "b", "猫"], 4, seed=2)
    path = tmp_path / "out.txt"
    save_embeddings(table, path)
    again = load_embeddings(path, 4)
    for tok in ("a", "b", "猫"):
        np.testing.assert_array_equal(lookup(again, [tok]).data, lookup(table, [tok]).data)
