import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weightspace.checkpoint_store import WeightCheckpoint
from weightspace.errors import ConfigError, EmptyLayer, LayoutMismatch
from weightspace.tokenizer import (
    Scheme,
    TokenSequence,
    detokenize,
    load_tokens,
    padding_fraction,
    save_tokens,
    token_count,
    tokenize,
    tokenize_dense,
    tokenize_sparse,
)

from conftest import make_ckpt

shapes_st = st.lists(st.lists(st.integers(1, 6), min_size=1, max_size=3), min_size=1, max_size=4)


def count_oracle(shapes, d_t, scheme):
    """Walk every element and count chunk boundaries."""
    total = 0
    for shape in shapes:
        size = math.prod(shape)
        rows = shape[0] if scheme == "sparse" and len(shape) > 1 else 1
        row_len = size // rows
        for _ in range(rows):
            j = 0
            while j < row_len:
                total += 1
                j += d_t
    return total


class TestSparse:
    def test_hand_example(self, arange35):
        seq = tokenize_sparse(arange35, 4)
        assert seq.tokens.tolist() == [
            [1, 2, 3, 4], [5, 0, 0, 0], [6, 7, 8, 9],
            [10, 0, 0, 0], [11, 12, 13, 14], [15, 0, 0, 0],
        ]
        assert int((seq.mask == 0).sum()) == 9
        assert seq.positions.tolist() == [[i, 0, i] for i in range(6)]

    def test_exact_fit(self):
        seq = tokenize_sparse(make_ckpt([(2, 4)]), 4)
        assert seq.n == 2 and seq.mask.all()

    def test_bias_is_one_row(self):
        seq = tokenize_sparse(make_ckpt([(5,)]), 4)
        assert seq.n == 2 and int((seq.mask == 0).sum()) == 3

    def test_conv_kernel_rows(self):
        # [c_out, c_in, k] -> c_out rows of c_in*k
        seq = tokenize_sparse(make_ckpt([(3, 2, 3)]), 4)
        assert seq.n == 3 * 2


class TestDense:
    def test_hand_example(self, arange35):
        seq = tokenize_dense(arange35, 4)
        assert seq.tokens.tolist() == [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12], [13, 14, 15, 0]]
        assert int((seq.mask == 0).sum()) == 1

    def test_exact_fit(self):
        seq = tokenize_dense(make_ckpt([(2, 4)]), 8)
        assert seq.n == 1 and seq.mask.all()

    def test_two_layers(self):
        seq = tokenize_dense(make_ckpt([(2, 2), (3,)]), 4)
        assert seq.n == 2
        assert int((seq.mask == 0).sum()) == 1
        assert seq.positions.tolist() == [[0, 0, 0], [1, 1, 0]]


class TestErrors:
    def test_empty_layer(self):
        c = WeightCheckpoint.from_arrays([("w", np.zeros((0, 4), np.float32))])
        for scheme in Scheme:
            with pytest.raises(EmptyLayer):
                tokenize(c, 4, scheme)

    def test_bad_token_size(self, arange35):
        with pytest.raises(ConfigError):
            tokenize_dense(arange35, 0)

    def test_missing_token(self, arange35):
        seq = tokenize_dense(arange35, 4)
        short = TokenSequence(seq.tokens[:-1], seq.mask[:-1], seq.positions[:-1],
                              seq.scheme, seq.layout_id, seq.layout)
        with pytest.raises(LayoutMismatch):
            detokenize(short, arange35.layout)

    def test_wrong_layout(self, arange35):
        seq = tokenize_dense(arange35, 4)
        with pytest.raises(LayoutMismatch):
            detokenize(seq, [("w", (5, 3))])


class TestPadding:
    def test_fractions(self, arange35):
        assert padding_fraction(tokenize_sparse(arange35, 4)) == pytest.approx(0.375)
        assert padding_fraction(tokenize_dense(arange35, 4)) == pytest.approx(0.0625)

    def test_exact_fit_zero(self):
        assert padding_fraction(tokenize_dense(make_ckpt([(4, 4)]), 8)) == 0.0


class TestProperties:
    @given(shapes=shapes_st, d_t=st.integers(1, 64), seed=st.integers(0, 1000))
    def test_round_trip(self, shapes, d_t, seed):
        c = make_ckpt([tuple(s) for s in shapes], seed=seed)
        for scheme in Scheme:
            assert detokenize(tokenize(c, d_t, scheme), c.layout) == c

    @given(shapes=shapes_st, d_t=st.integers(1, 16))
    def test_dominance_and_counts(self, shapes, d_t):
        shapes = [tuple(s) for s in shapes]
        c = make_ckpt(shapes)
        dense, sparse = tokenize_dense(c, d_t), tokenize_sparse(c, d_t)
        assert padding_fraction(dense) <= padding_fraction(sparse) + 1e-12
        assert dense.n == count_oracle(shapes, d_t, "dense") == token_count(c.layout, d_t, "dense")
        assert sparse.n == count_oracle(shapes, d_t, "sparse") == token_count(c.layout, d_t, "sparse")
        # equal counts exactly when every layer's rows divide evenly or it has one row
        even = all(len(s) < 2 or s[0] == 1 or (math.prod(s) // s[0]) % d_t == 0 for s in shapes)
        if even:
            assert dense.n == sparse.n

    @given(shapes=shapes_st, d_t=st.integers(1, 16), scheme=st.sampled_from(list(Scheme)))
    def test_sequence_invariants(self, shapes, d_t, scheme):
        c = make_ckpt([tuple(s) for s in shapes], seed=1)
        seq = tokenize(c, d_t, scheme)
        assert np.all(seq.tokens[seq.mask == 0] == 0)
        assert int(seq.mask.sum()) == c.num_params
        assert seq.positions[:, 0].tolist() == list(range(seq.n))
        lk = [tuple(p) for p in seq.positions[:, 1:]]
        assert lk == sorted(lk) and len(set(lk)) == len(lk)
        for l in np.unique(seq.positions[:, 1]):
            ks = seq.positions[seq.positions[:, 1] == l, 2]
            assert ks.tolist() == list(range(len(ks)))

    @given(shapes=shapes_st, d_t=st.integers(1, 8), scheme=st.sampled_from(list(Scheme)))
    def test_position_bijection(self, shapes, d_t, scheme):
        # every signal element maps to a distinct (layer, offset)
        shapes = [tuple(s) for s in shapes]
        c = WeightCheckpoint.from_arrays(
            [(f"l{i}", np.arange(math.prod(s), dtype=np.float32).reshape(s)) for i, s in enumerate(shapes)]
        )
        seq = tokenize(c, d_t, scheme)
        seen = set()
        for i, j in zip(*np.nonzero(seq.mask)):
            seen.add((int(seq.positions[i, 1]), float(seq.tokens[i, j])))
        assert len(seen) == c.num_params

    def test_pad_values_ignored_by_detokenize(self, arange35):
        seq = tokenize_sparse(arange35, 4)
        dirty = seq.tokens.copy()
        dirty[seq.mask == 0] = 99.0
        dirty_seq = TokenSequence(dirty, seq.mask, seq.positions, seq.scheme, seq.layout_id, seq.layout)
        assert detokenize(dirty_seq, arange35.layout) == arange35


class TestTokenFile:
    @pytest.mark.parametrize("scheme", list(Scheme))
    def test_round_trip(self, tmp_path, ckpt3, scheme):
        seq = tokenize(ckpt3, 5, scheme)
        save_tokens(seq, tmp_path / "t.tok", "m0")
        back, header = load_tokens(tmp_path / "t.tok")
        assert header["model_id"] == "m0" and header["n"] == seq.n
        assert np.array_equal(back.tokens, seq.tokens)
        assert np.array_equal(back.mask, seq.mask)
        assert np.array_equal(back.positions, seq.positions)
        assert detokenize(back, ckpt3.layout) == ckpt3
