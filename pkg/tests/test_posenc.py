import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weightspace import posenc
from weightspace.errors import ConfigError
from weightspace.posenc import PositionEncodingConfig, encode_batch, encode_position

coord = st.integers(0, 10_000)


def reference(pos, model_dim, base=10000.0):
    """Scalar loop form of the three-block interleaved encoding."""
    block = model_dim // 3
    out = []
    for c in pos:
        for j in range(block // 2):
            w = base ** (-2.0 * j / block)
            out += [np.sin(c * w), np.cos(c * w)]
    return np.array(out)


class TestConfig:
    @pytest.mark.parametrize("dim", [0, 4, 8, 10, -6])
    def test_rejects_non_multiple_of_six(self, dim):
        with pytest.raises(ConfigError):
            PositionEncodingConfig(dim)

    def test_no_trainable_state(self):
        # module exposes only pure functions and a frozen config
        cfg = PositionEncodingConfig(12)
        with pytest.raises(Exception):
            cfg.model_dim = 18
        assert not any(hasattr(v, "parameters") for v in vars(posenc).values())


class TestEncode:
    def test_origin(self):
        v = encode_position((0, 0, 0), PositionEncodingConfig(24))
        assert np.all(v[0::2] == 0) and np.all(v[1::2] == 1)

    @given(coord, coord, coord)
    def test_bounded_and_matches_reference(self, n, l, k):
        cfg = PositionEncodingConfig(18)
        v = encode_position((n, l, k), cfg)
        assert np.abs(v).max() <= 1
        np.testing.assert_allclose(v, reference((n, l, k), 18), atol=1e-12)

    def test_first_block_only(self):
        cfg = PositionEncodingConfig(12)
        a, b = encode_position((1, 0, 0), cfg), encode_position((2, 0, 0), cfg)
        assert not np.allclose(a[:4], b[:4])
        assert np.array_equal(a[4:], b[4:])

    @given(coord, coord, coord, coord)
    def test_coordinate_independence(self, n, l, k, k2):
        cfg = PositionEncodingConfig(12)
        a, b = encode_position((n, l, k), cfg), encode_position((n, l, k2), cfg)
        assert np.array_equal(a[:8], b[:8])

    def test_ten_thousand_distinct(self):
        cfg = PositionEncodingConfig(12)
        pos = np.array(list(itertools.product(range(100), range(10), range(10))))
        enc = encode_batch(pos, cfg)
        assert enc.shape == (10_000, 12)
        min_gap = np.inf
        for s in range(0, len(enc), 500):
            d = np.abs(enc[s : s + 500, None, :] - enc[None, :, :]).max(-1)
            idx = np.arange(s, min(s + 500, len(enc)))
            d[idx - s, idx] = np.inf
            min_gap = min(min_gap, d.min())
        assert min_gap > 1e-9

    def test_deterministic(self):
        cfg = PositionEncodingConfig(30)
        pos = np.random.default_rng(0).integers(0, 500, size=(50, 3))
        assert encode_batch(pos, cfg).tobytes() == encode_batch(pos, cfg).tobytes()


class TestBatch:
    def test_empty(self):
        assert encode_batch([], PositionEncodingConfig(12)).shape == (0, 12)

    def test_single_matches(self):
        cfg = PositionEncodingConfig(12)
        assert np.array_equal(encode_batch([(3, 1, 2)], cfg)[0], encode_position((3, 1, 2), cfg))

    def test_sparse_example_rows_distinct(self):
        enc = encode_batch([(i, 0, i) for i in range(6)], PositionEncodingConfig(12))
        assert len({r.tobytes() for r in enc}) == 6

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            encode_batch([(0, -1, 0)], PositionEncodingConfig(12))
