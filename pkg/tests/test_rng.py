import numpy as np
import pytest

from xsyscomb.rng import LANES, MASK64, Stream, derive_seed, fnv1a64, splitmix64


def _xoshiro_reference(state, n):
    """Scalar xoshiro256** as published by its authors."""
    s = list(state)
    rotl = lambda x, k: ((x << k) | (x >> (64 - k))) & MASK64
    out = []
    for _ in range(n):
        out.append((rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64)
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def _splitmix_outputs(key, n):
    x, out = key, []
    for _ in range(n):
        x, z = splitmix64(x)
        out.append(z)
    return out


def test_published_constants():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C


@pytest.mark.parametrize("lane", [0, 5, LANES - 1])
def test_lanes_match_scalar_xoshiro(lane):
    key = derive_seed(42, "unit")
    seeds = _splitmix_outputs(key, 4 * (lane + 1))
    expected = _xoshiro_reference(seeds[4 * lane : 4 * lane + 4], 3)
    draws = Stream(42, "unit").next_u64(3 * LANES)
    assert [int(draws[lane + k * LANES]) for k in range(3)] == expected


def test_chunking_does_not_change_the_sequence():
    a = Stream(9, "x").next_u64(3000)
    s = Stream(9, "x")
    b = np.concatenate([s.next_u64(7), s.next_u64(1500), s.next_u64(1493)])
    assert np.array_equal(a, b)


def test_children_are_independent_and_stable():
    root = Stream(5)
    a, b = root.child("a").uniform((100,)), root.child("b").uniform((100,))
    assert not np.array_equal(a, b)
    assert np.array_equal(a, Stream(5, "a").uniform((100,)))
    assert root.child("a").child("c").name == "a/c"


def test_distribution_sanity():
    s = Stream(1, "moments")
    z = s.normal((200_000,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01
    u = s.uniform((100_000,), 2.0, 3.0)
    assert u.min() >= 2.0 and u.max() < 3.0
    k = s.integers(3, 7, (10_000,))
    assert set(np.unique(k)) == {3, 4, 5, 6}
    assert sorted(s.permutation(50)) == list(range(50))
    m = s.keep_mask(0.25, (100_000,))
    assert abs(m.mean() - 0.25) < 0.01


def test_empty_integer_range_rejected():
    with pytest.raises(ValueError):
        Stream(0).integers(3, 3)
