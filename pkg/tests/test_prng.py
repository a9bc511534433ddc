import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixup_merge.prng import (
    GOLDEN,
    MASK64,
    CounterStream,
    mix64,
    mix64_array,
    mix_seed,
    name_seed,
    uniform_array,
)


def test_stream_matches_splitmix64_reference():
    # first outputs of SplitMix64 seeded with 0
    s = CounterStream(0)
    assert s.next_u64() == 0xE220A8397B1DCDAF
    assert s.next_u64() == 0x6E789E6AA1B965F4
    assert mix64(GOLDEN) == 0xE220A8397B1DCDAF


@given(st.lists(st.integers(min_value=0, max_value=MASK64), min_size=1, max_size=50))
def test_vectorised_mix_matches_scalar(keys: list[int]):
    out = mix64_array(np.array(keys, dtype=np.uint64))
    assert [int(v) for v in out] == [mix64(k) for k in keys]


def test_uniform_array_matches_stream():
    key = mix_seed(42, 3)
    s = CounterStream(key)
    expected = [s.uniform() for _ in range(20)]
    assert uniform_array(key, 20).tolist() == expected
    assert uniform_array(key, 5, start=15).tolist() == expected[15:]


def test_uniform_ranges():
    s = CounterStream(7)
    u = uniform_array(7, 10_000)
    assert u.min() >= 0.0
    assert u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    assert all(0.0 < s.open_uniform() < 1.0 for _ in range(1000))


def test_normal_moments():
    s = CounterStream(mix_seed(1, 0))
    x = np.array([s.normal() for _ in range(20_000)])
    assert abs(x.mean()) < 0.03
    assert abs(x.var() - 1.0) < 0.05


def test_seed_derivation():
    assert mix_seed(5, 0) == mix_seed(5, 0)
    assert len({mix_seed(5, i) for i in range(1000)}) == 1000
    assert name_seed(5, "layer.weight") == name_seed(5, "layer.weight")
    assert name_seed(5, "layer.weight") != name_seed(5, "layer.bias")
    assert name_seed(5, "layer.weight") != name_seed(6, "layer.weight")


@pytest.mark.parametrize("key", [-1, MASK64 + 1])
def test_stream_key_range(key: int):
    with pytest.raises(ValueError, match="64-bit"):
        CounterStream(key)
