import numpy as np
import pytest

from apdgain import rng
from apdgain.errors import InvalidParameterError


def numpy_block(seed, tag, index, block):
    # numpy's Philox increments the counter before each block
    key = np.array([seed, tag], dtype=np.uint64)
    bg = np.random.Philox(counter=np.array([block - 1, index, 0, 0], dtype=np.uint64), key=key)
    return bg.random_raw(4)


@pytest.mark.parametrize("seed,tag,index", [(0, 0, 0), (123, 456, 7), (2**63 + 5, rng.STREAM_AVALANCHE, 99)])
def test_philox_matches_numpy(seed, tag, index):
    ours = rng.raw_stream(seed, tag, index, 12)
    # blocks 1 and 2 avoid the wrapped counter used for block 0
    ref = np.concatenate([numpy_block(seed, tag, index, b) for b in (1, 2)])
    assert np.array_equal(ours[4:12], ref)


def test_first_block_is_counter_zero():
    ours = rng.raw_stream(11, 22, 33, 4)
    direct = rng.philox4x64(np.uint64(0), np.uint64(33), np.uint64(0), np.uint64(0),
                            np.uint64(11), np.uint64(22))
    assert np.array_equal(ours, np.array(direct, dtype=np.uint64))


def test_streams_are_independent_of_each_other():
    a = rng.uniform_stream(5, rng.STREAM_PULSES, 0, 1000)
    b = rng.uniform_stream(5, rng.STREAM_PULSES, 1, 1000)
    c = rng.uniform_stream(5, rng.STREAM_AVALANCHE, 0, 1000)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1


def test_uniforms_are_in_half_open_interval():
    u = rng.uniform_stream(1, 2, 3, 200_000)
    assert u.min() > 0.0 and u.max() <= 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_stream_is_reproducible():
    assert np.array_equal(rng.raw_stream(9, 9, 9, 50), rng.raw_stream(9, 9, 9, 50))


def test_seed_validation():
    assert rng.as_seed(2**64 - 1) == np.uint64(2**64 - 1)
    with pytest.raises(InvalidParameterError):
        rng.as_seed(-1)
    with pytest.raises(InvalidParameterError):
        rng.as_seed(2**64)
