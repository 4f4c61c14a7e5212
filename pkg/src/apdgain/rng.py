"""Counter-based random streams for reproducible parallel simulation.

Each simulated unit of work (an avalanche trial, a detector pulse) owns an
independent stream addressed by ``(seed, stream tag, index)``.  Draws come
from the Philox4x64-10 block cipher applied to the counter
``(block, index, 0, 0)`` under the key ``(seed, stream tag)``, so the numbers a
unit sees do not depend on which worker runs it or in what order.

The kernel is bit-compatible with :class:`numpy.random.Philox`; the test
suite uses numpy as the reference implementation.
"""

import numba as nb
import numpy as np

from .errors import InvalidParameterError

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO_M53 = 1.0 / 9007199254740992.0

# stream tags keep different consumers of one seed apart
STREAM_AVALANCHE = 0xA7A1
STREAM_PULSES = 0x9B15

# layout of the per-stream state vector
_KEY0, _KEY1, _INDEX, _BLOCK, _BUF, _POS = 0, 1, 2, 3, 4, 8
STATE_SIZE = 9


@nb.njit(inline="always", cache=True)
def _mulhilo(a, b):
    lo = a * b
    a_lo = a & _MASK32
    a_hi = a >> _SHIFT32
    b_lo = b & _MASK32
    b_hi = b >> _SHIFT32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    mid = (ll >> _SHIFT32) + (lh & _MASK32) + (hl & _MASK32)
    hi = a_hi * b_hi + (lh >> _SHIFT32) + (hl >> _SHIFT32) + (mid >> _SHIFT32)
    return hi, lo


@nb.njit(cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64 with 10 rounds; all arguments are ``np.uint64``."""
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 += _W0
        k1 += _W1
    return c0, c1, c2, c3


@nb.njit(cache=True)
def stream_init(state, seed, tag, index):
    state[_KEY0] = np.uint64(seed)
    state[_KEY1] = np.uint64(tag)
    state[_INDEX] = np.uint64(index)
    state[_BLOCK] = np.uint64(0)
    state[_POS] = np.uint64(4)


@nb.njit(cache=True)
def next_u64(state):
    pos = state[_POS]
    if pos >= 4:
        r0, r1, r2, r3 = philox4x64(
            state[_BLOCK], state[_INDEX], np.uint64(0), np.uint64(0),
            state[_KEY0], state[_KEY1],
        )
        state[_BUF] = r0
        state[_BUF + 1] = r1
        state[_BUF + 2] = r2
        state[_BUF + 3] = r3
        state[_BLOCK] += _ONE
        pos = np.uint64(0)
    out = state[_BUF + np.int64(pos)]
    state[_POS] = pos + _ONE
    return out


@nb.njit(cache=True)
def next_uniform(state):
    """Uniform double on (0, 1]; never returns 0 so ``log`` is always finite."""
    return np.float64((next_u64(state) >> _SHIFT11) + _ONE) * _TWO_M53


@nb.njit(cache=True)
def next_normal(state):
    u1 = next_uniform(state)
    u2 = next_uniform(state)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@nb.njit(cache=True)
def next_poisson(state, lam):
    """Poisson variate by sequential inversion; intended for small means."""
    if lam <= 0.0:
        return 0
    u = next_uniform(state)
    p = np.exp(-lam)
    cdf = p
    n = 0
    # the cap only matters if round-off leaves cdf a hair below u
    while u > cdf and n < 100000:
        n += 1
        p *= lam / n
        if p == 0.0:
            break
        cdf += p
    return n


@nb.njit(cache=True)
def _fill_uniforms(seed, tag, index, out):
    state = np.empty(STATE_SIZE, dtype=np.uint64)
    stream_init(state, seed, tag, index)
    for i in range(out.shape[0]):
        out[i] = next_uniform(state)


@nb.njit(cache=True)
def _fill_raw(seed, tag, index, out):
    state = np.empty(STATE_SIZE, dtype=np.uint64)
    stream_init(state, seed, tag, index)
    for i in range(out.shape[0]):
        out[i] = next_u64(state)


def raw_stream(seed, tag, index, n):
    """First ``n`` raw 64-bit words of the stream ``(seed, tag, index)``."""
    out = np.empty(n, dtype=np.uint64)
    _fill_raw(np.uint64(seed), np.uint64(tag), np.uint64(index), out)
    return out


def uniform_stream(seed, tag, index, n):
    """First ``n`` uniforms on (0, 1] of the stream ``(seed, tag, index)``."""
    out = np.empty(n, dtype=np.float64)
    _fill_uniforms(np.uint64(seed), np.uint64(tag), np.uint64(index), out)
    return out


def as_seed(seed):
    """Validate a user seed and return it as an unsigned 64-bit integer."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise InvalidParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.uint64(seed)
