"""McIntyre gain statistics for single-carrier (hole) injection.

The distribution of the total number of output carriers ``m`` produced by one
injected hole, for ionization ratio ``k = beta/alpha`` in (0, 1) and mean gain
``M``, is

    P(m) = (1 - 1/k)^(m-1) Gamma(km/(k-1))
           / [(m-1)! (1 + (m-1)/k) Gamma((k+m-1)/(k-1))]
           * ((M+k-1)/(kM))^((k+m-1)/(k-1)) * ((M-1)/M)^(m-1)

Both gamma arguments are negative for ``m >= 2``.  They differ by the integer
``m - 1``, so their ratio is the finite product

    prod_{j=1}^{m-1} (km/(k-1) - j)

of ``m - 1`` negative factors.  Everything is evaluated as a log-magnitude
with an explicit sign: the ``(m-1)`` negative factors of ``(1 - 1/k)^(m-1)``
pair off against the ``(m-1)`` negative factors of the product, leaving every
term positive.  No gamma routine ever sees a negative argument.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gammaln

from .errors import (
    DegenerateDistributionError,
    InvalidParameterError,
    SupportOverflowError,
    TruncationError,
)

ORIGINS = ("analytic", "monte-carlo", "empirical")

# np.convolve is direct summation; above this many multiply-adds use FFT
_DIRECT_CONVOLVE_LIMIT = 4_000_000


@dataclass(frozen=True)
class McIntyreParams:
    """Ionization-coefficient ratio ``k = beta/alpha`` and mean gain ``M``.

    ``k`` must lie strictly inside (0, 1).  The ``k = 1`` limit has no
    closed form here; use ``k = 1 - eps`` with ``eps >= 1e-6`` instead.
    """

    k: float
    M: float

    def __post_init__(self):
        k, M = float(self.k), float(self.M)
        if not (math.isfinite(k) and 0.0 < k < 1.0):
            raise InvalidParameterError(f"k must satisfy 0 < k < 1, got {self.k!r}")
        if not (math.isfinite(M) and M >= 1.0):
            raise InvalidParameterError(f"M must satisfy M >= 1, got {self.M!r}")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "M", M)


@dataclass(frozen=True)
class TruncationPolicy:
    """How far the infinite support of an analytic pmf is represented.

    The support stops at the smallest ``m_max`` whose tail mass is at most
    ``tail_tolerance``; exceeding ``hard_cap`` entries is an error.
    """

    tail_tolerance: float = 1e-9
    hard_cap: int = 10**6

    def __post_init__(self):
        if not 0.0 < self.tail_tolerance < 1.0:
            raise InvalidParameterError(
                f"tail_tolerance must be in (0, 1), got {self.tail_tolerance!r}"
            )
        if int(self.hard_cap) != self.hard_cap or self.hard_cap < 1:
            raise InvalidParameterError(f"hard_cap must be an integer >= 1, got {self.hard_cap!r}")


@dataclass(frozen=True, eq=False)
class GainDistribution:
    """Probability mass over carrier counts ``m = 0, 1, ..., len(pmf) - 1``.

    ``truncation_mass`` is the probability that lies beyond the represented
    support (analytic tail, or censored Monte Carlo trials).
    """

    pmf: np.ndarray
    origin: str = "empirical"
    truncation_mass: float = 0.0
    params: McIntyreParams | None = field(default=None, compare=False)

    def __post_init__(self):
        pmf = np.array(self.pmf, dtype=np.float64)
        if pmf.ndim != 1 or pmf.size == 0:
            raise InvalidParameterError("pmf must be a non-empty 1-D array")
        if self.origin not in ORIGINS:
            raise InvalidParameterError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if np.any(~np.isfinite(pmf)) or np.any(pmf < 0.0) or np.any(pmf > 1.0):
            raise InvalidParameterError("pmf entries must lie in [0, 1]")
        trunc = float(self.truncation_mass)
        if not 0.0 <= trunc <= 1.0:
            raise InvalidParameterError(f"truncation_mass must lie in [0, 1], got {trunc!r}")
        total = math.fsum(pmf) + trunc
        if abs(total - 1.0) > 1e-9:
            raise InvalidParameterError(f"pmf plus truncation mass sums to {total!r}, not 1")
        pmf.setflags(write=False)
        object.__setattr__(self, "pmf", pmf)
        object.__setattr__(self, "truncation_mass", trunc)

    @classmethod
    def point_mass(cls, m, origin="empirical"):
        if int(m) != m or m < 0:
            raise InvalidParameterError(f"point mass location must be a non-negative integer, got {m!r}")
        pmf = np.zeros(int(m) + 1)
        pmf[-1] = 1.0
        return cls(pmf, origin=origin)

    @property
    def support(self):
        return np.arange(self.pmf.size)

    @property
    def m_max(self):
        return self.pmf.size - 1

    def cdf(self):
        return np.cumsum(self.pmf)

    def to_dict(self):
        nz = np.flatnonzero(self.pmf)
        return {
            "kind": self.origin,
            "k": None if self.params is None else self.params.k,
            "M": None if self.params is None else self.params.M,
            "pmf": [[int(m), float(self.pmf[m])] for m in nz],
            "truncation_mass": self.truncation_mass,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data):
        pairs = data["pmf"]
        size = 1 + max((int(m) for m, _ in pairs), default=0)
        pmf = np.zeros(size)
        for m, p in pairs:
            pmf[int(m)] = p
        params = None
        if data.get("k") is not None and data.get("M") is not None:
            params = McIntyreParams(data["k"], data["M"])
        return cls(pmf, origin=data["kind"], truncation_mass=data["truncation_mass"], params=params)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _check_params(params):
    if not isinstance(params, McIntyreParams):
        raise InvalidParameterError("expected McIntyreParams")
    return params.k, params.M


def enf_theory(params):
    """Excess noise factor for hole-initiated multiplication,
    ``F = M/k - (2 - 1/M)(1/k - 1)``."""
    k, M = _check_params(params)
    return M / k - (2.0 - 1.0 / M) * (1.0 / k - 1.0)


def gamma_ratio_product(k, m):
    """``Gamma(km/(k-1)) / Gamma((k+m-1)/(k-1))`` as the explicit finite product.

    Returns ``(log_magnitude, sign)``.  This is the reference route, O(m);
    :func:`gamma_ratio_log` is the vectorized production route.
    """
    if int(m) != m or m < 1:
        raise InvalidParameterError(f"m must be a positive integer, got {m!r}")
    a = k * m / (k - 1.0)
    log_mag = 0.0
    sign = 1
    for j in range(1, int(m)):
        factor = a - j
        if factor < 0.0:
            sign = -sign
        log_mag += math.log(abs(factor))
    return log_mag, sign


_STIRLING_MIN = 30.0


def _stirling_tail(z):
    # asymptotic part of lgamma beyond (z - 1/2) log z - z + log(2 pi)/2
    z2 = z * z
    return (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * z2)) / z2) / z2) / z


def log_rising(x, n):
    """``log Gamma(x + n) - log Gamma(x)`` for ``x > 0``, ``n >= 0``.

    Subtracting two ``gammaln`` values loses absolute accuracy once ``x`` is
    large (both are about ``x log x``).  For ``x >= 30`` the difference is
    taken inside Stirling's series instead; the first omitted term is below
    1e-16 there.
    """
    x, n = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(n, dtype=np.float64))
    out = np.empty(x.shape)
    small = x < _STIRLING_MIN
    out[small] = gammaln(x[small] + n[small]) - gammaln(x[small])
    xb, nb_ = x[~small], n[~small]
    y = xb + nb_
    out[~small] = (
        (xb - 0.5) * np.log1p(nb_ / xb) + nb_ * np.log(y) - nb_
        + (_stirling_tail(y) - _stirling_tail(xb))
    )
    return out if out.ndim else float(out)


def gamma_ratio_log(k, m):
    """Vectorized ``(log_magnitude, sign)`` of the same gamma ratio.

    With ``c = km/(1-k) > 0`` every factor ``km/(k-1) - j = -(j + c)``, so the
    magnitude of the product is the rising factorial ``(1+c)_(m-1)``, i.e.
    ``Gamma(m + c) / Gamma(1 + c)``, evaluated with positive arguments only.
    """
    m = np.asarray(m, dtype=np.float64)
    c = k * m / (1.0 - k)
    log_mag = log_rising(1.0 + c, m - 1.0)
    sign = np.where((m - 1.0) % 2.0 == 0.0, 1.0, -1.0)
    return log_mag, sign


def mcintyre_log_terms(m, k, M):
    """Log-magnitude and sign of the single-carrier pmf at integer ``m >= 1``.

    Requires ``M > 1``; the ``M = 1`` point mass is handled by the caller.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 1.0):
        raise InvalidParameterError("m must be >= 1")
    n = m - 1.0
    inv_k = 1.0 / k
    q = (1.0 - k) / k  # = |1 - 1/k|, without cancellation near k = 1

    # (1 - 1/k)^(m-1): base is negative
    log_power = n * math.log(q)
    sign_power = np.where(n % 2.0 == 0.0, 1.0, -1.0)

    log_ratio, sign_ratio = gamma_ratio_log(k, m)

    # (1 + (m-1)/k) >= 1 for every m >= 1, so it is never singular
    denom = 1.0 + n * inv_k
    assert np.all(denom >= 1.0)
    log_denom = gammaln(m) + np.log(denom)

    # (M+k-1)/(kM) = 1 + q(M-1)/M and (k+m-1)/(k-1) = -denom/q
    log_base = math.log1p(q * (M - 1.0) / M)
    log_expfactor = -(denom / q) * log_base

    log_tail = n * math.log((M - 1.0) / M)

    log_mag = log_power + log_ratio - log_denom + log_expfactor + log_tail
    sign = sign_power * sign_ratio
    return log_mag, sign


def _initial_support(k, M):
    F = M / k - (2.0 - 1.0 / M) * (1.0 / k - 1.0)
    return int(math.ceil(M + 20.0 * M * math.sqrt(max(F - 1.0, 0.0)) + 10.0))


def mcintyre_pmf(params, trunc=None):
    """Single-carrier gain pmf, truncated adaptively.

    The support is grown by doubling until the mass beyond it is negligible
    against ``trunc.tail_tolerance``; tail masses are then accumulated from
    the far end so that the recorded ``truncation_mass`` is computed from the
    formula itself, not as ``1 - sum(pmf)``.
    """
    k, M = _check_params(params)
    trunc = trunc or TruncationPolicy()
    tol = trunc.tail_tolerance
    cap = int(trunc.hard_cap)

    if M == 1.0:
        return GainDistribution(np.array([0.0, 1.0]), origin="analytic", params=params)

    size = min(_initial_support(k, M), cap)
    while True:
        m = np.arange(1, size + 1, dtype=np.float64)
        log_mag, sign = mcintyre_log_terms(m, k, M)
        if np.any(sign < 0.0):
            raise ArithmeticError("negative McIntyre term; sign bookkeeping is broken")
        p = np.exp(log_mag)
        if size >= 2:
            ratio = math.exp(log_mag[-1] - log_mag[-2])
        else:
            ratio = 1.0
        beyond = p[-1] * ratio / (1.0 - ratio) if ratio < 1.0 else math.inf
        if beyond <= 1e-3 * tol or size == cap:
            break
        size = min(2 * size, cap)

    # tails[i] = mass of m > i, for i = 0..size
    tails = np.empty(size + 1)
    tails[:-1] = np.cumsum(p[::-1])[::-1]
    tails[-1] = 0.0
    tails += beyond if math.isfinite(beyond) else math.inf
    ok = np.flatnonzero(tails[1:] <= tol)
    if ok.size == 0:
        raise TruncationError(
            f"tail mass above {tol:g} beyond hard cap of {cap} carriers (k={k}, M={M})"
        )
    m_max = int(ok[0]) + 1
    pmf = np.empty(m_max + 1)
    pmf[0] = 0.0
    pmf[1:] = p[:m_max]
    return GainDistribution(pmf, origin="analytic", truncation_mass=float(tails[m_max]), params=params)


def mcintyre_head(params, m_limit):
    """Single-carrier pmf on ``m = 0..m_limit`` with everything above as truncation mass.

    Unlike :func:`mcintyre_pmf` this never grows the support, so its cost is
    bounded even for very heavy tails.  Useful when only the low-m part of
    the distribution is observed.
    """
    k, M = _check_params(params)
    if int(m_limit) != m_limit or m_limit < 1:
        raise InvalidParameterError(f"m_limit must be an integer >= 1, got {m_limit!r}")
    m_limit = int(m_limit)
    if M == 1.0:
        return GainDistribution(np.array([0.0, 1.0]), origin="analytic", params=params)
    log_mag, sign = mcintyre_log_terms(np.arange(1, m_limit + 1, dtype=np.float64), k, M)
    if np.any(sign < 0.0):
        raise ArithmeticError("negative McIntyre term; sign bookkeeping is broken")
    pmf = np.concatenate(([0.0], np.exp(log_mag)))
    rest = max(0.0, 1.0 - math.fsum(pmf))
    return GainDistribution(pmf, origin="analytic", truncation_mass=rest, params=params)


def moments(dist):
    """Mean and variance over the represented support.

    Probability in ``dist.truncation_mass`` is not included, so both values
    are biased low by at most the tail's contribution.
    """
    m = dist.support.astype(np.float64)
    p = dist.pmf
    mean = math.fsum(m * p)
    var = math.fsum((m - mean) ** 2 * p)
    return mean, var


def enf_empirical(dist):
    """``E[G^2] / E[G]^2`` over the represented support."""
    m = dist.support.astype(np.float64)
    mean = math.fsum(m * dist.pmf)
    if mean <= 0.0:
        raise DegenerateDistributionError("excess noise factor undefined for zero mean gain")
    second = math.fsum(m * m * dist.pmf)
    return second / mean**2


def _convolve(a, b):
    if a.size * b.size <= _DIRECT_CONVOLVE_LIMIT:
        return np.convolve(a, b)
    out = fftconvolve(a, b)
    np.clip(out, 0.0, None, out=out)
    return out


def convolve_n(dist, n, hard_cap=10**6):
    """Distribution of the sum of ``n`` independent draws from ``dist``."""
    if int(n) != n or n < 0:
        raise InvalidParameterError(f"n must be a non-negative integer, got {n!r}")
    n = int(n)
    if n == 0:
        return GainDistribution(np.array([1.0]), origin=dist.origin)
    if n * dist.m_max + 1 > hard_cap:
        raise SupportOverflowError(
            f"{n}-fold convolution needs {n * dist.m_max + 1} entries, cap is {hard_cap}"
        )
    base = np.asarray(dist.pmf)
    out = base.copy()
    for _ in range(n - 1):
        out = _convolve(out, base)
    # mass lost is the chance that at least one draw fell beyond the support
    lost = -math.expm1(n * math.log1p(-dist.truncation_mass)) if dist.truncation_mass < 1 else 1.0
    out = np.clip(out, 0.0, 1.0)
    return GainDistribution(out, origin=dist.origin, truncation_mass=lost)


def poisson_weight(n_bar, n):
    """Probability of exactly ``n`` primaries for Poisson mean ``n_bar``."""
    if not (math.isfinite(n_bar) and n_bar >= 0.0):
        raise InvalidParameterError(f"n_bar must be >= 0, got {n_bar!r}")
    if int(n) != n or n < 0:
        raise InvalidParameterError(f"n must be a non-negative integer, got {n!r}")
    if n_bar == 0.0:
        return 1.0 if n == 0 else 0.0
    return math.exp(n * math.log(n_bar) - n_bar - math.lgamma(n + 1))


def poisson_weights(n_bar, n_max):
    """``[poisson_weight(n_bar, n) for n in 0..n_max]`` as an array."""
    return np.array([poisson_weight(n_bar, n) for n in range(int(n_max) + 1)])
