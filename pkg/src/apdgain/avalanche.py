"""Monte Carlo avalanche multiplication with constant ionization coefficients.

One hole enters a multiplication region of unit length at ``x = 0`` and
drifts towards ``x = 1``; electrons drift the other way.  Free paths are
exponential with rate ``beta_L`` for holes and ``alpha_L = beta_L / k`` for
electrons.  Every ionization creates one electron-hole pair, so the number of
output carriers of a trial is ``m = 1 + (number of ionizations)``.

This model is independent of the closed-form McIntyre distribution and is
used to check it.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math

import numba as nb
import numpy as np
from scipy.optimize import brentq

from . import rng
from .errors import (
    CensoringError,
    DivergenceError,
    InvalidParameterError,
    NoSolutionError,
)
from .gainstats import GainDistribution, McIntyreParams

_HOLE = 0
_ELECTRON = 1


@dataclass(frozen=True)
class AvalancheConfig:
    k: float
    beta_L: float
    event_cap: int = 10**7
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.k) and 0.0 < self.k < 1.0):
            raise InvalidParameterError(f"k must satisfy 0 < k < 1, got {self.k!r}")
        if not (math.isfinite(self.beta_L) and self.beta_L >= 0.0):
            raise InvalidParameterError(f"beta_L must be >= 0, got {self.beta_L!r}")
        if int(self.event_cap) != self.event_cap or self.event_cap < 1:
            raise InvalidParameterError(f"event_cap must be an integer >= 1, got {self.event_cap!r}")
        rng.as_seed(self.seed)

    @classmethod
    def for_gain(cls, k, M, seed=0, event_cap=10**7):
        """Configuration whose mean gain is ``M``."""
        return cls(k=k, beta_L=solve_beta_L(k, M), event_cap=event_cap, seed=seed)


@dataclass(frozen=True)
class TrialOutcome:
    m: int
    censored: bool = False


@dataclass(frozen=True, eq=False)
class MonteCarloRun:
    """Empirical gain distribution plus the bookkeeping of the run that made it."""

    distribution: GainDistribution
    config: AvalancheConfig
    trials: int
    censored: int
    outcomes: np.ndarray  # per-trial m, -1 where censored

    def manifest(self):
        return {
            "seed": int(self.config.seed),
            "trials": int(self.trials),
            "censored": int(self.censored),
            "k": self.config.k,
            "beta_L": self.config.beta_L,
            "event_cap": int(self.config.event_cap),
        }


def breakdown_beta_L(k):
    """Hole path integral ``beta*L`` at which the mean gain diverges."""
    _check_k(k)
    return k * math.log(1.0 / k) / (1.0 - k)


def mean_gain_from_coefficients(k, beta_L):
    """Mean gain for hole injection into a uniform field.

    Solving the coupled steady-state current equations with constant
    ``alpha = beta/k`` gives

        M = (1 - k) / (1 - k * exp(beta_L * (1 - k) / k))

    which diverges at :func:`breakdown_beta_L`.
    """
    _check_k(k)
    if not (math.isfinite(beta_L) and beta_L >= 0.0):
        raise InvalidParameterError(f"beta_L must be >= 0, got {beta_L!r}")
    denom = -math.expm1(math.log(k) + beta_L * (1.0 - k) / k)
    if denom <= 0.0:
        raise DivergenceError(
            f"beta_L={beta_L} is at or beyond breakdown ({breakdown_beta_L(k)}) for k={k}"
        )
    return (1.0 - k) / denom


def solve_beta_L(k, M_target):
    """Invert :func:`mean_gain_from_coefficients` by bracketed root finding.

    The root is polished until ``|M(beta_L) - M_target| <= 1e-10 * M_target``.
    """
    _check_k(k)
    if not (math.isfinite(M_target) and M_target >= 1.0):
        raise NoSolutionError(f"mean gain {M_target!r} is not reachable (need M >= 1)")
    if M_target == 1.0:
        return 0.0
    hi = breakdown_beta_L(k)
    # walk towards breakdown until the gain brackets the target
    upper = 0.5 * hi
    while mean_gain_from_coefficients(k, upper) < M_target:
        nxt = hi - 0.5 * (hi - upper)
        if nxt <= upper:
            raise NoSolutionError(f"mean gain {M_target} not reachable below breakdown for k={k}")
        upper = nxt
    root = brentq(
        lambda x: mean_gain_from_coefficients(k, x) - M_target,
        0.0, upper, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500,
    )
    if abs(mean_gain_from_coefficients(k, root) - M_target) > 1e-10 * M_target:
        raise NoSolutionError(f"could not resolve beta_L for M={M_target} at k={k}")
    return root


def _check_k(k):
    if not (math.isfinite(k) and 0.0 < k < 1.0):
        raise InvalidParameterError(f"k must satisfy 0 < k < 1, got {k!r}")


@nb.njit(nogil=True, cache=True)
def _run_trial(state, seed, index, beta, alpha, event_cap, pos, kind):
    """Simulate one trial; returns (m, censored, stack arrays possibly grown)."""
    rng.stream_init(state, seed, rng.STREAM_AVALANCHE, index)
    if beta <= 0.0:
        return 1, False, pos, kind
    top = 0
    pos[0] = 0.0
    kind[0] = _HOLE
    top = 1
    events = 0
    while top > 0:
        top -= 1
        x = pos[top]
        c = kind[top]
        while True:
            u = rng.next_uniform(state)
            if c == _HOLE:
                x += -math.log(u) / beta
                if x >= 1.0:
                    break
            else:
                x -= -math.log(u) / alpha
                if x <= 0.0:
                    break
            events += 1
            if events >= event_cap:
                return -1, True, pos, kind
            if top + 2 > pos.shape[0]:
                new_pos = np.empty(2 * pos.shape[0], dtype=pos.dtype)
                new_kind = np.empty(2 * kind.shape[0], dtype=kind.dtype)
                new_pos[:top] = pos[:top]
                new_kind[:top] = kind[:top]
                pos = new_pos
                kind = new_kind
            # the new pair starts where the ionization happened
            pos[top] = x
            kind[top] = _HOLE if c == _ELECTRON else _ELECTRON
            top += 1
            pos[top] = x
            kind[top] = c
            top += 1
    return 1 + events, False, pos, kind


@nb.njit(nogil=True, cache=True)
def _run_range(seed, start, stop, beta, alpha, event_cap, out):
    state = np.empty(rng.STATE_SIZE, dtype=np.uint64)
    pos = np.empty(1024, dtype=np.float64)
    kind = np.empty(1024, dtype=np.int8)
    for i in range(start, stop):
        m, censored, pos, kind = _run_trial(
            state, seed, np.uint64(i), beta, alpha, event_cap, pos, kind
        )
        out[i - start] = m


def simulate_trials(cfg, start, stop):
    """Outcomes of trials ``start, ..., stop - 1``; censored trials read ``-1``."""
    if not 0 <= start <= stop:
        raise InvalidParameterError("need 0 <= start <= stop")
    out = np.empty(stop - start, dtype=np.int64)
    _run_range(
        rng.as_seed(cfg.seed), np.int64(start), np.int64(stop),
        float(cfg.beta_L), float(cfg.beta_L / cfg.k), np.int64(cfg.event_cap), out,
    )
    return out


def simulate_single_injection(cfg, trial_index):
    """One avalanche started by a single hole; deterministic in ``(seed, trial_index)``."""
    m = int(simulate_trials(cfg, int(trial_index), int(trial_index) + 1)[0])
    if m < 0:
        return TrialOutcome(m=cfg.event_cap + 1, censored=True)
    return TrialOutcome(m=m)


def _chunks(n, workers):
    edges = np.linspace(0, n, workers + 1).round().astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def sample_gain_histogram(cfg, trials, workers=1, max_censored_fraction=1e-4):
    """Empirical gain pmf over ``trials`` independent injections.

    Trials are split into contiguous index ranges, one per worker; since each
    trial draws from its own counter-based stream, the result is identical for
    any ``workers``.  Censored trials (``event_cap`` reached) are reported as
    truncation mass; a censored fraction at or above
    ``max_censored_fraction`` raises :class:`CensoringError`.
    """
    trials = int(trials)
    if trials < 1:
        raise InvalidParameterError("trials must be >= 1")
    workers = max(1, int(workers))
    ranges = _chunks(trials, min(workers, trials))
    if len(ranges) == 1:
        parts = [simulate_trials(cfg, *ranges[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            parts = list(pool.map(lambda r: simulate_trials(cfg, *r), ranges))
    outcomes = np.concatenate(parts)
    ok = outcomes[outcomes > 0]
    censored = trials - ok.size
    if censored / trials >= max_censored_fraction and censored > 0:
        raise CensoringError(
            f"{censored} of {trials} trials hit the event cap of {cfg.event_cap}"
        )
    counts = np.bincount(ok, minlength=2) if ok.size else np.zeros(2, dtype=np.int64)
    pmf = counts / trials
    dist = GainDistribution(
        pmf, origin="monte-carlo", truncation_mass=censored / trials,
        params=McIntyreParams(cfg.k, mean_gain_from_coefficients(cfg.k, cfg.beta_L)),
    )
    return MonteCarloRun(dist, cfg, trials, censored, outcomes)
