"""Parameter estimation from excess-noise points, gain curves and spectra."""

from dataclasses import dataclass, field
import csv
import io
import json
import math

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import chi2 as chi2_dist

from .errors import (
    DegenerateDataError,
    InvalidParameterError,
    NoConvergenceError,
    NoPlateauError,
    SupportOverflowError,
    TruncationError,
)
from .gainstats import McIntyreParams, enf_empirical, mcintyre_pmf, moments
from .spectrum import DEFAULT_N_MAX, bin_probabilities

K_BOUNDS = (1e-3, 1.0 - 1e-6)
SPECTRUM_PARAMETERS = ("n_bar", "k", "M", "sigma_read")
DEFAULT_SPECTRUM_BOUNDS = {
    "n_bar": (1e-4, 3.0),
    "k": K_BOUNDS,
    "M": (1.0, 60.0),
    "sigma_read": (0.05, 50.0),
}


@dataclass(frozen=True)
class EnfPoint:
    M: float
    F: float
    weight: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.M) and self.M >= 1.0):
            raise InvalidParameterError(f"M must be >= 1, got {self.M!r}")
        if not (math.isfinite(self.F) and self.F >= 1.0):
            raise InvalidParameterError(f"F must be >= 1, got {self.F!r}")
        if not (math.isfinite(self.weight) and self.weight > 0.0):
            raise InvalidParameterError(f"weight must be > 0, got {self.weight!r}")


@dataclass(frozen=True)
class GainCurvePoint:
    bias_voltage: float
    mean_output_carriers: float

    def __post_init__(self):
        if not (math.isfinite(self.mean_output_carriers) and self.mean_output_carriers >= 0.0):
            raise InvalidParameterError("mean_output_carriers must be >= 0")


@dataclass(frozen=True, eq=False)
class BinResiduals:
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    expected: np.ndarray

    @property
    def pearson(self):
        return (self.observed - self.expected) / np.sqrt(np.maximum(self.expected, 1e-300))

    def to_csv(self, stream):
        stream.write("bin_lower,bin_upper,observed,expected,pearson_residual\n")
        for row in zip(self.lower, self.upper, self.observed, self.expected, self.pearson):
            lo, hi, o, e, r = (float(v) for v in row)
            stream.write(f"{lo!r},{hi!r},{int(o)},{e!r},{r!r}\n")


@dataclass(frozen=True, eq=False)
class FitResult:
    parameters: dict
    standard_errors: dict
    objective_value: float
    converged: bool
    iterations: int
    evaluations: int = 0
    bound_hits: dict = field(default_factory=dict)
    residuals: BinResiduals | None = None
    dof: int | None = None

    def to_dict(self):
        out = {
            "parameters": dict(self.parameters),
            "standard_errors": dict(self.standard_errors),
            "objective_value": self.objective_value,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "evaluations": int(self.evaluations),
            "bound_hits": dict(self.bound_hits),
        }
        if self.dof is not None:
            out["dof"] = int(self.dof)
        return out

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


# --------------------------------------------------------------------------
# excess noise factor vs gain

def _enf_design(points):
    M = np.array([p.M for p in points], dtype=np.float64)
    F = np.array([p.F for p in points], dtype=np.float64)
    w = np.array([p.weight for p in points], dtype=np.float64)
    # F(M; k) = a/k + c, linear in 1/k
    a = (M - 1.0) ** 2 / M
    c = 2.0 - 1.0 / M
    return a, c, F, w


def enf_objective(points, k):
    """Weighted sum of squared residuals of the hole-injection ENF curve."""
    a, c, F, w = _enf_design(points)
    r = F - (a / k + c)
    return float(np.sum(w * r * r))


def fit_k(points, bounds=K_BOUNDS):
    """Weighted least-squares estimate of ``k`` from ``(M, F)`` pairs.

    The standard error comes from the curvature of the objective at the
    optimum, which assumes the weights are inverse variances of ``F``.
    """
    points = list(points)
    if len(points) < 2:
        raise DegenerateDataError("need at least two (M, F) points")
    a, c, F, w = _enf_design(points)
    if np.ptp([p.M for p in points]) == 0.0 or not np.any(a > 0.0):
        raise DegenerateDataError("M values must not all be equal (and not all 1)")

    res = minimize_scalar(
        lambda k: enf_objective(points, k), bounds=bounds, method="bounded",
        options={"xatol": 1e-13, "maxiter": 1000},
    )
    if not res.success:
        raise NoConvergenceError(f"k fit did not converge: {res.message}")
    k = float(res.x)
    r = F - (a / k + c)
    # d2S/dk2 for S = sum w (F - a/k - c)^2
    curvature = float(np.sum(2.0 * w * ((a / k**2) ** 2 - 2.0 * r * a / k**3)))
    stderr = math.sqrt(2.0 / curvature) if curvature > 0.0 else math.inf
    return FitResult(
        parameters={"k": k},
        standard_errors={"k": stderr},
        objective_value=float(res.fun),
        converged=True,
        iterations=int(res.nit),
        evaluations=int(res.nfev),
        bound_hits={"k": bool(min(k - bounds[0], bounds[1] - k) <= 1e-9)},
        dof=len(points) - 1,
    )


def enf_points_from_distributions(dists, weights=None):
    """``(M, F)`` pairs computed from gain distributions, one per distribution."""
    dists = list(dists)
    weights = [1.0] * len(dists) if weights is None else list(weights)
    points = []
    for dist, weight in zip(dists, weights):
        mean, _ = moments(dist)
        points.append(EnfPoint(M=mean, F=enf_empirical(dist), weight=weight))
    return points


def enf_standard_error(dist, n_samples):
    """Delta-method standard error of the ENF estimated from ``n_samples`` draws.

    ``dist`` is taken as the (empirical) distribution of those draws.
    """
    if n_samples < 2:
        raise DegenerateDataError("need at least two samples")
    pmf = np.asarray(dist.pmf)
    m = np.arange(pmf.size, dtype=np.float64)
    mu = [math.fsum(pmf * m**j) for j in range(1, 5)]
    if mu[0] <= 0.0:
        raise DegenerateDataError("mean gain is zero")
    g1 = -2.0 * mu[1] / mu[0] ** 3
    g2 = 1.0 / mu[0] ** 2
    var = (
        g1 * g1 * (mu[1] - mu[0] ** 2)
        + 2.0 * g1 * g2 * (mu[2] - mu[0] * mu[1])
        + g2 * g2 * (mu[3] - mu[1] ** 2)
    ) / n_samples
    return math.sqrt(max(var, 0.0))


def noisy_enf_points(k, gains, relative_noise, rng, trunc=None):
    """ENF points from analytic gain pmfs with multiplicative Gaussian noise on F.

    Weights are inverse variances estimated from the noisy values.
    """
    points = []
    for M in gains:
        dist = mcintyre_pmf(McIntyreParams(k, M), trunc)
        F = enf_empirical(dist) * (1.0 + relative_noise * rng.standard_normal())
        F = max(F, 1.0)
        points.append(EnfPoint(M=float(M), F=F, weight=1.0 / (relative_noise * F) ** 2))
    return points


# --------------------------------------------------------------------------
# gain calibration

def calibrate_gain(curve, unity_bias, window=0.5, max_relative_slope=0.02):
    """Average gain versus bias, normalised to the plateau around ``unity_bias``.

    Every point within ``window`` volts of ``unity_bias`` contributes to the
    plateau level.  If those points rise faster than ``max_relative_slope``
    (fraction of the plateau level per volt) there is no plateau to normalise to.
    """
    curve = sorted(curve, key=lambda p: p.bias_voltage)
    if not curve:
        raise DegenerateDataError("empty gain curve")
    bias = np.array([p.bias_voltage for p in curve], dtype=np.float64)
    level = np.array([p.mean_output_carriers for p in curve], dtype=np.float64)
    if not bias[0] <= unity_bias <= bias[-1]:
        raise NoPlateauError(f"unity bias {unity_bias} V outside measured range [{bias[0]}, {bias[-1]}] V")
    near = np.abs(bias - unity_bias) <= window * (1.0 + 1e-12)
    if not near.any():
        raise NoPlateauError(f"no points within {window} V of {unity_bias} V")
    plateau = float(np.mean(level[near]))
    if plateau <= 0.0:
        raise NoPlateauError("plateau level is zero")
    if np.unique(bias[near]).size >= 2:
        slope = np.polyfit(bias[near], level[near], 1)[0]
        if abs(slope) / plateau > max_relative_slope:
            raise NoPlateauError(
                f"output changes by {abs(slope) / plateau:.3%} per volt around {unity_bias} V"
            )
    return [(float(b), float(v / plateau)) for b, v in zip(bias, level)]


# --------------------------------------------------------------------------
# spectrum fit

def binned_chi2(hist, probs, min_expected=5.0):
    """Pearson chi-square of ``hist`` (with under/overflow) against bin probabilities.

    Adjacent bins are pooled left to right until each group expects at least
    ``min_expected`` counts.  Returns ``(chi2, dof, p_value)``.
    """
    observed = hist.all_counts().astype(np.float64)
    expected = np.asarray(probs, dtype=np.float64) * hist.total / np.sum(probs)
    groups_o, groups_e = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            groups_o.append(acc_o)
            groups_e.append(acc_e)
            acc_o = acc_e = 0.0
    if groups_o:
        groups_o[-1] += acc_o
        groups_e[-1] += acc_e
    o = np.array(groups_o)
    e = np.array(groups_e)
    stat = float(np.sum((o - e) ** 2 / e))
    dof = max(o.size - 1, 1)
    return stat, dof, float(chi2_dist.sf(stat, dof))


def poisson_deviance(observed, expected):
    expected = np.maximum(expected, 1e-300)
    ratio = np.where(observed > 0, observed * np.log(np.where(observed > 0, observed, 1.0) / expected), 0.0)
    return float(2.0 * np.sum(expected - observed + ratio))


def _hessian(f, x, lower, upper):
    n = x.size
    h = 1e-4 * np.maximum(np.abs(x), 0.1)
    h = np.minimum(h, 0.25 * (upper - lower))
    # keep the stencil inside the bounds
    xc = np.clip(x, lower + h, upper - h)
    H = np.empty((n, n))
    f0 = f(xc)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(xc + ei) - 2.0 * f0 + f(xc - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(xc + ei + ej) - f(xc + ei - ej) - f(xc - ei + ej) + f(xc - ei - ej)
            ) / (4.0 * h[i] * h[j])
    return H


def fit_spectrum(hist, init, free, bounds=None, n_max=DEFAULT_N_MAX, restarts=3, seed=0,
                 trunc=None, min_count=1000):
    """Binned Poisson maximum-likelihood fit of a pulse-height histogram.

    ``free`` names the parameters to vary (a subset of ``n_bar, k, M,
    sigma_read``); the rest stay at their values in ``init``.  The objective
    is the Poisson deviance, with the model normalised to the observed total
    count.  The search is a bounded Nelder-Mead simplex started at ``init``
    and at ``restarts`` uniformly random points inside the bounds; the run
    with the lowest deviance wins.  Standard errors come from the inverse
    Hessian of the negative log-likelihood.
    """
    if hist.total < min_count:
        raise DegenerateDataError(f"histogram holds {hist.total} counts, need at least {min_count}")
    free = set(free)
    unknown = free - set(SPECTRUM_PARAMETERS)
    if unknown:
        raise InvalidParameterError(f"cannot fit {sorted(unknown)}; free parameters must be among {SPECTRUM_PARAMETERS}")
    names = [p for p in SPECTRUM_PARAMETERS if p in free]
    bounds = {**DEFAULT_SPECTRUM_BOUNDS, **(bounds or {})}
    lower = np.array([bounds[p][0] for p in names], dtype=np.float64)
    upper = np.array([bounds[p][1] for p in names], dtype=np.float64)

    observed = hist.all_counts().astype(np.float64)
    total = observed.sum()
    evaluations = 0

    def expected(values):
        device = init.with_params(**dict(zip(names, map(float, values))))
        probs = bin_probabilities(device, hist.bin_edges, n_max, trunc)
        return total * probs / probs.sum()

    def objective(values):
        nonlocal evaluations
        evaluations += 1
        try:
            return poisson_deviance(observed, expected(values))
        except (TruncationError, SupportOverflowError, InvalidParameterError):
            return 1e300

    current = {
        "n_bar": init.n_bar, "k": init.gain.k, "M": init.gain.M, "sigma_read": init.sigma_read,
    }
    x0 = np.array([current[p] for p in names], dtype=np.float64)

    if not names:
        value = objective(x0)
        return FitResult({}, {}, value, True, 0, evaluations,
                         residuals=_residuals(hist, observed, expected(x0)), dof=observed.size - 1)

    x0 = np.clip(x0, lower, upper)
    generator = np.random.default_rng(seed)
    starts = [x0] + [lower + (upper - lower) * generator.random(len(names)) for _ in range(restarts)]
    options = {"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000 * len(names), "maxfev": 8000 * len(names)}
    runs = []
    for start in starts:
        runs.append(minimize(objective, start, method="Nelder-Mead",
                             bounds=list(zip(lower, upper)), options=options))
    # lowest objective wins; ties go to the earliest start
    final = runs[min(range(len(runs)), key=lambda i: (runs[i].fun, i))]
    x = np.asarray(final.x, dtype=np.float64)
    iterations = sum(int(r.nit) for r in runs)

    H = 0.5 * _hessian(objective, x, lower, upper)
    try:
        cov = np.linalg.inv(H)
        diag = np.diag(cov)
        errors = np.where(diag > 0, np.sqrt(np.abs(diag)), np.inf)
        if np.any(np.linalg.eigvalsh(0.5 * (H + H.T)) <= 0):
            errors = np.full(len(names), np.inf)
    except np.linalg.LinAlgError:
        errors = np.full(len(names), np.inf)

    span = upper - lower
    hits = {p: bool(min(x[i] - lower[i], upper[i] - x[i]) <= 1e-6 * span[i]) for i, p in enumerate(names)}
    return FitResult(
        parameters={p: float(v) for p, v in zip(names, x)},
        standard_errors={p: float(e) for p, e in zip(names, errors)},
        objective_value=float(final.fun),
        converged=bool(final.success),
        iterations=iterations,
        evaluations=evaluations,
        bound_hits=hits,
        residuals=_residuals(hist, observed, expected(x)),
        dof=int(observed.size - 1 - len(names)),
    )


def _residuals(hist, observed, expected):
    edges = hist.bin_edges
    lower = np.concatenate(([-np.inf], edges))
    upper = np.concatenate((edges, [np.inf]))
    return BinResiduals(lower, upper, observed, expected)


def residuals_csv_text(result):
    buf = io.StringIO()
    result.residuals.to_csv(buf)
    return buf.getvalue()
