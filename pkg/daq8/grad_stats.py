"""
Per-channel gradient statistics and the diagnostics built on them.

- compute_channel_stats / classify: the Gaussian vs Inverted-T discriminator,
  Gaussian iff P(|g| > sigma) > lambda.
- quantization_error: magnitude-weighted error, mean of |g - g_hat| * exp(alpha |g|).
- inverted_t_error_derivative: closed-form dE/ds under the piecewise-uniform
  Inverted-T density, with a quadrature cross-check (inverted_t_error,
  numerical_error_derivative, derivative_agreement_report).
- ks_statistic / empirical_cdf and the reference CDFs used for KS diagnostics.
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy import integrate, stats

from daq8.errors import DimensionError, DomainError
from daq8.tensor_core import Tensor

# Representative magnitude exponent for diagnostics
DEFAULT_ALPHA = 0.2


class DistributionClass(str, Enum):
    GAUSSIAN = "gaussian"
    INVERTED_T = "inverted_t"


@dataclass(frozen=True)
class ChannelStats:
    """|g|_max, sigma, mu and tail fraction P = count(|g| > sigma) / count."""

    g_max: float
    sigma: float
    mu: float
    tail_fraction: float
    count: int

    @property
    def is_degenerate(self) -> bool:
        """All-zero slice: no scale can be derived from it."""
        return self.g_max <= 0.0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class InvertedTParams:
    """Piecewise-uniform density: a on |g| < eps, b on eps < |g| < g_max; f(g) = exp(alpha |g|)."""

    a: float
    b: float
    eps: float
    g_max: float
    alpha: float

    def __post_init__(self):
        if not (self.a > self.b > 0):
            raise DomainError(f"Inverted-T requires a > b > 0, got a={self.a}, b={self.b}")
        if not (0 < self.eps < self.g_max):
            raise DomainError(f"Inverted-T requires 0 < eps < g_max, got eps={self.eps}, g_max={self.g_max}")
        if self.alpha < 0:
            raise DomainError(f"alpha must be non-negative, got {self.alpha}")

    def with_alpha(self, alpha: float) -> "InvertedTParams":
        return InvertedTParams(self.a, self.b, self.eps, self.g_max, alpha)


def _as_array(g: Union[Tensor, np.ndarray]) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g)


def compute_channel_stats(g_slice: Union[Tensor, np.ndarray]) -> ChannelStats:
    """
    Statistics of one channel slice (all of N, H, W for a fixed channel).

    sigma is the population standard deviation. Sums run in float64 with numpy's
    pairwise reduction over the flattened slice, so the result does not depend on
    which thread computed it. A slice with no spread reports sigma = 0 and
    tail_fraction = 0.
    """
    values = _as_array(g_slice).reshape(-1).astype(np.float64)
    if values.size == 0:
        raise DimensionError("cannot compute statistics of an empty slice", (0,))
    magnitude = np.abs(values)
    g_max = float(magnitude.max())
    if values.max() == values.min():
        return ChannelStats(g_max=g_max, sigma=0.0, mu=float(values[0]), tail_fraction=0.0,
                            count=int(values.size))
    mu = float(values.mean())
    sigma = float(np.sqrt(np.mean((values - mu) ** 2)))
    tail = int(np.count_nonzero(magnitude > sigma))
    return ChannelStats(g_max=g_max, sigma=sigma, mu=mu, tail_fraction=tail / values.size,
                        count=int(values.size))


def compute_layer_channel_stats(g: Union[Tensor, np.ndarray]) -> List[ChannelStats]:
    """Stats for every channel of an NCHW gradient."""
    arr = _as_array(g)
    if arr.ndim != 4:
        raise DimensionError("layer gradient must have rank 4", arr.shape)
    return [compute_channel_stats(arr[:, c]) for c in range(arr.shape[1])]


def classify(stats_: ChannelStats, lam: float) -> DistributionClass:
    """Gaussian iff tail_fraction > lambda; ties go to Inverted-T."""
    if not 0 < lam < 1:
        raise DomainError(f"lambda must lie in (0, 1), got {lam}")
    if stats_.tail_fraction > lam:
        return DistributionClass.GAUSSIAN
    return DistributionClass.INVERTED_T


def quantization_error(g: Union[Tensor, np.ndarray], g_hat: Union[Tensor, np.ndarray],
                       alpha: float = DEFAULT_ALPHA) -> float:
    """Mean of |g - g_hat| * exp(alpha * |g|)."""
    if alpha < 0:
        raise DomainError(f"alpha must be non-negative, got {alpha}")
    a = _as_array(g).astype(np.float64)
    b = _as_array(g_hat).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError("quantization_error operands differ in shape", (*a.shape, *b.shape))
    return float(np.mean(np.abs(a - b) * np.exp(alpha * np.abs(a))))


def inverted_t_error_derivative(params: InvertedTParams, s: float) -> float:
    """
    Closed form of dE/ds for the Inverted-T density:

        [(a - b) e^(alpha eps) + b (255 + alpha s) e^(alpha s) - 254 b e^(alpha g_max) - a] / (127 alpha)
    """
    if not params.eps < s < params.g_max:
        raise DomainError(f"s must lie in (eps, g_max) = ({params.eps}, {params.g_max}), got {s}")
    if params.alpha <= 0:
        raise DomainError("closed form needs alpha > 0")
    a, b, eps, g_max, alpha = params.a, params.b, params.eps, params.g_max, params.alpha
    numerator = ((a - b) * math.exp(alpha * eps)
                 + b * (255.0 + alpha * s) * math.exp(alpha * s)
                 - 254.0 * b * math.exp(alpha * g_max)
                 - a)
    return numerator / (127.0 * alpha)


def inverted_t_density(params: InvertedTParams, g: float) -> float:
    magnitude = abs(g)
    if magnitude < params.eps:
        return params.a
    if magnitude < params.g_max:
        return params.b
    return 0.0


def inverted_t_error(params: InvertedTParams, s: float) -> float:
    """
    E(s) = I1 + I2 evaluated by quadrature, taken as written:

        I1 = int_0^s (s/127) f(g) p(g) dg
        I2 = 2 int_s^g_max (g - s) f(g) p(g) dg

    I1 carries no symmetry factor; see DESIGN.md for what the probe measures.
    """
    if not 0 < s <= params.g_max:
        raise DomainError(f"s must lie in (0, g_max], got {s}")

    def f(g: float) -> float:
        return math.exp(params.alpha * abs(g))

    def integrand_i1(g: float) -> float:
        return (s / 127.0) * f(g) * inverted_t_density(params, g)

    def integrand_i2(g: float) -> float:
        return 2.0 * (g - s) * f(g) * inverted_t_density(params, g)

    i1 = _piecewise_quad(integrand_i1, 0.0, s, params.eps)
    i2 = _piecewise_quad(integrand_i2, s, params.g_max, params.eps)
    return i1 + i2


def _piecewise_quad(func: Callable[[float], float], lo: float, hi: float, brk: float) -> float:
    if hi <= lo:
        return 0.0
    if lo < brk < hi:
        left, _ = integrate.quad(func, lo, brk, epsabs=1e-13, epsrel=1e-12, limit=200)
        right, _ = integrate.quad(func, brk, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
        return left + right
    value, _ = integrate.quad(func, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)
    return value


def numerical_error_derivative(params: InvertedTParams, s: float, h: Optional[float] = None) -> float:
    """Central difference of inverted_t_error at s."""
    if h is None:
        h = 1e-4 * min(s - params.eps, params.g_max - s)
    return (inverted_t_error(params, s + h) - inverted_t_error(params, s - h)) / (2.0 * h)


def derivative_agreement_report(grid: Iterable[InvertedTParams], s_fractions: Sequence[float] = (0.25, 0.5, 0.75)) -> Dict:
    """
    Compare the closed-form dE/ds to quadrature + central differences.

    For each parameter set and each s = eps + frac * (g_max - eps) a row records
    both values, whether their signs agree and their ratio.

    Returns:
        {"rows": [...], "sign_match_rate": float, "median_ratio": float, "max_relative_gap": float}
    """
    rows = []
    for params in grid:
        for frac in s_fractions:
            s = params.eps + frac * (params.g_max - params.eps)
            closed = inverted_t_error_derivative(params, s)
            numeric = numerical_error_derivative(params, s)
            ratio = closed / numeric if numeric != 0 else math.nan
            rows.append({
                "a": params.a, "b": params.b, "eps": params.eps, "g_max": params.g_max,
                "alpha": params.alpha, "s": s,
                "closed_form": closed, "numerical": numeric,
                "sign_match": bool(np.sign(closed) == np.sign(numeric)),
                "ratio": ratio,
                "relative_gap": abs(closed - numeric) / max(abs(numeric), 1e-300),
            })
    ratios = [r["ratio"] for r in rows if math.isfinite(r["ratio"])]
    return {
        "rows": rows,
        "sign_match_rate": sum(r["sign_match"] for r in rows) / len(rows) if rows else math.nan,
        "median_ratio": float(np.median(ratios)) if ratios else math.nan,
        "max_relative_gap": max((r["relative_gap"] for r in rows), default=math.nan),
    }


def default_probe_grid() -> List[InvertedTParams]:
    """Parameter grid for the derivative probe."""
    grid = []
    for a, b in ((10.0, 0.1), (50.0, 0.5), (5.0, 0.2)):
        for eps in (0.01, 0.05):
            for alpha in (0.2, 0.5, 2.0):
                grid.append(InvertedTParams(a=a, b=b, eps=eps, g_max=1.0, alpha=alpha))
    return grid


def empirical_cdf(sample: Sequence[float]) -> Callable[[Union[float, np.ndarray]], Union[float, np.ndarray]]:
    """Right-continuous step CDF: F(x) = #{x_i <= x} / n."""
    ordered = np.sort(np.asarray(sample, dtype=np.float64).reshape(-1))
    if ordered.size == 0:
        raise DimensionError("empirical CDF of an empty sample", (0,))
    n = ordered.size

    def cdf(x):
        result = np.searchsorted(ordered, x, side="right") / n
        return float(result) if np.ndim(result) == 0 else result

    return cdf


def ks_statistic(sample: Sequence[float], cdf: Callable) -> float:
    """
    D_n = sup |F_n(g) - F(g)| for a sorted sample against a reference CDF.

    Evaluated at the sample points as max over i of max(|i/n - F(x_i)|, |(i-1)/n - F(x_i)|).
    """
    xs = np.sort(np.asarray(sample, dtype=np.float64).reshape(-1))
    n = xs.size
    if n == 0:
        raise DimensionError("KS statistic of an empty sample", (0,))
    reference = np.asarray(cdf(xs), dtype=np.float64).reshape(-1)
    upper = np.arange(1, n + 1, dtype=np.float64) / n
    lower = np.arange(0, n, dtype=np.float64) / n
    return float(max(np.max(np.abs(upper - reference)), np.max(np.abs(lower - reference))))


def gaussian_reference_cdf(stats_: ChannelStats) -> Optional[Callable]:
    """N(mu, sigma^2) matched to the slice, or None when sigma is 0."""
    if stats_.sigma <= 0:
        return None
    return stats.norm(loc=stats_.mu, scale=stats_.sigma).cdf


def inverted_t_reference(values: np.ndarray, stats_: ChannelStats, alpha: float = DEFAULT_ALPHA) -> Optional[InvertedTParams]:
    """
    Inverted-T parameters read off the discriminator's own statistics.

    eps = sigma, support = |g|_max, and a, b chosen so that the density
    integrates to one with the sample's mass inside eps. Not a fit; None when
    the slice cannot support a valid a > b > 0 shape.
    """
    eps, g_max = stats_.sigma, stats_.g_max
    if not 0 < eps < g_max:
        return None
    inside = float(np.mean(np.abs(values) <= eps))
    a = inside / (2.0 * eps)
    b = (1.0 - inside) / (2.0 * (g_max - eps))
    try:
        return InvertedTParams(a=a, b=b, eps=eps, g_max=g_max, alpha=alpha)
    except DomainError:
        return None


def inverted_t_cdf(params: InvertedTParams) -> Callable:
    """CDF of the symmetric piecewise-uniform density on [-g_max, g_max]."""
    a, b, eps, m = params.a, params.b, params.eps, params.g_max
    outer = b * (m - eps)

    def positive_mass(t: np.ndarray) -> np.ndarray:
        # mass of (0, t] for t >= 0
        inner = a * np.minimum(t, eps)
        tail = b * np.clip(t - eps, 0.0, m - eps)
        return inner + tail

    def cdf(x):
        x = np.asarray(x, dtype=np.float64)
        half = a * eps + outer
        value = np.where(x >= 0, half + positive_mass(np.abs(x)), half - positive_mass(np.abs(x)))
        return np.clip(value, 0.0, 1.0)

    return cdf


def ks_against_references(values: np.ndarray, alpha: float = DEFAULT_ALPHA) -> Dict[str, Optional[float]]:
    """KS statistic of a gradient sample against its Gaussian and Inverted-T references."""
    flat = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    stats_ = compute_channel_stats(flat)
    result: Dict[str, Optional[float]] = {"ks_gaussian": None, "ks_inverted_t": None}
    gaussian = gaussian_reference_cdf(stats_)
    if gaussian is not None:
        result["ks_gaussian"] = ks_statistic(flat, gaussian)
    params = inverted_t_reference(flat, stats_, alpha)
    if params is not None:
        result["ks_inverted_t"] = ks_statistic(flat, inverted_t_cdf(params))
    return result
