"""
Weighted chi-square null distributions.

A null is T = scale * sum_i w_i z_i^2 with z_i i.i.d. standard normal.
p-values come from Monte Carlo simulation or from a Gamma distribution
matched to the null's first two moments.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import stats

from kcit.exceptions import KcitError

logger = logging.getLogger(__name__)

# variance below which the Gamma fit is treated as a point mass
DEGENERATE_VARIANCE = 1e-300
# cap on normals held in memory per simulated block
MC_BLOCK_ELEMENTS = 1 << 22
# statistics at or below this count as exactly zero under a degenerate null
DEGENERATE_STAT_TOL = 1e-10
# report p-values never go below this; the Gamma tail underflows to 0
MIN_P_VALUE = float(np.finfo(float).tiny)

METHOD_GAMMA = "gamma"
METHOD_MONTE_CARLO = "monte_carlo"


class NullDistributionError(KcitError):
    """Base exception for null distribution handling"""

    pass


@dataclass(frozen=True)
class NullSpec:
    weights: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).ravel()
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise NullDistributionError("null weights must be finite and nonnegative")
        if not self.scale > 0:
            raise NullDistributionError(f"null scale must be positive, got {self.scale}")
        weights = weights.copy()
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def size(self) -> int:
        return self.weights.size

    def mean(self) -> float:
        return self.scale * float(self.weights.sum())

    def variance(self) -> float:
        return 2.0 * self.scale**2 * float(np.sum(self.weights**2))


@dataclass(frozen=True)
class GammaFit:
    k: float
    theta: float
    mean: float
    degenerate: bool = False


def null_mean_var(spec: NullSpec) -> Tuple[float, float]:
    """Mean and variance of the mixture (each chi-square_1 has mean 1, variance 2)."""
    return spec.mean(), spec.variance()


def fit_gamma_moments(mean: float, variance: float) -> GammaFit:
    """Gamma(k, theta) with k = mean^2 / var and theta = var / mean."""
    if variance < DEGENERATE_VARIANCE or mean <= 0:
        return GammaFit(k=np.nan, theta=np.nan, mean=float(mean), degenerate=True)
    return GammaFit(
        k=mean**2 / variance, theta=variance / mean, mean=float(mean), degenerate=False
    )


def fit_gamma(spec: NullSpec) -> GammaFit:
    return fit_gamma_moments(*null_mean_var(spec))


def p_value_gamma(fit: GammaFit, t: float) -> float:
    """Upper-tail probability of ``t`` under the fitted Gamma."""
    if fit.degenerate:
        return 1.0 if t <= fit.mean else 0.0
    return float(stats.gamma.sf(t, a=fit.k, scale=fit.theta))


def _simulate_block(weights: np.ndarray, scale: float, draws: int, rng) -> np.ndarray:
    out = np.empty(draws)
    if weights.size == 0:
        out.fill(0.0)
        return out
    block = max(1, MC_BLOCK_ELEMENTS // weights.size)
    for start in range(0, draws, block):
        stop = min(draws, start + block)
        z = rng.standard_normal((stop - start, weights.size))
        out[start:stop] = scale * ((z * z) @ weights)
    return out


def simulate_null(spec: NullSpec, draws: int, rng_seed: int, workers: int = 1) -> np.ndarray:
    """
    Draw ``draws`` realizations of the null.

    With one worker the stream is ``default_rng(rng_seed)``. With w > 1
    workers the draws are split into w contiguous shards, shard i using
    ``SeedSequence(rng_seed).spawn(w)[i]``, so results are fixed for a fixed
    worker count.
    """
    if draws < 1:
        raise NullDistributionError(f"draws must be positive, got {draws}")
    if workers <= 1:
        return _simulate_block(spec.weights, spec.scale, draws, np.random.default_rng(rng_seed))

    children = np.random.SeedSequence(rng_seed).spawn(workers)
    sizes = [len(part) for part in np.array_split(np.arange(draws), workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        shards = pool.map(
            lambda args: _simulate_block(
                spec.weights, spec.scale, args[0], np.random.default_rng(args[1])
            ),
            [(size, child) for size, child in zip(sizes, children) if size > 0],
        )
        return np.concatenate(list(shards))


def p_value_mc(
    spec: NullSpec, t: float, draws: int, rng_seed: int, workers: int = 1
) -> float:
    """(1 + #{realizations >= t}) / (1 + draws)."""
    realizations = simulate_null(spec, draws, rng_seed, workers=workers)
    exceed = int(np.count_nonzero(realizations >= t))
    return (1.0 + exceed) / (1.0 + draws)


def _degenerate_p_value(statistic: float, draws: int) -> float:
    # a zero statistic under a zero null carries no evidence
    return 1.0 if statistic <= DEGENERATE_STAT_TOL else 1.0 / (1.0 + draws)


def null_p_values(
    statistic: float,
    config,
    spec: Optional[NullSpec] = None,
    moments: Optional[Tuple[float, float]] = None,
) -> Dict[str, float]:
    """
    p-values of ``statistic`` for every method ``config`` asks for, keyed by
    ``gamma`` / ``monte_carlo``.

    The Gamma path uses ``moments`` when given, otherwise the moments of
    ``spec``. Monte Carlo always needs ``spec``.
    """
    p_values = {}
    if config.wants_gamma:
        fit = fit_gamma_moments(*moments) if moments is not None else fit_gamma(spec)
        if fit.degenerate:
            p_values[METHOD_GAMMA] = _degenerate_p_value(statistic, config.mc_draws)
        else:
            p_values[METHOD_GAMMA] = max(p_value_gamma(fit, statistic), MIN_P_VALUE)
    if config.wants_mc:
        if spec is None:
            raise NullDistributionError("Monte Carlo p-value needs the null weights")
        if spec.size == 0:
            p_values[METHOD_MONTE_CARLO] = _degenerate_p_value(statistic, config.mc_draws)
        else:
            p_values[METHOD_MONTE_CARLO] = p_value_mc(
                spec, statistic, config.mc_draws, config.seed, workers=config.workers
            )
    logger.debug(f"p-values for statistic {statistic:.6g}: {p_values}")
    return p_values
