"""
Synthetic data generators.

``gen_pnl`` draws post-nonlinear data X = G(F(Z) + E) with a known
conditional independence structure; ``gen_random_dag_data`` samples a random
DAG and GP-distributed node functions over it.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from causal.services import Cpdag, dag_to_cpdag
from kcit.exceptions import KcitError
from kernels.services import DataMatrix, cholesky_with_jitter

logger = logging.getLogger(__name__)

CASE_ONE_EFFECTIVE = "one_effective"
CASE_ALL_EFFECTIVE = "all_effective"
PNL_CASES = (CASE_ONE_EFFECTIVE, CASE_ALL_EFFECTIVE)

NOISE_GAUSSIAN = "gaussian"
NOISE_UNIFORM = "uniform"
NOISE_LAPLACE = "laplace"
NOISE_FAMILIES = (NOISE_GAUSSIAN, NOISE_UNIFORM, NOISE_LAPLACE)

WEIGHTING_INVERSE_LENGTH = "inverse_length"
WEIGHTING_AMPLITUDE = "amplitude"
KERNEL_WEIGHTINGS = (WEIGHTING_INVERSE_LENGTH, WEIGHTING_AMPLITUDE)

# |a| floor for the invertible outer function G
MIN_LINEAR_COEFF = 0.2
MAX_ABS_VALUE = 1e6

SeedLike = Union[int, np.random.Generator]


class SynthError(KcitError):
    """Base Exception for the data generators"""

    exit_code = 6


class InvalidSynthConfigError(SynthError):
    """Raised when a generator config breaks its invariants"""

    pass


class GeneratedValuesOutOfRangeError(SynthError):
    """Raised when a generated column blows past MAX_ABS_VALUE"""

    exit_code = 7


@dataclass(frozen=True)
class PnlConfig:
    case: str = CASE_ONE_EFFECTIVE
    dependent: bool = False
    cond_dim: int = 1
    n: int = 200
    noise_family: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.case not in PNL_CASES:
            raise InvalidSynthConfigError(f"case must be one of {PNL_CASES}, got {self.case!r}")
        if self.cond_dim < 1:
            raise InvalidSynthConfigError(f"cond_dim must be at least 1, got {self.cond_dim}")
        if self.n < 10:
            raise InvalidSynthConfigError(f"n must be at least 10, got {self.n}")
        if self.noise_family is not None and self.noise_family not in NOISE_FAMILIES:
            raise InvalidSynthConfigError(
                f"noise_family must be one of {NOISE_FAMILIES}, got {self.noise_family!r}"
            )


@dataclass(frozen=True)
class RandomDagConfig:
    num_vars: int = 4
    edge_prob: float = 0.5
    n: int = 500
    seed: int = 0
    weight_range: Tuple[float, float] = (0.1, 0.6)
    coeff_range: Tuple[float, float] = (-2.0, 2.0)
    noise_sigma: float = 0.1
    kernel_weighting: str = WEIGHTING_INVERSE_LENGTH

    def __post_init__(self):
        if self.num_vars < 2:
            raise InvalidSynthConfigError(f"num_vars must be at least 2, got {self.num_vars}")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise InvalidSynthConfigError(f"edge_prob must lie in [0, 1], got {self.edge_prob}")
        if self.n < 10:
            raise InvalidSynthConfigError(f"n must be at least 10, got {self.n}")
        if self.weight_range[0] > self.weight_range[1] or self.coeff_range[0] > self.coeff_range[1]:
            raise InvalidSynthConfigError("ranges must be given as (low, high)")
        if self.noise_sigma <= 0:
            raise InvalidSynthConfigError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if self.kernel_weighting not in KERNEL_WEIGHTINGS:
            raise InvalidSynthConfigError(
                f"kernel_weighting must be one of {KERNEL_WEIGHTINGS}, got {self.kernel_weighting!r}"
            )


@dataclass(frozen=True)
class SmoothMixture:
    """f(u) = a u + b u^3 + c tanh(u)"""

    a: float
    b: float
    c: float

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.a * u + self.b * u**3 + self.c * np.tanh(u)


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_smooth_mixture(seed: SeedLike, invertible: bool = False) -> SmoothMixture:
    """
    Coefficients i.i.d. uniform on [-1, 1]. With ``invertible`` all three
    share one sign and |a| >= 0.2, so the function is strictly monotone.
    """
    rng = _rng(seed)
    a, b, c = rng.uniform(-1.0, 1.0, size=3)
    if invertible:
        sign = 1.0 if a >= 0 else -1.0
        a = sign * max(abs(a), MIN_LINEAR_COEFF)
        b, c = sign * abs(b), sign * abs(c)
    return SmoothMixture(float(a), float(b), float(c))


def draw_noise(rng: np.random.Generator, n: int, family: Optional[str] = None) -> np.ndarray:
    """Unit-variance noise; ``family=None`` picks one family at random."""
    if family is None:
        family = NOISE_FAMILIES[rng.integers(len(NOISE_FAMILIES))]
    if family == NOISE_GAUSSIAN:
        return rng.standard_normal(n)
    if family == NOISE_UNIFORM:
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=n)
    return rng.laplace(0.0, 1.0 / np.sqrt(2.0), size=n)


def _unit_scale(values: np.ndarray) -> np.ndarray:
    scale = values.std(ddof=1)
    return values / scale if scale > 0 else values


def _pnl_variable(rng: np.random.Generator, z: np.ndarray, config: PnlConfig) -> np.ndarray:
    if config.case == CASE_ONE_EFFECTIVE:
        inner = random_smooth_mixture(rng)(z[:, 0])
    else:
        inner = sum(random_smooth_mixture(rng)(z[:, i]) for i in range(config.cond_dim))
    inner = inner + draw_noise(rng, config.n, config.noise_family)
    outer = random_smooth_mixture(rng, invertible=True)
    return _unit_scale(outer(_unit_scale(inner)))


def gen_pnl(config: PnlConfig) -> DataMatrix:
    """
    Post-nonlinear data with columns X, Y, Z1..ZD (raw, not standardized).

    X and Y each get their own F, G and noise draws over a shared Z.
    ``dependent`` adds one standard Gaussian variable to both, which breaks
    X independent of Y given Z.
    """
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal((config.n, config.cond_dim))
    x = _pnl_variable(rng, z, config)
    y = _pnl_variable(rng, z, config)
    if config.dependent:
        shared = rng.standard_normal(config.n)
        x, y = x + shared, y + shared

    names = ("X", "Y") + tuple(f"Z{i + 1}" for i in range(config.cond_dim))
    return DataMatrix(values=np.column_stack([x, y, z]), column_names=names)


def random_dag(num_vars: int, edge_prob: float, rng: np.random.Generator) -> nx.DiGraph:
    """Upper-triangular DAG over X1..Xd with independent edge flips."""
    dag = nx.DiGraph()
    names = [f"X{i + 1}" for i in range(num_vars)]
    dag.add_nodes_from(names)
    for i in range(num_vars):
        for j in range(i + 1, num_vars):
            if rng.random() < edge_prob:
                dag.add_edge(names[i], names[j])
    return dag


def _parent_covariance(parents: np.ndarray, weights: np.ndarray, config: RandomDagConfig) -> np.ndarray:
    if config.kernel_weighting == WEIGHTING_INVERSE_LENGTH:
        scaled = parents * weights
        kernel = np.exp(-0.5 * cdist(scaled, scaled, "sqeuclidean"))
    else:
        kernel = sum(
            w * np.exp(-0.5 * cdist(parents[:, [p]], parents[:, [p]], "sqeuclidean"))
            for p, w in enumerate(weights)
        )
    return kernel + config.noise_sigma**2 * np.eye(parents.shape[0])


def gen_random_dag_data(config: RandomDagConfig) -> Tuple[Cpdag, DataMatrix]:
    """
    Roots are standard Gaussian. A node with parents P is one draw of an
    n-dimensional normal with mean sum_p U_p x_p and covariance a weighted
    Gaussian kernel over the parent values plus noise_sigma^2 I.
    """
    rng = np.random.default_rng(config.seed)
    dag = random_dag(config.num_vars, config.edge_prob, rng)
    names = list(dag.nodes)
    values = np.zeros((config.n, config.num_vars))

    for j, name in enumerate(names):
        parent_idx = sorted(names.index(p) for p in dag.predecessors(name))
        if not parent_idx:
            values[:, j] = rng.standard_normal(config.n)
            continue
        parents = values[:, parent_idx]
        coeffs = rng.uniform(*config.coeff_range, size=len(parent_idx))
        weights = rng.uniform(*config.weight_range, size=len(parent_idx))
        (factor, _), jitter = cholesky_with_jitter(_parent_covariance(parents, weights, config))
        if jitter > 0:
            logger.debug(f"covariance of {name} needed jitter {jitter:.3g}")
        values[:, j] = parents @ coeffs + np.tril(factor) @ rng.standard_normal(config.n)

        peak = float(np.max(np.abs(values[:, j])))
        if not np.isfinite(peak) or peak > MAX_ABS_VALUE:
            raise GeneratedValuesOutOfRangeError(f"column {name} reached |x| = {peak:.3g}")

    return dag_to_cpdag(dag), DataMatrix(values=values, column_names=tuple(names))


def export_dataset(data: DataMatrix, path: Union[str, Path], metadata: Dict) -> Tuple[Path, Path]:
    """Write ``data`` as CSV with a sidecar ``.json`` holding ``metadata``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(data.values, columns=list(data.column_names)).to_csv(path, index=False)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    logger.info(f"wrote {data.n} rows to {path} with metadata {sidecar.name}")
    return path, sidecar


def pnl_metadata(config: PnlConfig) -> Dict:
    z = [f"Z{i + 1}" for i in range(config.cond_dim)]
    return {
        "generator": "pnl",
        "config": asdict(config),
        "seed": config.seed,
        "ground_truth": {"x": "X", "y": "Y", "z": z, "conditionally_independent": not config.dependent},
    }


def dag_metadata(config: RandomDagConfig, truth: Cpdag) -> Dict:
    return {
        "generator": "random_dag",
        "config": asdict(config),
        "seed": config.seed,
        "ground_truth": truth.to_dict(),
    }
