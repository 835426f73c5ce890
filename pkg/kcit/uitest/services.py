"""
Unconditional kernel independence test.

T_UI = (1/n) Tr(K̃_X K̃_Y), with a null distribution built from the products
of the two kernels' eigenvalues.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from kcit.config import KciConfig
from kcit.exceptions import KcitError
from kernels.services import (
    CenteredKernel,
    ColumnSelector,
    DataMatrix,
    gaussian_centered_kernel,
    median_width,
    spectral_features,
    standardize,
)
from nulldist.services import (
    METHOD_GAMMA,
    METHOD_MONTE_CARLO,
    NullSpec,
    null_mean_var,
    null_p_values,
)

logger = logging.getLogger(__name__)

# trace statistics above -NEGATIVE_TRACE_TOL are clamped to 0
NEGATIVE_TRACE_TOL = 1e-10


class IndependenceTestError(KcitError):
    """Base Exception for the independence tests"""

    exit_code = 6


class ColumnOverlapError(IndependenceTestError):
    """Raised when variable groups share columns or a required group is empty"""

    pass


class KernelSizeMismatchError(IndependenceTestError):
    """Raised when two kernels were built on different sample sizes"""

    exit_code = 1


@dataclass
class UITestReport:
    statistic: float
    p_value: float
    method: str
    n: int
    widths: Tuple[float, float]
    retained_eigs: Tuple[int, int]
    p_values: Dict[str, float] = field(default_factory=dict)
    null_mean: float = 0.0
    null_variance: float = 0.0
    degenerate: bool = False
    x_cols: Tuple[str, ...] = ()
    y_cols: Tuple[str, ...] = ()
    timings: Dict[str, float] = field(default_factory=dict)
    test: str = "unconditional"


def clamp_trace(value: float) -> float:
    """Zero out roundoff negatives of a trace of PSD products."""
    if -NEGATIVE_TRACE_TOL < value < 0:
        return 0.0
    return float(value)


def kernel_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Tr(AB) for symmetric A and B, as the Frobenius inner product."""
    return float(np.sum(a * b))


def ui_statistic(kx: CenteredKernel, ky: CenteredKernel) -> float:
    """(1/n) Tr(K̃_X K̃_Y)."""
    if kx.n != ky.n:
        raise KernelSizeMismatchError(f"kernel sizes differ: {kx.n} vs {ky.n}")
    return clamp_trace(kernel_inner(kx.matrix, ky.matrix) / kx.n)


def ui_null_spec(
    kx: CenteredKernel, ky: CenteredKernel, threshold: float = 1e-5
) -> NullSpec:
    """
    Weights λ_x,i λ_y,j over the retained spectra of both kernels, scale 1/n^2.
    """
    if kx.n != ky.n:
        raise KernelSizeMismatchError(f"kernel sizes differ: {kx.n} vs {ky.n}")
    eig_x = spectral_features(kx, threshold).eigenvalues
    eig_y = spectral_features(ky, threshold).eigenvalues
    return eigenvalue_product_spec(eig_x, eig_y, kx.n)


def eigenvalue_product_spec(eig_x: np.ndarray, eig_y: np.ndarray, n: int) -> NullSpec:
    return NullSpec(weights=np.outer(eig_x, eig_y).ravel(), scale=1.0 / n**2)


def resolve_groups(
    data: DataMatrix, *groups: Sequence[ColumnSelector], allow_empty_last: bool = False
) -> Tuple[Tuple[int, ...], ...]:
    """Resolve column groups to indices and check they are pairwise disjoint."""
    resolved = tuple(data.column_indices(group) for group in groups)
    for position, indices in enumerate(resolved):
        is_last = position == len(resolved) - 1
        if not indices and not (allow_empty_last and is_last):
            raise ColumnOverlapError(f"column group {position + 1} is empty")
        if len(set(indices)) != len(indices):
            raise ColumnOverlapError(f"column group {position + 1} repeats a column")

    seen = set()
    for indices in resolved:
        overlap = seen.intersection(indices)
        if overlap:
            names = sorted(data.column_names[i] for i in overlap)
            raise ColumnOverlapError(f"columns used in more than one group: {names}")
        seen.update(indices)
    return resolved


def ensure_standardized(data: DataMatrix) -> DataMatrix:
    if data.standardized:
        return data
    return standardize(data.values, data.column_names)


def primary_method(p_values: Dict[str, float]) -> str:
    """The Gamma p-value leads whenever it was computed."""
    return METHOD_GAMMA if METHOD_GAMMA in p_values else METHOD_MONTE_CARLO


def ui_test(
    data: DataMatrix,
    x_cols: Sequence[ColumnSelector],
    y_cols: Sequence[ColumnSelector],
    config: Optional[KciConfig] = None,
) -> UITestReport:
    """
    Test X independent of Y with median-heuristic Gaussian kernels.

    Constant X or Y gives statistic 0, p-value 1 and ``degenerate=True``.
    """
    config = config or KciConfig()
    started = time.perf_counter()

    x_idx, y_idx = resolve_groups(data, x_cols, y_cols)
    data = ensure_standardized(data)
    n = data.n

    width_x = median_width(data, x_idx, config.median_subsample_cap)
    width_y = median_width(data, y_idx, config.median_subsample_cap)
    kx = gaussian_centered_kernel(data, x_idx, width_x)
    ky = gaussian_centered_kernel(data, y_idx, width_y)
    eig_x = spectral_features(kx, config.eig_threshold).eigenvalues
    eig_y = spectral_features(ky, config.eig_threshold).eigenvalues
    kernels_done = time.perf_counter()

    report = UITestReport(
        statistic=0.0,
        p_value=1.0,
        method=METHOD_GAMMA if config.wants_gamma else METHOD_MONTE_CARLO,
        n=n,
        widths=(width_x, width_y),
        retained_eigs=(eig_x.size, eig_y.size),
        x_cols=tuple(data.column_names[i] for i in x_idx),
        y_cols=tuple(data.column_names[i] for i in y_idx),
    )

    if eig_x.size == 0 or eig_y.size == 0:
        logger.warning(
            f"degenerate kernel (retained eigenvalues {eig_x.size}/{eig_y.size}); "
            "reporting p-value 1"
        )
        report.degenerate = True
        report.p_values = {name: 1.0 for name in _requested(config)}
        report.timings = {"kernels": kernels_done - started, "total": time.perf_counter() - started}
        return report

    report.statistic = ui_statistic(kx, ky)
    spec = eigenvalue_product_spec(eig_x, eig_y, n)
    report.null_mean, report.null_variance = null_mean_var(spec)
    report.p_values = null_p_values(report.statistic, config, spec=spec)
    report.method = primary_method(report.p_values)
    report.p_value = report.p_values[report.method]
    report.timings = {"kernels": kernels_done - started, "total": time.perf_counter() - started}

    logger.debug(
        f"UI test n={n} T={report.statistic:.6g} p={report.p_value:.4g} "
        f"widths=({width_x:.3g}, {width_y:.3g}) weights={spec.size}"
    )
    return report


def _requested(config: KciConfig):
    methods = []
    if config.wants_gamma:
        methods.append(METHOD_GAMMA)
    if config.wants_mc:
        methods.append(METHOD_MONTE_CARLO)
    return methods
