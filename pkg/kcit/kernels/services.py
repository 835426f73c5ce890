"""
Kernel construction service.

Standardized data matrices, Gaussian kernels and their centralized form,
bandwidth heuristics, and truncated spectral factorizations (the empirical
feature maps every test in the project is built on).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from kcit.exceptions import KcitError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_EIG_THRESHOLD = 1e-5
MEDIAN_SUBSAMPLE_CAP = 500
FALLBACK_WIDTH = 1.0
# relative spread below which a column counts as constant
CONSTANT_COLUMN_TOL = 1e-12

ColumnSelector = Union[int, str]


class KernelError(KcitError):
    """Base exception for kernel construction"""

    exit_code = 7


class NonFiniteInputError(KernelError):
    """Raised when raw data holds NaN or infinite entries"""

    exit_code = 5


class InsufficientSamplesError(KernelError):
    """Raised when fewer than two samples are available"""

    exit_code = 5


class UnknownColumnSelectorError(KernelError):
    """Raised when a column selector matches nothing"""

    exit_code = 4


class SpectralDecompositionError(KernelError, NumericalError):
    """Raised when the symmetric eigensolver fails"""

    exit_code = 7


class FactorizationError(KernelError, NumericalError):
    """Raised when a Cholesky factorization fails even after jitter"""

    exit_code = 7


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class DataMatrix:
    """
    n samples × d continuous variables.

    ``standardized`` is True when every column has been mapped to zero mean
    and unit sample variance (constant columns to all zeros).
    """

    values: np.ndarray
    column_names: Tuple[str, ...] = ()
    standardized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, np.newaxis]
        if values.ndim != 2:
            raise KernelError(f"data must be 2-D, got shape {values.shape}")
        if values.shape[0] < 2:
            raise InsufficientSamplesError(
                f"need at least 2 samples, got {values.shape[0]}"
            )
        if values.shape[1] < 1:
            raise KernelError("data needs at least one column")
        _check_finite(values, self.column_names)

        names = tuple(self.column_names) or tuple(
            f"V{j}" for j in range(values.shape[1])
        )
        if len(names) != values.shape[1]:
            raise KernelError(
                f"{len(names)} column names for {values.shape[1]} columns"
            )
        if len(set(names)) != len(names):
            raise KernelError(f"duplicate column names in {names}")

        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def column_index(self, selector: ColumnSelector) -> int:
        """Resolve a column by name first, then by 0-based position."""
        if isinstance(selector, str):
            if selector in self.column_names:
                return self.column_names.index(selector)
            if selector.isdigit():
                selector = int(selector)
            else:
                raise UnknownColumnSelectorError(f"no column named {selector!r}")
        if isinstance(selector, (int, np.integer)) and 0 <= selector < self.d:
            return int(selector)
        raise UnknownColumnSelectorError(f"column index {selector!r} out of range")

    def column_indices(self, selectors: Sequence[ColumnSelector]) -> Tuple[int, ...]:
        return tuple(self.column_index(s) for s in selectors)

    def columns(self, selectors: Sequence[ColumnSelector]) -> np.ndarray:
        """Return an n × len(selectors) copy of the selected columns."""
        return self.values[:, list(self.column_indices(selectors))]


def _check_finite(values: np.ndarray, column_names: Sequence[str] = ()) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        row, col = (int(i) for i in bad[0])
        name = column_names[col] if col < len(column_names) else f"#{col}"
        raise NonFiniteInputError(
            f"non-finite value {values[row, col]!r} at row {row}, column {name}"
            f" ({len(bad)} non-finite entries in total)"
        )


def standardize(raw, column_names: Sequence[str] = ()) -> DataMatrix:
    """
    Map every column to zero mean and unit sample variance (divisor n - 1).

    Constant columns become all zeros.
    """
    values = np.asarray(raw, dtype=float)
    if values.ndim == 1:
        values = values[:, np.newaxis]
    if values.shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 rows, got {values.shape[0]}")
    _check_finite(values, column_names)

    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1)
    constant = std <= CONSTANT_COLUMN_TOL * np.maximum(1.0, np.abs(mean))
    if constant.any():
        logger.debug(f"{int(constant.sum())} constant column(s) mapped to zeros")

    scaled = (values - mean) / np.where(constant, 1.0, std)
    scaled[:, constant] = 0.0
    return DataMatrix(values=scaled, column_names=tuple(column_names), standardized=True)


def median_width(
    data: DataMatrix,
    cols: Optional[Sequence[ColumnSelector]] = None,
    subsample_cap: int = MEDIAN_SUBSAMPLE_CAP,
) -> float:
    """
    Median heuristic: the median Euclidean distance between points, used
    directly as the Gaussian width. Only the first ``subsample_cap`` rows are
    used. Falls back to 1.0 when the median distance is 0.
    """
    x = data.values if cols is None else data.columns(cols)
    x = x[: max(2, subsample_cap)]
    width = float(np.median(pdist(x, "euclidean")))
    if not width > 0:
        logger.debug("median pairwise distance is 0, using fallback width")
        return FALLBACK_WIDTH
    return width


def empirical_width(n: int) -> float:
    """Sample-size rule for the shared width of the CI test kernels."""
    if n < 1:
        raise ValueError(f"sample size must be positive, got {n}")
    if n <= 200:
        return 0.8
    if n > 1200:
        return 0.3
    return 0.5


@dataclass(frozen=True)
class CenteredKernel:
    """An n × n centralized kernel matrix HKH with the width it was built with."""

    matrix: np.ndarray
    width: float = 1.0
    source_dims: int = 1

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise KernelError(f"kernel matrix must be square, got {matrix.shape}")
        object.__setattr__(self, "matrix", _frozen(matrix))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def trace(self) -> float:
        return float(np.trace(self.matrix))


@dataclass(frozen=True)
class EmpiricalFeatures:
    """
    Columns ψ_i = sqrt(λ_i) v_i of a kernel's eigendecomposition, eigenvalues
    descending, all at or above ``truncation``.
    """

    columns: np.ndarray
    eigenvalues: np.ndarray
    truncation: float = DEFAULT_EIG_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "columns", _frozen(self.columns))
        object.__setattr__(self, "eigenvalues", _frozen(self.eigenvalues))

    @property
    def m(self) -> int:
        return self.columns.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.columns @ self.columns.T


def gaussian_kernel_matrix(x: np.ndarray, width: float) -> np.ndarray:
    """Raw Gaussian kernel exp(-||x_i - x_j||^2 / (2 width^2))."""
    if not width > 0:
        raise ValueError(f"kernel width must be positive, got {width}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, np.newaxis]
    sq_dists = cdist(x, x, "sqeuclidean")
    return np.exp(-sq_dists / (2.0 * width**2))


def center_kernel(matrix: np.ndarray) -> np.ndarray:
    """Two-sided centering HKH with H = I - (1/n) 11^T, symmetrized."""
    matrix = np.asarray(matrix, dtype=float)
    row_mean = matrix.mean(axis=1, keepdims=True)
    col_mean = matrix.mean(axis=0, keepdims=True)
    centered = matrix - row_mean - col_mean + matrix.mean()
    return 0.5 * (centered + centered.T)


def gaussian_centered_kernel(
    data: DataMatrix, cols: Sequence[ColumnSelector], width: float
) -> CenteredKernel:
    """Centralized Gaussian kernel on the joint vector of the selected columns."""
    if len(cols) == 0:
        raise KernelError("kernel needs at least one column")
    raw = gaussian_kernel_matrix(data.columns(cols), width)
    return CenteredKernel(matrix=center_kernel(raw), width=float(width), source_dims=len(cols))


def spectral_features(
    kernel: Union[CenteredKernel, np.ndarray],
    threshold: float = DEFAULT_EIG_THRESHOLD,
) -> EmpiricalFeatures:
    """
    Truncated symmetric eigendecomposition.

    Negative eigenvalues from roundoff are clamped to 0; components below
    ``threshold`` (and exact zeros) are dropped.
    """
    matrix = kernel.matrix if isinstance(kernel, CenteredKernel) else np.asarray(kernel)
    try:
        eigvals, eigvecs = linalg.eigh(matrix, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        logger.error(f"eigendecomposition of {matrix.shape} matrix failed: {e}")
        raise SpectralDecompositionError(f"eigendecomposition failed: {e}") from e

    order = np.argsort(-eigvals, kind="stable")
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    keep = (eigvals >= threshold) & (eigvals > 0)
    kept = eigvals[keep]
    return EmpiricalFeatures(
        columns=eigvecs[:, keep] * np.sqrt(kept),
        eigenvalues=kept,
        truncation=float(threshold),
    )


def cholesky_with_jitter(
    matrix: np.ndarray, max_escalations: int = 3
) -> Tuple[Tuple[np.ndarray, bool], float]:
    """
    Cholesky factor for ``scipy.linalg.cho_solve``.

    On failure a diagonal jitter is added and grown ×10, at most
    ``max_escalations`` times. Returns the factor and the jitter used.
    """
    matrix = np.asarray(matrix, dtype=float)
    try:
        return linalg.cho_factor(matrix, lower=True), 0.0
    except (linalg.LinAlgError, ValueError) as first_error:
        error = first_error

    scale = max(float(np.mean(np.abs(np.diag(matrix)))), 1e-12)
    jitter = 1e-8 * scale
    identity = np.eye(matrix.shape[0])
    for attempt in range(1, max_escalations + 1):
        logger.warning(
            f"Cholesky failed ({error}); retry {attempt}/{max_escalations} with jitter {jitter:.3g}"
        )
        try:
            return linalg.cho_factor(matrix + jitter * identity, lower=True), jitter
        except (linalg.LinAlgError, ValueError) as e:
            error = e
            jitter *= 10.0

    raise FactorizationError(
        f"Cholesky factorization failed after {max_escalations} jitter escalations: {error}"
    )
