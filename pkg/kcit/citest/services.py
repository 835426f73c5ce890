"""
Kernel conditional independence test.

X and Y are tested for independence given Z by residualizing the kernels of
Ẍ = (X, Z) and Y on Z with kernel ridge regression and comparing the
residual kernels:

    R_Z = ε (K̃_Z + ε I)^{-1}
    K̃_{Ẍ|Z} = R_Z K̃_Ẍ R_Z,   K̃_{Y|Z} = R_Z K̃_Y R_Z
    T_CI = (1/n) Tr(K̃_{Ẍ|Z} K̃_{Y|Z})

Under the null T_CI follows (1/n) Σ λ_k z_k², λ_k the eigenvalues of the
Gram matrix of the stacked feature products w̃_t = ψ_t ⊗ φ_t.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from kcit.config import KciConfig
from kernels.services import (
    CenteredKernel,
    ColumnSelector,
    DataMatrix,
    EmpiricalFeatures,
    FactorizationError,
    center_kernel,
    cholesky_with_jitter,
    empirical_width,
    gaussian_centered_kernel,
    spectral_features,
)
from nulldist.services import METHOD_GAMMA, METHOD_MONTE_CARLO, NullSpec, null_p_values
from uitest.services import (
    KernelSizeMismatchError,
    UITestReport,
    clamp_trace,
    ensure_standardized,
    kernel_inner,
    primary_method,
    resolve_groups,
    ui_test,
)

logger = logging.getLogger(__name__)

# σ_Z = base width * 2^k for these k, crossed with the ε values below
GP_WIDTH_EXPONENTS = tuple(range(-3, 4))
GP_EPSILON_GRID = (1e-4, 1e-3, 1e-2, 1e-1)


@dataclass(frozen=True)
class ResidualKernels:
    kxz_given_z: CenteredKernel
    ky_given_z: CenteredKernel
    epsilon_f: float
    epsilon_g: float
    sigma_z_f: float
    sigma_z_g: float
    jitter: Tuple[float, float] = (0.0, 0.0)

    @property
    def n(self) -> int:
        return self.kxz_given_z.n


@dataclass
class HyperParams:
    """Widths and ridge parameters of one CI test."""

    base_width: float
    width_xz: float
    width_y: float
    epsilon_f: float
    epsilon_g: float
    sigma_z_f: float
    sigma_z_g: float
    gp_tuned: bool = False
    gp_fallback: bool = False
    log_marginal_likelihood_f: Optional[float] = None
    log_marginal_likelihood_g: Optional[float] = None


@dataclass(frozen=True)
class GpSelection:
    sigma: float
    epsilon: float
    log_marginal_likelihood: float


@dataclass
class CITestReport:
    statistic: float
    p_value: float
    method: str
    n: int
    cond_dim: int
    hyperparams: Dict[str, Any]
    retained_null_weights: Optional[int] = None
    retained_features: Tuple[int, int] = (0, 0)
    p_values: Dict[str, float] = field(default_factory=dict)
    null_mean: float = 0.0
    null_variance: float = 0.0
    degenerate: bool = False
    z_degenerate: bool = False
    jitter: Tuple[float, float] = (0.0, 0.0)
    x_cols: Tuple[str, ...] = ()
    y_cols: Tuple[str, ...] = ()
    z_cols: Tuple[str, ...] = ()
    timings: Dict[str, float] = field(default_factory=dict)
    test: str = "conditional"


def _residual_projector(kz: CenteredKernel, epsilon: float) -> Tuple[np.ndarray, float]:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    n = kz.n
    factor, jitter = cholesky_with_jitter(kz.matrix + epsilon * np.eye(n))
    projector = epsilon * linalg.cho_solve(factor, np.eye(n))
    return 0.5 * (projector + projector.T), jitter


def residual_projector(kz: CenteredKernel, epsilon: float) -> np.ndarray:
    """R_Z = ε (K̃_Z + ε I)^{-1}, symmetric with eigenvalues in (0, 1]."""
    return _residual_projector(kz, epsilon)[0]


def _sandwich(projector: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    product = projector @ matrix @ projector
    return 0.5 * (product + product.T)


def residualize(
    kxz: CenteredKernel,
    ky: CenteredKernel,
    kz: CenteredKernel,
    eps_f: float,
    eps_g: float,
    kz_g: Optional[CenteredKernel] = None,
) -> ResidualKernels:
    """
    Residual kernels R_f K̃_Ẍ R_f and R_g K̃_Y R_g.

    ``kz`` drives the Ẍ side; ``kz_g`` (default ``kz``) the Y side, so each
    regression can carry its own width and ε.
    """
    kz_g = kz_g or kz
    sizes = {kxz.n, ky.n, kz.n, kz_g.n}
    if len(sizes) != 1:
        raise KernelSizeMismatchError(f"kernel sizes differ: {sorted(sizes)}")

    r_f, jitter_f = _residual_projector(kz, eps_f)
    if kz_g is kz and eps_g == eps_f:
        r_g, jitter_g = r_f, jitter_f
    else:
        r_g, jitter_g = _residual_projector(kz_g, eps_g)

    return ResidualKernels(
        kxz_given_z=CenteredKernel(_sandwich(r_f, kxz.matrix), kxz.width, kxz.source_dims),
        ky_given_z=CenteredKernel(_sandwich(r_g, ky.matrix), ky.width, ky.source_dims),
        epsilon_f=float(eps_f),
        epsilon_g=float(eps_g),
        sigma_z_f=float(kz.width),
        sigma_z_g=float(kz_g.width),
        jitter=(jitter_f, jitter_g),
    )


def ci_statistic(res: ResidualKernels) -> float:
    """(1/n) Tr(K̃_{Ẍ|Z} K̃_{Y|Z})."""
    return clamp_trace(kernel_inner(res.kxz_given_z.matrix, res.ky_given_z.matrix) / res.n)


def stacked_features(
    psi: EmpiricalFeatures, phi: EmpiricalFeatures
) -> np.ndarray:
    """Row t is the flattened outer product of ψ_t and φ_t (n × m1·m2)."""
    n = psi.columns.shape[0]
    return (psi.columns[:, :, np.newaxis] * phi.columns[:, np.newaxis, :]).reshape(
        n, psi.m * phi.m
    )


def _smaller_gram(w: np.ndarray) -> np.ndarray:
    # both Gram orderings share the nonzero spectrum
    if w.shape[1] > w.shape[0]:
        return w @ w.T
    return w.T @ w


def _residual_features(res: ResidualKernels, threshold: float):
    psi = spectral_features(res.kxz_given_z, threshold)
    phi = spectral_features(res.ky_given_z, threshold)
    return psi, phi


def ci_null_spec(res: ResidualKernels, threshold: float = 1e-5) -> NullSpec:
    """Eigenvalues of the stacked-feature Gram matrix at or above ``threshold``, scale 1/n."""
    psi, phi = _residual_features(res, threshold)
    return _null_spec_from_stacked(stacked_features(psi, phi), threshold)


def _null_spec_from_stacked(w: np.ndarray, threshold: float) -> NullSpec:
    n = w.shape[0]
    if w.shape[1] == 0:
        return NullSpec(weights=[], scale=1.0 / n)
    eigvals = np.clip(linalg.eigvalsh(_smaller_gram(w)), 0.0, None)
    eigvals = np.sort(eigvals)[::-1]
    keep = (eigvals >= threshold) & (eigvals > 0)
    return NullSpec(weights=eigvals[keep], scale=1.0 / n)


def ci_null_moments(w: np.ndarray) -> Tuple[float, float]:
    """
    Null mean Tr(w̃w̃ᵀ)/n and variance 2 Tr[(w̃ᵀw̃)²]/n², straight from the
    stacked features without an eigendecomposition.
    """
    n = w.shape[0]
    if w.shape[1] == 0:
        return 0.0, 0.0
    gram = _smaller_gram(w)
    return float(np.sum(w * w)) / n, 2.0 * float(np.sum(gram * gram)) / n**2


def gp_log_marginal_likelihood(
    kz_matrix: np.ndarray, outputs: np.ndarray, epsilon: float
) -> float:
    """
    Summed GP log marginal likelihood of independent output columns sharing
    the covariance K̃_Z + ε I. Returns -inf when the covariance cannot be
    factorized.
    """
    n, outputs_count = outputs.shape
    try:
        factor, _ = cholesky_with_jitter(kz_matrix + epsilon * np.eye(n))
    except FactorizationError:
        return -np.inf
    alpha = linalg.cho_solve(factor, outputs)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return (
        -0.5 * float(np.sum(outputs * alpha))
        - 0.5 * outputs_count * log_det
        - 0.5 * n * outputs_count * np.log(2.0 * np.pi)
    )


def tune_regression_side(
    z: np.ndarray,
    outputs: np.ndarray,
    base_sigma: float,
    width_exponents: Sequence[int] = GP_WIDTH_EXPONENTS,
    epsilons: Sequence[float] = GP_EPSILON_GRID,
) -> Optional[GpSelection]:
    """
    Grid search of (σ_Z, ε) maximizing the GP marginal likelihood of
    ``outputs`` under a centered Gaussian kernel on ``z``. Returns None when
    every grid point is non-finite.
    """
    sq_dists = cdist(z, z, "sqeuclidean")
    best: Optional[GpSelection] = None
    for exponent in width_exponents:
        sigma = base_sigma * 2.0**exponent
        kz_matrix = center_kernel(np.exp(-sq_dists / (2.0 * sigma**2)))
        for epsilon in epsilons:
            lml = gp_log_marginal_likelihood(kz_matrix, outputs, epsilon)
            if not np.isfinite(lml):
                continue
            if best is None or lml > best.log_marginal_likelihood:
                best = GpSelection(sigma=sigma, epsilon=epsilon, log_marginal_likelihood=lml)
    return best


def _pseudo_outputs(kernel: CenteredKernel, config: KciConfig) -> np.ndarray:
    features = spectral_features(kernel, config.eig_threshold)
    return features.columns[:, : min(config.gp_max_outputs, features.m)]


def select_hyperparams(
    data: DataMatrix,
    xz_cols: Sequence[ColumnSelector],
    y_cols: Sequence[ColumnSelector],
    z_cols: Sequence[ColumnSelector],
    config: Optional[KciConfig] = None,
) -> HyperParams:
    """
    Kernel widths and ridge parameters for a CI test.

    Ẍ and Y share one width from the sample-size rule. With fewer than
    ``gp_threshold`` conditioning variables ε = ``config.epsilon`` and σ_Z is
    half that width; otherwise (σ_Z, ε) is chosen per side by GP marginal
    likelihood over a fixed grid.
    """
    config = config or KciConfig()
    if len(z_cols) == 0:
        raise ValueError("hyperparameter selection needs conditioning columns")

    base = empirical_width(data.n)
    z_dims = len(z_cols)
    default_sigma_z = 0.5 * base
    params = HyperParams(
        base_width=base,
        width_xz=base,
        width_y=base,
        epsilon_f=config.epsilon,
        epsilon_g=config.epsilon,
        sigma_z_f=default_sigma_z,
        sigma_z_g=default_sigma_z,
    )
    if z_dims < config.gp_threshold:
        return params

    z = data.columns(z_cols)
    sides = {
        "f": gaussian_centered_kernel(data, xz_cols, params.width_xz),
        "g": gaussian_centered_kernel(data, y_cols, params.width_y),
    }
    selections = {}
    for side, kernel in sides.items():
        outputs = _pseudo_outputs(kernel, config)
        selections[side] = tune_regression_side(z, outputs, base) if outputs.shape[1] else None

    if any(selection is None for selection in selections.values()):
        logger.warning("GP marginal likelihood not finite on the grid; using default ε and σ_Z")
        params.gp_fallback = True
        return params

    params.gp_tuned = True
    params.sigma_z_f, params.epsilon_f = selections["f"].sigma, selections["f"].epsilon
    params.sigma_z_g, params.epsilon_g = selections["g"].sigma, selections["g"].epsilon
    params.log_marginal_likelihood_f = selections["f"].log_marginal_likelihood
    params.log_marginal_likelihood_g = selections["g"].log_marginal_likelihood
    logger.debug(
        f"GP selection: f=(σ={params.sigma_z_f:.3g}, ε={params.epsilon_f:g}) "
        f"g=(σ={params.sigma_z_g:.3g}, ε={params.epsilon_g:g})"
    )
    return params


def ci_test(
    data: DataMatrix,
    x_cols: Sequence[ColumnSelector],
    y_cols: Sequence[ColumnSelector],
    z_cols: Sequence[ColumnSelector],
    config: Optional[KciConfig] = None,
) -> Union[CITestReport, UITestReport]:
    """
    Test X independent of Y given Z. An empty Z runs the unconditional test
    and returns its report unchanged.
    """
    config = config or KciConfig()
    x_idx, y_idx, z_idx = resolve_groups(data, x_cols, y_cols, z_cols, allow_empty_last=True)
    if not z_idx:
        return ui_test(data, x_cols, y_cols, config)

    started = time.perf_counter()
    data = ensure_standardized(data)
    n = data.n
    xz_idx = x_idx + z_idx

    z_degenerate = bool(np.all(data.values[:, list(z_idx)] == 0.0))
    if z_degenerate:
        logger.warning("all conditioning columns are constant; residualization is the identity")

    params = select_hyperparams(data, xz_idx, y_idx, z_idx, config)
    kxz = gaussian_centered_kernel(data, xz_idx, params.width_xz)
    ky = gaussian_centered_kernel(data, y_idx, params.width_y)
    kz_f = gaussian_centered_kernel(data, z_idx, params.sigma_z_f)
    kz_g = (
        kz_f
        if params.sigma_z_g == params.sigma_z_f
        else gaussian_centered_kernel(data, z_idx, params.sigma_z_g)
    )
    res = residualize(kxz, ky, kz_f, params.epsilon_f, params.epsilon_g, kz_g=kz_g)
    residualized = time.perf_counter()

    psi, phi = _residual_features(res, config.eig_threshold)
    report = CITestReport(
        statistic=0.0,
        p_value=1.0,
        method=METHOD_GAMMA if config.wants_gamma else METHOD_MONTE_CARLO,
        n=n,
        cond_dim=len(z_idx),
        hyperparams=asdict(params),
        retained_features=(psi.m, phi.m),
        z_degenerate=z_degenerate,
        jitter=res.jitter,
        x_cols=tuple(data.column_names[i] for i in x_idx),
        y_cols=tuple(data.column_names[i] for i in y_idx),
        z_cols=tuple(data.column_names[i] for i in z_idx),
    )

    if psi.m == 0 or phi.m == 0:
        logger.warning(f"degenerate residual kernel (features {psi.m}/{phi.m}); p-value 1")
        report.degenerate = True
        report.p_values = {
            name: 1.0
            for name, wanted in ((METHOD_GAMMA, config.wants_gamma), (METHOD_MONTE_CARLO, config.wants_mc))
            if wanted
        }
        report.timings = {"residualize": residualized - started, "total": time.perf_counter() - started}
        return report

    report.statistic = ci_statistic(res)
    w = stacked_features(psi, phi)
    report.null_mean, report.null_variance = ci_null_moments(w)
    spec = None
    if config.wants_mc:
        spec = _null_spec_from_stacked(w, config.eig_threshold)
        report.retained_null_weights = spec.size
    report.p_values = null_p_values(
        report.statistic, config, spec=spec, moments=(report.null_mean, report.null_variance)
    )
    report.method = primary_method(report.p_values)
    report.p_value = report.p_values[report.method]
    report.timings = {"residualize": residualized - started, "total": time.perf_counter() - started}

    logger.debug(
        f"CI test n={n} D={len(z_idx)} T={report.statistic:.6g} p={report.p_value:.4g} "
        f"features=({psi.m}, {phi.m})"
    )
    return report
