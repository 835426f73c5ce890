"""
CSV ingestion and the two reproduction experiments.

``run_calibration`` estimates Type I / Type II error rates of the
conditional test on post-nonlinear data; ``run_dag_bench`` counts how often
PC recovers the Markov equivalence class of random DAGs.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from causal.services import (
    ORACLE_KCI,
    ORACLE_PARTIAL_CORRELATION,
    CiOracle,
    markov_equivalent,
    run_pc,
)
from citest.services import ci_test
from kcit.config import METHOD_GAMMA, METHOD_MC, KciConfig
from kcit.exceptions import KcitError
from kernels.services import DataMatrix, standardize
from synth.services import (
    PNL_CASES,
    WEIGHTING_INVERSE_LENGTH,
    PnlConfig,
    RandomDagConfig,
    gen_pnl,
    gen_random_dag_data,
)

logger = logging.getLogger(__name__)

CALIBRATION_METHODS = (METHOD_GAMMA, METHOD_MC)

ORACLE_ALIASES = {
    "kci": ORACLE_KCI,
    "pcorr": ORACLE_PARTIAL_CORRELATION,
    ORACLE_PARTIAL_CORRELATION: ORACLE_PARTIAL_CORRELATION,
}

Selector = Union[str, int]


class ExperimentError(KcitError):
    """Base Exception for ingestion and experiment runs"""

    exit_code = 1


class InputFileNotFoundError(ExperimentError):
    exit_code = 3


class UnknownColumnError(ExperimentError):
    exit_code = 4


class EmptyDatasetError(ExperimentError):
    exit_code = 5


class InvalidRunConfigError(ExperimentError):
    exit_code = 6


# ----------------------------------------------------------------------------
# CSV ingestion
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvDataset:
    data: DataMatrix
    dropped_rows: int
    source: str
    header: Tuple[str, ...] = ()

    def resolve(self, selectors: Sequence[Selector]) -> List[str]:
        return [resolve_column(self.header, s) for s in selectors]


def resolve_column(columns: Sequence[str], selector: Selector) -> str:
    """Header name first, then 0-based index."""
    if isinstance(selector, str) and selector in columns:
        return selector
    if isinstance(selector, str) and selector.strip().isdigit():
        selector = int(selector)
    if isinstance(selector, (int, np.integer)) and 0 <= selector < len(columns):
        return columns[selector]
    raise UnknownColumnError(f"unknown column {selector!r}; available: {list(columns)}")


def ingest_csv(path: Union[str, Path], selectors: Optional[Sequence[Selector]] = None) -> CsvDataset:
    """
    Read a header-row CSV, keep the selected columns (all by default) and
    standardize them. Rows with a missing or non-numeric selected value are
    dropped and counted.
    """
    path = Path(path)
    if not path.is_file():
        raise InputFileNotFoundError(f"input file not found: {path}")

    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise EmptyDatasetError(f"{path} has no header or rows") from e
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise InvalidRunConfigError(f"could not parse {path}: {e}") from e

    columns = [str(c) for c in frame.columns]
    frame.columns = columns
    names: List[str] = []
    for selector in selectors if selectors is not None else columns:
        name = resolve_column(columns, selector)
        if name not in names:
            names.append(name)

    selected = frame[names].apply(pd.to_numeric, errors="coerce")
    selected = selected.replace([np.inf, -np.inf], np.nan)
    kept = selected.dropna()
    dropped = len(selected) - len(kept)
    if dropped:
        logger.warning(f"dropped {dropped} of {len(selected)} rows of {path.name} with missing values")
    if len(kept) < 2:
        raise EmptyDatasetError(f"{path} has {len(kept)} usable rows after dropping {dropped}")

    data = standardize(kept.to_numpy(dtype=float), names)
    logger.info(f"loaded {data.n} rows x {data.d} columns from {path}")
    return CsvDataset(data=data, dropped_rows=dropped, source=str(path), header=tuple(columns))


def _derived_seed(root: int, *key: int) -> int:
    return int(np.random.SeedSequence([root, *key]).generate_state(1)[0])


def _map(function, jobs: List, workers: int) -> List:
    """Ordered map, across processes when ``workers`` > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [function(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, jobs))


# ----------------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationConfig:
    cases: Tuple[str, ...] = PNL_CASES
    cond_dims: Tuple[int, ...] = (1, 2, 3, 4, 5)
    sample_sizes: Tuple[int, ...] = (200, 400)
    alphas: Tuple[float, ...] = (0.01, 0.05)
    methods: Tuple[str, ...] = ("gamma",)
    replications: int = 1000
    seed: int = 0
    workers: int = 1
    kci: KciConfig = field(default_factory=KciConfig)

    def __post_init__(self):
        if self.replications < 1:
            raise InvalidRunConfigError(f"replications must be at least 1, got {self.replications}")
        for name in ("cases", "cond_dims", "sample_sizes", "alphas", "methods"):
            if not getattr(self, name):
                raise InvalidRunConfigError(f"{name} must not be empty")
        if any(case not in PNL_CASES for case in self.cases):
            raise InvalidRunConfigError(f"cases must be drawn from {PNL_CASES}")
        if any(not 0 < a < 1 for a in self.alphas):
            raise InvalidRunConfigError("every alpha must lie in (0, 1)")
        if any(d < 1 for d in self.cond_dims) or any(n < 10 for n in self.sample_sizes):
            raise InvalidRunConfigError("cond_dims must be >= 1 and sample_sizes >= 10")
        # each row is one method's rejection rate, so "both" is not a row label
        if any(m not in CALIBRATION_METHODS for m in self.methods):
            raise InvalidRunConfigError(f"methods must be drawn from {CALIBRATION_METHODS}")
        if self.workers < 1:
            raise InvalidRunConfigError("workers must be positive")


def _calibration_replicate(job) -> Tuple[float, float]:
    pnl, kci = job
    data = gen_pnl(pnl)
    z_cols = [f"Z{i + 1}" for i in range(pnl.cond_dim)]
    started = time.perf_counter()
    report = ci_test(data, ["X"], ["Y"], z_cols, kci)
    return report.p_value, time.perf_counter() - started


def run_calibration(config: CalibrationConfig) -> pd.DataFrame:
    """
    One row per (case, cond_dim, n, alpha, method): the empirical Type I
    error (rejections on conditionally independent data), the Type II
    error (acceptances on data with a shared variable) and the mean
    seconds per test.
    """
    rows = []
    grid = product(config.cases, config.cond_dims, config.sample_sizes, config.methods)
    for case, cond_dim, n, method in grid:
        case_idx = PNL_CASES.index(case)
        kci = config.kci.with_overrides(method=method)
        p_values: Dict[bool, np.ndarray] = {}
        seconds: List[float] = []
        for dependent in (False, True):
            jobs = []
            for rep in range(config.replications):
                seed = _derived_seed(config.seed, case_idx, cond_dim, n, int(dependent), rep)
                pnl = PnlConfig(case=case, dependent=dependent, cond_dim=cond_dim, n=n, seed=seed)
                jobs.append((pnl, kci.with_overrides(seed=seed, workers=1)))
            results = _map(_calibration_replicate, jobs, config.workers)
            p_values[dependent] = np.array([p for p, _ in results])
            seconds += [s for _, s in results]

        for alpha in config.alphas:
            rows.append(
                {
                    "case": case,
                    "cond_dim": cond_dim,
                    "n": n,
                    "alpha": alpha,
                    "method": method,
                    "replications": config.replications,
                    "type_i_error": float(np.mean(p_values[False] < alpha)),
                    "type_ii_error": float(np.mean(p_values[True] >= alpha)),
                    "mean_seconds": float(np.mean(seconds)),
                }
            )
        logger.info(f"calibrated case={case} D={cond_dim} n={n} method={method}")
    return pd.DataFrame(rows)


# ----------------------------------------------------------------------------
# DAG recovery benchmark
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DagBenchConfig:
    num_vars: int = 4
    edge_prob: float = 0.5
    sample_sizes: Tuple[int, ...] = (100, 300, 500, 700)
    num_dags: int = 100
    alpha: float = 0.01
    oracles: Tuple[str, ...] = ("kci", "pcorr")
    seed: int = 0
    workers: int = 1
    max_cond: Optional[int] = None
    kernel_weighting: str = WEIGHTING_INVERSE_LENGTH
    kci: KciConfig = field(default_factory=KciConfig)

    def __post_init__(self):
        if self.num_vars < 2:
            raise InvalidRunConfigError(f"num_vars must be at least 2, got {self.num_vars}")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise InvalidRunConfigError(f"edge_prob must lie in [0, 1], got {self.edge_prob}")
        if self.num_dags < 1 or not self.sample_sizes or not self.oracles:
            raise InvalidRunConfigError("num_dags, sample_sizes and oracles must be non-empty")
        if not 0 < self.alpha < 1:
            raise InvalidRunConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        unknown = [o for o in self.oracles if o not in ORACLE_ALIASES]
        if unknown:
            raise InvalidRunConfigError(f"unknown oracles {unknown}; use kci or pcorr")
        if self.workers < 1:
            raise InvalidRunConfigError("workers must be positive")


def _dag_bench_replicate(job) -> Dict[str, bool]:
    dag_config, oracles, max_cond = job
    truth, data = gen_random_dag_data(dag_config)
    data = standardize(data.values, data.column_names)
    recovered = {}
    for name, oracle in oracles:
        recovered[name] = markov_equivalent(run_pc(data, oracle, max_cond=max_cond), truth)
    return recovered


def run_dag_bench(config: DagBenchConfig) -> Tuple[pd.DataFrame, Dict]:
    """
    Recovery fraction per (n, oracle) plus a per-oracle summary holding the
    Spearman correlation of recovery rate against n and a
    ``nondecreasing_trend`` flag.
    """
    oracles = [
        (name, CiOracle(kind=ORACLE_ALIASES[name], alpha=config.alpha, config=config.kci))
        for name in config.oracles
    ]
    rows = []
    for n in config.sample_sizes:
        jobs = []
        for index in range(config.num_dags):
            dag_config = RandomDagConfig(
                num_vars=config.num_vars,
                edge_prob=config.edge_prob,
                n=n,
                seed=_derived_seed(config.seed, n, index),
                kernel_weighting=config.kernel_weighting,
            )
            jobs.append((dag_config, oracles, config.max_cond))
        results = _map(_dag_bench_replicate, jobs, config.workers)
        for name, _ in oracles:
            hits = sum(result[name] for result in results)
            rows.append(
                {
                    "n": n,
                    "oracle": name,
                    "num_dags": config.num_dags,
                    "recovered": hits,
                    "recovery_rate": hits / config.num_dags,
                }
            )
        rates = ", ".join(f"{r['oracle']}={r['recovery_rate']:.2f}" for r in rows[-len(oracles) :])
        logger.info(f"dag bench n={n}: {rates}")

    table = pd.DataFrame(rows)
    return table, summarize_trend(table)


def summarize_trend(table: pd.DataFrame) -> Dict:
    summary = {}
    for oracle, group in table.groupby("oracle", sort=False):
        rho = None
        if group["n"].nunique() > 1 and group["recovery_rate"].nunique() > 1:
            rho = float(stats.spearmanr(group["n"], group["recovery_rate"])[0])
        summary[oracle] = {
            "spearman_rho": rho,
            "nondecreasing_trend": rho is not None and rho > 0,
            "mean_recovery_rate": float(group["recovery_rate"].mean()),
        }
    return summary
