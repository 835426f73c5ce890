"""
Typed view of ``settings.KCI_CONFIG``.

Services take a ``KciConfig`` explicitly so they stay pure and can run in
worker processes without touching Django settings.
"""

from dataclasses import dataclass, replace

METHOD_GAMMA = "gamma"
METHOD_MC = "mc"
METHOD_BOTH = "both"
METHODS = (METHOD_GAMMA, METHOD_MC, METHOD_BOTH)


@dataclass(frozen=True)
class KciConfig:
    method: str = METHOD_GAMMA
    mc_draws: int = 5000
    seed: int = 0
    alpha: float = 0.05
    eig_threshold: float = 1e-5
    median_subsample_cap: int = 500
    gp_threshold: int = 3
    epsilon: float = 1e-3
    gp_max_outputs: int = 8
    workers: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be positive")
        if self.workers < 1:
            raise ValueError("workers must be positive")

    @property
    def wants_gamma(self) -> bool:
        return self.method in (METHOD_GAMMA, METHOD_BOTH)

    @property
    def wants_mc(self) -> bool:
        return self.method in (METHOD_MC, METHOD_BOTH)

    def with_overrides(self, **overrides) -> "KciConfig":
        """Return a copy with the non-None overrides applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def from_settings(cls, **overrides) -> "KciConfig":
        """Build from ``settings.KCI_CONFIG``, then apply overrides."""
        from django.conf import settings

        raw = settings.KCI_CONFIG
        config = cls(
            method=raw.get("METHOD", METHOD_GAMMA),
            mc_draws=raw.get("MC_DRAWS", 5000),
            seed=raw.get("SEED", 0),
            alpha=raw.get("ALPHA", 0.05),
            eig_threshold=raw.get("EIG_THRESHOLD", 1e-5),
            median_subsample_cap=raw.get("MEDIAN_SUBSAMPLE_CAP", 500),
            gp_threshold=raw.get("GP_THRESHOLD", 3),
            epsilon=raw.get("EPSILON", 1e-3),
            gp_max_outputs=raw.get("GP_MAX_OUTPUTS", 8),
            workers=raw.get("WORKERS", 1),
        )
        return config.with_overrides(**overrides)
