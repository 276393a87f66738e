"""Semi-implicit functional gradient flow samplers (SIFG, Ada-SIFG) with SVGD
and L2-GF baselines. Point sets are (n, d) arrays, one point per row."""

from ._core import (
    ConfigError,
    NumericalError,
    Sampler,
    ScoreNet,
    UsageError,
    __version__,
    amari_distance,
    analytic_smoothed_gaussian_score,
    compare,
    gmm_logp_score,
    ica_logp_score,
    ica_synthesize,
    knn_kl,
    median_bandwidth,
    mode_coverage,
    moment,
    monomial_gamma_logp_score,
    run_experiment,
    run_single,
    svgd_velocity,
)

__all__ = [
    "ConfigError",
    "NumericalError",
    "Sampler",
    "ScoreNet",
    "UsageError",
    "__version__",
    "amari_distance",
    "analytic_smoothed_gaussian_score",
    "compare",
    "gmm_logp_score",
    "ica_logp_score",
    "ica_synthesize",
    "knn_kl",
    "median_bandwidth",
    "mode_coverage",
    "moment",
    "monomial_gamma_logp_score",
    "run_experiment",
    "run_single",
    "svgd_velocity",
]
