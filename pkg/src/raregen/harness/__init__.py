from raregen.harness.metrics import (
    MetricsReport,
    SignTest,
    frechet_distance,
    mean_pairwise_distance,
    metrics_report,
    pearson,
    sign_test,
)

__all__ = [
    "MetricsReport",
    "SignTest",
    "frechet_distance",
    "mean_pairwise_distance",
    "metrics_report",
    "pearson",
    "sign_test",
]
