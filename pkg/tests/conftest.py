import time

import pytest

from robustagg.distsim import (
    ContaminationKind,
    ContaminationSpec,
    StudyConfig,
    run_study,
)


@pytest.fixture(scope="session")
def clean_study():
    """Desk-scale contamination-free study (logistic, (2,1), K=20, n=1000)."""
    started = time.perf_counter()
    metrics = run_study(StudyConfig())
    metrics.runtime_seconds = time.perf_counter() - started
    return metrics


@pytest.fixture(scope="session")
def omniscient_study():
    """Same design with floor(20^(1/4)) = 2 servers transmitting (-1e6, -1e6)."""
    started = time.perf_counter()
    metrics = run_study(
        StudyConfig(contamination=ContaminationSpec(kind=ContaminationKind.OMNISCIENT))
    )
    metrics.runtime_seconds = time.perf_counter() - started
    return metrics
