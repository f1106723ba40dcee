import numpy as np
import pytest

from occluded_reid import numgrad as ng
from occluded_reid.descriptor import DescriptorSet, RegionMap


def randomize(params: ng.ParamSet, rng, prefix: str = "", scale: float = 0.3) -> ng.ParamSet:
    """Replace every matching parameter with Gaussian noise (identity inits become non-trivial)."""
    for name in params.names(prefix):
        p = params.params[name]
        p.value = rng.normal(0.0, scale, size=p.value.shape)
    return params


def random_set(rng, n, c, n_ids=None, occlude=0.0, regions=RegionMap()):
    n_ids = n_ids or max(2, n // 2)
    ids = np.arange(n) % n_ids
    cams = rng.integers(0, 2, size=n)
    kp = rng.uniform(0.5, 1.0, size=(n, 12))
    hit = rng.random(n) < occlude
    kp[hit, 6:] *= 0.05
    parts = rng.normal(size=(n, 4, c))
    return DescriptorSet.from_arrays(ids, cams, kp, parts, regions).thresholded(0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
