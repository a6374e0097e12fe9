import numpy as np
import pytest

from maxglavit import tensor as T
from maxglavit.dataio import CLASSES, SPLITS, write_ppm
from maxglavit.layers import make_rng


def f64(rng, *shape, requires_grad=False, scale=1.0):
    return T.Tensor(scale * rng.standard_normal(shape), requires_grad=requires_grad)


def randomize(module, seed=0, scale=0.5):
    """Redraw every parameter from N(0, scale) so no branch sits at a degenerate init."""
    rng = make_rng(seed, 1234)
    for p in module.parameters():
        p.data = scale * rng.standard_normal(p.shape)
    return module


def weighted_sum(y, seed=0):
    """Scalar probe sum(y * w) with a fixed random w, so no gradient is trivially uniform."""
    w = T.Tensor(make_rng(seed, 77).standard_normal(y.shape))
    return T.sum(T.mul(y, w))


def make_tree(root, counts, size=4):
    """``counts[split][cls]`` tiny PPM files with a colour derived from their index."""
    for split, per in counts.items():
        for cls, n in per.items():
            d = root / split / cls
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                write_ppm(d / f"img{i:04d}.ppm", np.full((size, size, 3), (i * 37) % 256, np.uint8))
    return root


def uniform_counts(n):
    return {s: {c: n for c in CLASSES} for s in SPLITS}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
