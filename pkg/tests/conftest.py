import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def ball(shape, radius, center=None):
    shape = tuple(shape)
    c = (np.asarray(shape, dtype=float) - 1) / 2 if center is None else np.asarray(center, dtype=float)
    g = np.indices(shape, dtype=float)
    d2 = sum((g[a] - c[a]) ** 2 for a in range(3))
    return d2 <= radius * radius


def brute_signed_distance(m):
    """Nearest opposite-label voxel center by exhaustive search."""
    pts = np.argwhere(np.ones(m.shape, dtype=bool))
    flat = m.ravel()
    inside, outside = pts[flat], pts[~flat]
    out = np.empty(len(pts))
    for r, p in enumerate(pts):
        other = outside if flat[r] else inside
        d = np.sqrt(((other - p) ** 2).sum(axis=1)).min()
        out[r] = d if flat[r] else -d
    return out.reshape(m.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
