import numpy as np
import pytest

from mancount.synthcrowd import SceneParams, generate_splits


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stochastic(rng, n, m=None):
    """Row-stochastic n x m matrix with strictly positive entries."""
    m = n if m is None else m
    a = rng.uniform(0.0, 1.0, (n, m)) ** 3
    return a / a.sum(axis=1, keepdims=True)


def brute_cdf(c, direction):
    """Double-loop 2D CDF of a (W, H) map; O(W^2 H^2)."""
    w, h = c.shape
    out = np.zeros_like(c)
    for x in range(w):
        for y in range(h):
            total = 0.0
            for xj in range(w):
                for yj in range(h):
                    if direction == "bl" and xj <= x and yj <= y:
                        total += c[xj, yj]
                    elif direction == "ur" and xj >= x and yj >= y:
                        total += c[xj, yj]
            out[x, y] = total
    return out


def brute_region_maps(c1, c2, w, h):
    """Complete region maps for token-ordered coverage rows, via brute-force CDFs."""
    n = w * h
    out = np.zeros((n, w, h))
    for i in range(n):
        m1 = c1[i].reshape(h, w).T
        m2 = c2[i].reshape(h, w).T
        out[i] = brute_cdf(m1, "bl") * brute_cdf(m2, "ur") + brute_cdf(m1, "ur") * brute_cdf(m2, "bl")
    return out


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Six 32x32 training scenes and three test scenes."""
    root = tmp_path_factory.mktemp("tiny")
    generate_splits(root, 6, 3, SceneParams(size=32, n_min=2, n_max=8), seed=77)
    return root
