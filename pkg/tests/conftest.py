import numpy as np
import pytest

from lgc.graph import Graph, build_support


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def line_graph(n, w=1.0):
    return Graph(n=n, edges=tuple((i, i + 1, w) for i in range(n - 1)))


def random_graph(rng, n, p=0.4):
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < p:
                edges.append((i, j, float(rng.uniform(0.5, 2.0))))
    if not edges:
        edges.append((0, 1, 1.0))
    return Graph(n=n, edges=tuple(edges))


def support_of(graph, kind="adjacency", order=2):
    return build_support(graph, kind, order)


def finite_difference(fn, arrays, h=1e-6):
    """Central-difference gradients of a scalar fn over a dict of arrays."""
    grads = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(arrays)
            flat[i] = orig - h
            lo = fn(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-7):
    for name in numeric:
        a = np.asarray(analytic[name])
        n = numeric[name]
        scale = np.maximum(np.abs(n), 1.0)
        np.testing.assert_allclose(
            a, n, rtol=rtol, atol=atol * np.max(scale),
            err_msg=f"gradient mismatch for {name}",
        )
