"""Shared oracles for the test suite."""

import numpy as np

from hal import nn


def fd_gradients(f, params, h=1e-5):
    """Central finite differences of scalar ``f(params)`` for every entry."""
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-6):
    """Largest entrywise |a-b| / max(|a|, |b|, floor) across tensor lists."""
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def random_tiny_spec(seed):
    """Random small network (dense or conv) with input batch and output weights."""
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        n_in = int(rng.integers(2, 7))
        h = int(rng.integers(2, 6))
        k = int(rng.integers(2, 5))
        layers = [nn.dense(n_in, h), nn.relu(), nn.dropout(float(rng.uniform(0, 0.5))), nn.dense(h, k)]
        if rng.random() < 0.5:
            layers.append(nn.softmax_layer())
        spec = nn.ModelSpec((n_in,), tuple(layers), embedding=0)
        x = rng.normal(size=(3, n_in))
    else:
        c = int(rng.integers(1, 3))
        size = int(rng.integers(5, 8))
        f = int(rng.integers(1, 4))
        kk = int(rng.integers(2, 4))
        pad = int(rng.integers(0, 2))
        conv_out = size + 2 * pad - kk + 1
        pooled = conv_out // 2
        k = int(rng.integers(2, 4))
        spec = nn.ModelSpec(
            (c, size, size),
            (nn.conv2d(c, f, kk, pad=pad), nn.relu(), nn.maxpool(2),
             nn.dense(f * pooled * pooled, 4), nn.dropout(0.2), nn.dense(4, k), nn.softmax_layer()),
            embedding=3,
        )
        x = rng.normal(size=(2, c, size, size))
    params = [p + 0.1 * rng.normal(size=p.shape) for p in nn.init_params(spec, seed)]
    w = rng.normal(size=(x.shape[0], spec.output_size))
    assert spec.param_count() <= 1000
    return spec, params, x, w
