"""Finite-difference and instance builders shared by unit and acceptance tests."""

import numpy as np

from tnga import autonet, objectives

FD_STEP = 1e-5


def num_grad(f, x, h=FD_STEP):
    """Central differences of scalar f at array x (modified in place, restored)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        a = f()
        x[i] = old - h
        b = f()
        x[i] = old
        g[i] = (a - b) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def layer_instance(kind, rng):
    """Random small layer, input batch, mask and loss weights; returns worst relative error."""
    B, T = 2, int(rng.integers(2, 5))
    if kind == "gru":
        layer = autonet.GRULayer("g", 3, 4)
    elif kind == "fc":
        layer = autonet.DenseLayer("f", 3, 4, None)
    else:
        layer = autonet.DenseLayer("l", 3, 4, 0.01)
    p = {k: rng.normal(0, 0.5, size=s) for k, s in layer.param_shapes().items()}
    x = rng.normal(size=(B, T, 3))
    mask = np.ones((B, T))
    mask[1, T - 1:] = 0.0
    w = rng.normal(size=(B, T, 4)) * mask[..., None]

    def loss():
        out, _ = layer.forward(p, x, mask)
        return float(np.sum(out * w))

    _, cache = layer.forward(p, x, mask)
    dx, grads = layer.backward(p, w, cache)
    worst = rel_err(num_grad(loss, x), dx)
    for k in p:
        worst = max(worst, rel_err(num_grad(loss, p[k]), grads[k]))
    return worst


def ctc_instance(rng):
    C = 4
    blank = C - 1
    T = int(rng.integers(3, 7))
    L = int(rng.integers(1, 3))
    labels = rng.integers(0, blank, size=L).tolist()
    while objectives.ctc_min_frames(labels) > T:
        labels = labels[:-1]
    x = rng.normal(size=(T, C))
    _, g = objectives.ctc_loss(x, labels, blank)
    return rel_err(num_grad(lambda: objectives.ctc_loss(x, labels, blank)[0], x), g)


def tnga_instance(rng):
    H = rng.normal(size=(3, 4))
    G = rng.normal(size=(3, 4))
    _, g = objectives.tnga_loss(H, G)
    return rel_err(num_grad(lambda: objectives.tnga_loss(H, G)[0].total, G), g)


def brute_force_dtw(A, B):
    A, B = np.atleast_2d(A.T).T, np.atleast_2d(B.T).T
    n, m = len(A), len(B)
    best = np.inf

    def walk(i, j, cost):
        nonlocal best
        cost += np.linalg.norm(A[i] - B[j])
        if cost >= best:
            return
        if i == n - 1 and j == m - 1:
            best = cost
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, cost)
        if i + 1 < n:
            walk(i + 1, j, cost)
        if j + 1 < m:
            walk(i, j + 1, cost)

    walk(0, 0, 0.0)
    return best


# one line per acceptance criterion, echoed in the pytest terminal summary
ACCEPTANCE_LINES = []


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
