"""Shared test oracles and utilities."""

from __future__ import annotations

import numpy as np

from blf.tensor import Parameter


def finite_difference_check(
    make_loss,
    params: list[Parameter],
    rng: np.random.Generator,
    h: float = 1e-4,
    rel_tol: float = 1e-3,
    max_entries_per_param: int = 24,
) -> None:
    """Central finite differences vs analytic grads, in f64.

    `make_loss()` must rebuild the scalar loss from the params' current data.
    Checks a fixed-rng sample of entries in every parameter.
    """
    for p in params:
        assert p.dtype == np.float64, "gradient checks run in f64"
    loss = make_loss()
    for p in params:
        p.grad[...] = 0.0
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries_per_param:
            entries = np.arange(n)
        else:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = analytic[p.name].reshape(-1)[i]
            denom = max(abs(an), abs(fd), 1e-6)
            rel = abs(an - fd) / denom
            assert rel <= rel_tol, (
                f"grad mismatch at {p.name}[{i}]: analytic {an:.6g} vs fd {fd:.6g} (rel {rel:.3g})"
            )


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out
