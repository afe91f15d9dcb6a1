"""Shared test helpers: finite-difference oracle and config builders."""

import numpy as np
import pytest

from flexquant import numerics


@pytest.fixture(autouse=True)
def _reset_numeric_events():
    numerics.reset_events()
    numerics.set_finite_checks(True)
    yield
    numerics.reset_events()


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. array x.

    f must read x by reference (the array is mutated in place and restored).
    """
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        f_plus = f()
        flat_x[i] = orig - eps
        f_minus = f()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def blob_config(mode="coquant", bits=(8, 4, 2), epochs=4, seed=0, samples=600,
                classes=4, dim=8, spread=1.0, hidden=(32, 32), batch_size=100,
                data_seed=7, **overrides):
    """A small runnable config dict for trainer-level tests."""
    cfg = {
        "schema_version": 1,
        "mode": mode,
        "bits": list(bits),
        "dataset": {
            "kind": "synthetic_blobs",
            "classes": classes,
            "samples": samples,
            "dim": dim,
            "spread": spread,
            "seed": data_seed,
        },
        "arch": {"kind": "mlp", "input_dim": dim, "hidden": list(hidden), "classes": classes},
        "epochs": epochs,
        "batch_size": batch_size,
        "seed": seed,
    }
    cfg.update(overrides)
    return cfg
