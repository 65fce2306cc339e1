"""Shared test helpers, chiefly the finite-difference gradient oracle."""

import numpy as np
import pytest


def finite_difference_check(loss_fn, params, h=1e-5, rtol=1e-4, floor=1e-7):
    """Compare each parameter's autodiff gradient against central finite
    differences of ``loss_fn`` (a float-returning closure that must be
    deterministic across calls).

    Passes when |ad - fd| <= rtol * max(|ad|, |fd|) or both are below the
    absolute floor (gradients that are exactly zero by construction).
    Returns the number of scalar entries checked.
    """
    checked = 0
    for p in params:
        assert p.grad is not None, f"{p.name}: no gradient accumulated"
        flat = p.data.ravel()
        gflat = p.grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            ad = gflat[i]
            err = abs(ad - fd)
            scale = max(abs(ad), abs(fd))
            assert err <= rtol * scale or err <= floor, (
                f"{p.name}[{i}]: autodiff {ad:.10g} vs finite difference {fd:.10g} "
                f"(err {err:.3g}, scale {scale:.3g})"
            )
            checked += 1
    return checked


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
