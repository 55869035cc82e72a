import numpy as np
import pytest

from deidseq import kernels


def central_difference(f, arrays, step=1e-5):
    """Central finite-difference gradients of scalar f w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def assert_close_rel(analytic, numeric, rel=1e-4, floor=1e-6):
    """Relative comparison with an absolute floor for near-zero entries."""
    denom = np.maximum(np.abs(numeric), floor)
    err = np.abs(analytic - numeric) / denom
    assert err.max() < rel, f"max rel err {err.max():.3e}"


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    return kernels.available_backends()[request.param]


@pytest.fixture
def small_corpus():
    from deidseq.corpusgen import GeneratorConfig, generate

    return generate(GeneratorConfig(seed=101, documents=24))
