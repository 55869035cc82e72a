"""Sequence kernels with a compiled fast path and a numpy fallback.

The Cython extension ``_fast`` is preferred when it built; otherwise the
pure-numpy ``reference`` backend is used. ``DEIDSEQ_KERNELS=reference``
or ``DEIDSEQ_KERNELS=fast`` forces a backend (the latter raises if the
extension is missing). ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

from . import reference

_requested = os.environ.get("DEIDSEQ_KERNELS", "").strip().lower()

if _requested in ("reference", "py", "numpy"):
    _impl = reference
    BACKEND = "reference"
elif _requested in ("", "fast", "c"):
    try:
        from . import _fast as _impl

        BACKEND = "fast"
    except ImportError:
        if _requested:
            raise
        _impl = reference
        BACKEND = "reference"
else:
    raise ValueError(f"unknown DEIDSEQ_KERNELS value: {_requested!r}")

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward
crf_forward = _impl.crf_forward
crf_backward = _impl.crf_backward
viterbi = _impl.viterbi

# The kernels issue many small BLAS calls (one per LSTM timestep); thread
# handoff costs more than it saves at these sizes, so pin every loaded
# BLAS to one thread. This runs after backend import so both numpy's and
# scipy's OpenBLAS copies are covered. Training is specified
# single-threaded and deterministic anyway.
try:
    import threadpoolctl

    _BLAS_LIMIT = threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover
    _BLAS_LIMIT = None


def available_backends() -> dict[str, object]:
    """Importable backends keyed by name (for tests and benchmarks)."""
    found: dict[str, object] = {"reference": reference}
    try:
        from . import _fast

        found["fast"] = _fast
    except ImportError:
        pass
    return found
