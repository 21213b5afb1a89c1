"""Hot loop kernels behind a backend switch.

``CEBSNET_NUMBA=0`` forces the pure-numpy path; otherwise the numba path is
used when numba imports. ``CEBSNET_THREADS`` caps numba and BLAS threads.
"""

import os

from . import _numpy

BACKEND = "numpy"
_impl = _numpy

if os.environ.get("CEBSNET_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off"):
    # the default TBB layer warns on older TBB builds; workqueue needs no extras
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass


def set_threads(n=None):
    """Cap internal parallelism; ``None`` reads ``CEBSNET_THREADS`` (default: all cores)."""
    if n is None:
        env = os.environ.get("CEBSNET_THREADS")
        if not env:
            return
        n = int(env)
    if n < 1:
        raise ValueError(f"CEBSNET_THREADS must be >= 1, got {n}")
    if BACKEND == "numba":
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def use_backend(name):
    """Switch backend at runtime (benchmarks and the equivalence tests use this)."""
    global _impl, BACKEND
    if name == "numba":
        from . import _numba

        _impl = _numba
    elif name == "numpy":
        _impl = _numpy
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    return _impl.col2im(cols, shape, kh, kw, stride, pad)


def maxpool_forward(x, k, stride, pad):
    return _impl.maxpool_forward(x, k, stride, pad)


def maxpool_backward(grad, idx, shape):
    return _impl.maxpool_backward(grad, idx, shape)


def region_expand(e, row_of, col_of):
    return _impl.region_expand(e, row_of, col_of)


def region_reduce(grad, row_start, col_start):
    return _impl.region_reduce(grad, row_start, col_start)


set_threads()
