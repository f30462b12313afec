"""Cross-trial alignment learning for noisy multivariate time series."""

__version__ = "0.1.0"

# The workload is many small dense ops; threaded BLAS loses time to
# synchronization and a fixed reduction order keeps results bit-stable.
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(1, "blas")
except Exception:  # pragma: no cover - best effort
    pass
