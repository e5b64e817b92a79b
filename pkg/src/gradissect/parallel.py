"""Schedule-independent parallel execution of experiment cells.

Cells are (key, fn, args) triples.  Results are always returned sorted by
cell key, so serial and concurrent execution produce identical merged
output.  Process workers sidestep the interpreter lock for RNG-heavy
cells; thread workers avoid pickling and suit closure-free light cells.
"""

from __future__ import annotations

import ctypes
import glob
import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor


def limit_blas_threads(n: int = 1) -> None:
    """Pin the BLAS thread count (best effort).

    The matrix products in the Monte-Carlo hot paths are small; letting the
    BLAS spin up its own pool next to our worker pool oversubscribes the
    CPU and slows everything down.  Silently does nothing if the backing
    library cannot be located.
    """
    try:
        import numpy

        pattern = os.path.join(
            os.path.dirname(numpy.__file__), "..", "numpy.libs", "*openblas*"
        )
        for path in glob.glob(pattern):
            lib = ctypes.CDLL(path)
            for sym in (
                "scipy_openblas_set_num_threads64_",
                "openblas_set_num_threads64_",
                "openblas_set_num_threads",
            ):
                fn = getattr(lib, sym, None)
                if fn is not None:
                    fn(n)
                    return
    except Exception:
        pass


def run_cells(cells, workers: int = 1, capture_errors: bool = False, mode: str = "process"):
    """Execute cells, return (results, failures) each sorted by cell key.

    With ``capture_errors`` a raising cell is recorded as (key, message) in
    the failures list and the remaining cells still run; otherwise the
    first error propagates.  ``mode`` selects the executor ("process" or
    "thread") when workers > 1; cell functions and arguments must be
    picklable in process mode.

    BLAS threading is pinned on every execution path: a multi-threaded
    matrix product may change its summation order and hence the last bits
    of the result, which would break the byte-identical-output guarantee
    across worker counts.
    """
    limit_blas_threads()
    outcomes = {}
    if workers <= 1:
        for key, fn, args in cells:
            try:
                outcomes[key] = (True, fn(*args))
            except Exception as exc:
                if not capture_errors:
                    raise
                outcomes[key] = (False, f"{type(exc).__name__}: {exc}")
    else:
        if mode == "process":
            pool = ProcessPoolExecutor(
                max_workers=workers, initializer=limit_blas_threads
            )
        else:
            pool = ThreadPoolExecutor(max_workers=workers)
        with pool:
            futures = {key: pool.submit(fn, *args) for key, fn, args in cells}
            for key, fut in futures.items():
                try:
                    outcomes[key] = (True, fut.result())
                except Exception as exc:
                    if not capture_errors:
                        raise
                    outcomes[key] = (False, f"{type(exc).__name__}: {exc}")
    results = []
    failures = []
    for key in sorted(outcomes):
        ok, value = outcomes[key]
        if ok:
            results.append(value)
        else:
            failures.append((key, value))
    return results, failures
