"""Shared test setup.

BLAS threading is pinned once so matrix-product rounding is identical
across test processes and worker counts; several tests compare output
byte for byte.
"""

from gradissect.parallel import limit_blas_threads

limit_blas_threads()
