"""Test-session setup: pin BLAS to one thread before numpy loads (the suite's
small-GEMM workload is measurably slower with thread fan-out, and budgeted
acceptance timings should be stable)."""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
