"""Dense regression network for grounding natural-language queries in videos.

Self-contained: a numpy-backed reverse-mode autodiff engine, 1-D conv/BiLSTM
layers, a multi-level vision-language feature pyramid, dense boundary
regression with semantic-matching and IoU-quality heads, three-step training,
and a synthetic grounding task for end-to-end verification.
"""

import os

# The workload is many small GEMMs; BLAS thread fan-out costs ~30% on them.
# Respect an explicit user setting, otherwise stay single-threaded. Only
# effective when numpy has not been imported yet.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
