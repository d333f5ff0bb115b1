import os
import sys

# single-threaded BLAS: faster at these GEMM sizes and bitwise reproducible;
# must be set before numpy loads
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))
