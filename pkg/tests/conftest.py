import os

# Pin BLAS threading before numpy loads so reductions are reproducible
# and small-matrix work is not drowned in thread overhead.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
