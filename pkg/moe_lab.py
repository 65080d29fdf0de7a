import os
import sys

# BLAS thread pools are sized when numpy is first imported
_threads = os.environ.get("MOELAB_THREADS")
if _threads:
    for _name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_name] = _threads

from experiments.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
