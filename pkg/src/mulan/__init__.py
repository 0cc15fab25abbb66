"""Diffusion models with learned multivariate, latent-conditioned noise schedules."""

import os as _os

# MULAN_THREADS caps the BLAS / numba worker pools; it has to be applied
# before numpy is first imported.
_threads = _os.environ.get("MULAN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
