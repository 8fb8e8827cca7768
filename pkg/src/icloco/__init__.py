"""In-context adaptive locomotion: segment-recurrent transformer policies trained with PPO
on procedurally generated planar robots."""
import os as _os

__version__ = "0.1.0"

# ICLOCO_THREADS caps BLAS threads; it only takes effect if numpy is not imported yet
_threads = _os.environ.get("ICLOCO_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
