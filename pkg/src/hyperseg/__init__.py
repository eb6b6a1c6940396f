"""Weakly-supervised pseudo-label engine on superpixel graphs and hypergraphs.

The pipeline segments images into superpixels, pools features onto the
resulting nodes, builds spatial and k-NN affinity graphs, lifts them into
hypergraphs, trains a staged graph/hypergraph convolutional classifier from
scribble or click supervision, and emits dense pseudo-label maps plus mIoU
reports.
"""

import os

# Cap BLAS worker threads before numpy is first imported anywhere in the
# package so that repeated runs stay bitwise deterministic. HGCN_THREADS
# overrides the cap (default 1).
_threads = os.environ.get("HGCN_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)
del _threads, _var

__version__ = "0.1.0"

from . import errors  # noqa: E402,F401
