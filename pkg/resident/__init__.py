"""
resident: byte-level language identification with a residual CNN and a bi-GRU.

This package contains the modules of the language identification system:
- autodiff: dense float64 tensors with reverse-mode differentiation
- layers: embedding, convolution, batch norm, dropout, pooling, GRU and softmax kernels
- resnet_model: residual blocks, model assembly and the .rsid model file format
- optim: ADAM, mini-batching and the early-stopping training loop
- data_pipeline: byte codec, TSV ingestion, label vocabulary and tweet cleanup
- metrics: confusion matrices, accuracy/F1 reporting and group projection
- gradcheck: finite-difference suites used by ``resident gradcheck``
- synthetic: synthetic similar-language corpora for scaled-down experiments
- cli: the ``resident`` command line
"""

import os
from pathlib import Path

from dotenv import load_dotenv

__version__ = "1.0.0"

PROJECT_ROOT = Path(__file__).resolve().parent.parent

# Must run before numpy is first imported so the BLAS pools pick the cap up
load_dotenv(PROJECT_ROOT / ".env")

_threads = os.getenv("RESIDENT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
