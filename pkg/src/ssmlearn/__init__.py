"""ssmlearn: learn audio embeddings whose self-similarity matrix matches segment annotations.

The package covers the full pipeline: audio and annotation ingest, beat-synchronous
constant-Q patch extraction, a small convolutional encoder with hand-rolled
reverse-mode gradients, the weighted-BCE objective between the estimated and the
annotation-derived self-similarity matrices, a MADGRAD training loop, and
Loss/AUC evaluation with report emission.
"""

__version__ = "0.1.0"

from . import corpus, diffcore, encoder, errors, evaluate, frontend, ingest, loss, optim, ssm, synthgen

__all__ = [
    "corpus",
    "diffcore",
    "encoder",
    "errors",
    "evaluate",
    "frontend",
    "ingest",
    "loss",
    "optim",
    "ssm",
    "synthgen",
    "__version__",
]
