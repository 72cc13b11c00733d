"""Embedding-distillation toolkit for mRNA sequences.

Desk-scale reproduction of a projected hidden-layer distillation recipe:
GenBank ingestion, per-nucleotide tokenization, a synthetic or
file-backed frozen teacher, a residual student with projection heads,
the combined cosine/MSE training loss with its AdamW loop, and the full
diagnostic suite (CKA, embedding variance, PCA spectra, logit entropy).
"""

from .backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
