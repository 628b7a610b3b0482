"""Desk-scale medical/general embedding pipeline.

Subpackages cover the full workflow: WordPiece tokenizer construction and
merging (`tokenizer`), a small reverse-mode autodiff engine (`autodiff`),
the ALiBi encoder with multi-projection embeddings and an adaptive-softmax
MLM head (`model`), the three training stages (`training`), corpus
preparation (`datapipe`), and retrieval evaluation (`evaluation`).
"""

__version__ = "0.1.0"
