"""Private embedding-model training that keeps gradient updates row-sparse."""

from sparsedp import dp_mechanisms, dp_optimizers, privacy_accountant, sparse_model

__all__ = ["dp_mechanisms", "dp_optimizers", "privacy_accountant",
           "sparse_model"]
