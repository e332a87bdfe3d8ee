"""Embedding-based retrieval for long-tail e-commerce search queries.

Pipeline stages, each its own module:

- ``corpus``     catalog / engagement-log data model and aggregation
- ``curation``   training-pair construction (filtering, sampling, synthetics)
- ``encoder``    hashed n-gram text encoder, product-field fusion, checkpoints
- ``training``   contrastive loss, analytic gradients, staged finetuning, merging
- ``index``      exact and HNSW vector indexes (compiled kernels optional)
- ``evaluation`` pooled judgment curation and recall@K scoring
- ``service``    HTTP serving with an embedding cache, plus the CLI
"""

__version__ = "0.1.0"
