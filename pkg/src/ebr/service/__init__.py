"""HTTP serving with a query-embedding cache, plus the pipeline CLI."""

from .app import ServiceState, create_app
from .cache import CacheConfig, EmbeddingCache

__all__ = ["CacheConfig", "EmbeddingCache", "ServiceState", "create_app"]
