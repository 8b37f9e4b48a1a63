"""HTTP sidecar serving tokenization, contextual logits, and embeddings."""

__version__ = "0.1.0"

from .app import create_app
from .export import export_fixtures
from .service import ModelService, ServerConfig, ServiceError

__all__ = [
    "ModelService",
    "ServerConfig",
    "ServiceError",
    "create_app",
    "export_fixtures",
]
