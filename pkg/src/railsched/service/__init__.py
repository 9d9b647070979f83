"""HTTP front end: the same operations the CLI runs, behind FastAPI."""

from .app import create_app

__all__ = ["create_app"]
