"""HTTP face of the package: a FastAPI app exposing every operator task."""

from ovground.service.app import create_app

__all__ = ["create_app"]
