"""Middleware components wrapping trajflow commands."""

from app.middleware.logging_middleware import CommandLoggingMiddleware

__all__ = ["CommandLoggingMiddleware"]
