from .runner import execute, main

__all__ = ["execute", "main"]
