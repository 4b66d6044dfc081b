from .toolchain import (
    CompileResult,
    SolveResult,
    SolveStatus,
    Toolchain,
    resolve_toolchain,
)

__all__ = [
    "CompileResult",
    "SolveResult",
    "SolveStatus",
    "Toolchain",
    "resolve_toolchain",
]
