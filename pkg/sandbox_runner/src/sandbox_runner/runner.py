"""One-shot guarded executor for generated Python functions.

Protocol: exactly one JSON object on stdin, exactly one JSON line on stdout,
exit 0. The request names a function (`semantic_checker` or `transformer`),
carries its source, and the two dictionaries it is called with:

    {"function_source": str, "function_name": str,
     "data_dict": {...}, "arg_dict": {...}, "timeout_s": 10}

The response status separates the checker contract's rejection signal from
executor faults:

    ok     the call returned a JSON-serializable value (in "result")
    raise  the function raised a ValueError with a message (the semantic
           violation channel; message carries the feedback)
    error  everything else: broken source, missing function, disallowed
           import or builtin, timeout, non-serializable return, bad stdin

The function runs in a fresh namespace with a curated builtins table and an
import whitelist of pure stdlib modules; file, network, and process access
are unavailable. This is a guard against accidental side effects from
generated code, not an OS-level security boundary; deployments that need
real isolation should add containerization around the process.
"""

from __future__ import annotations

import json
import signal
import sys
import traceback

ALLOWED_FUNCTION_NAMES = ("semantic_checker", "transformer")

# pure, deterministic stdlib only: no clocks, no randomness, no I/O, so
# identical requests always produce identical responses
ALLOWED_MODULES = frozenset({
    "math", "cmath", "itertools", "functools", "collections", "re", "json",
    "string", "heapq", "bisect", "copy", "operator", "statistics",
    "fractions", "decimal", "typing", "enum", "array",
})

_SAFE_BUILTIN_NAMES = (
    "abs", "all", "any", "ascii", "bin", "bool", "bytearray", "bytes",
    "callable", "chr", "complex", "dict", "divmod", "enumerate", "filter",
    "float", "format", "frozenset", "hasattr", "hash", "hex", "int",
    "isinstance", "issubclass", "iter", "len", "list", "map", "max", "min",
    "next", "object", "oct", "ord", "pow", "range", "repr", "reversed",
    "round", "set", "slice", "sorted", "str", "sum", "tuple", "type", "zip",
    # exception types generated validators commonly raise or catch
    "ArithmeticError", "AssertionError", "AttributeError", "BaseException",
    "Exception", "IndexError", "KeyError", "LookupError", "NameError",
    "NotImplementedError", "OverflowError", "RuntimeError", "StopIteration",
    "TypeError", "ValueError", "ZeroDivisionError",
)

DEFAULT_TIMEOUT_S = 10.0


class _Timeout(Exception):
    pass


def _guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
    root = name.split(".", 1)[0]
    if level != 0 or root not in ALLOWED_MODULES:
        raise ImportError(f"import of {name!r} is not allowed in the sandbox")
    return __import__(name, globals, locals, fromlist, 0)


def _stderr_print(*args, **kwargs):
    kwargs.pop("file", None)
    print(*args, file=sys.stderr, **kwargs)


def _build_builtins() -> dict:
    import builtins as real

    table = {name: getattr(real, name) for name in _SAFE_BUILTIN_NAMES}
    table["__import__"] = _guarded_import
    table["print"] = _stderr_print  # stdout belongs to the protocol
    table["True"] = True
    table["False"] = False
    table["None"] = None
    return table


def execute(request: dict) -> dict:
    """Run one request to a response dict. Never raises."""
    if not isinstance(request, dict):
        return {"status": "error", "message": "protocol"}
    source = request.get("function_source")
    name = request.get("function_name")
    data_dict = request.get("data_dict")
    arg_dict = request.get("arg_dict")
    if not isinstance(source, str) or not isinstance(name, str) \
            or not isinstance(data_dict, dict) or not isinstance(arg_dict, dict):
        return {"status": "error", "message": "protocol"}
    if name not in ALLOWED_FUNCTION_NAMES:
        return {"status": "error", "message": f"function name {name!r} is not allowed"}
    try:
        timeout_s = float(request.get("timeout_s", DEFAULT_TIMEOUT_S))
    except (TypeError, ValueError):
        return {"status": "error", "message": "protocol"}

    namespace = {"__builtins__": _build_builtins()}
    old_handler = None
    alarmed = False
    if hasattr(signal, "SIGALRM"):
        def on_alarm(signum, frame):
            raise _Timeout()

        old_handler = signal.signal(signal.SIGALRM, on_alarm)
        signal.setitimer(signal.ITIMER_REAL, max(timeout_s, 0.01))
        alarmed = True
    try:
        try:
            exec(compile(source, "<generated>", "exec"), namespace)
        except _Timeout:
            return {"status": "error", "message": f"timeout after {timeout_s}s"}
        except BaseException as exc:
            return {
                "status": "error",
                "message": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(limit=10),
            }
        fn = namespace.get(name)
        if not callable(fn):
            return {"status": "error", "message": f"source does not define function {name!r}"}
        try:
            result = fn(data_dict, arg_dict)
        except _Timeout:
            return {"status": "error", "message": f"timeout after {timeout_s}s"}
        except ValueError as exc:
            message = str(exc)
            if message:
                return {"status": "raise", "message": message,
                        "traceback": traceback.format_exc(limit=10)}
            return {"status": "error", "message": "ValueError raised without a message",
                    "traceback": traceback.format_exc(limit=10)}
        except BaseException as exc:
            return {
                "status": "error",
                "message": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(limit=10),
            }
    finally:
        if alarmed:
            signal.setitimer(signal.ITIMER_REAL, 0)
            signal.signal(signal.SIGALRM, old_handler)

    try:
        json.dumps(result)
    except (TypeError, ValueError):
        return {"status": "error",
                "message": f"return value is not JSON-serializable: {type(result).__name__}"}
    return {"status": "ok", "result": result}


def _limit_memory() -> None:
    try:
        import resource

        limit = 512 * 1024 * 1024
        resource.setrlimit(resource.RLIMIT_AS, (limit, limit))
    except (ImportError, ValueError, OSError):
        pass  # platform without rlimits: the supervisor timeout still applies


def main() -> int:
    """Read one request line, emit one response line, exit 0."""
    _limit_memory()
    raw = sys.stdin.readline()
    try:
        request = json.loads(raw)
    except json.JSONDecodeError:
        sys.stdout.write(json.dumps({"status": "error", "message": "protocol"}) + "\n")
        sys.stdout.flush()
        return 0
    response = execute(request)
    sys.stdout.write(json.dumps(response, ensure_ascii=True) + "\n")
    sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
