"""Client side of the sandboxed program runner.

Synthesized checker/formatter functions and bundle mapping programs run out
of process through a JSON-over-stdio protocol: the client writes one JSON
object to the runner's stdin and reads one JSON object line from stdout.

    request:  {"function_source", "function_name", "data_dict", "arg_dict",
               "timeout_s"}
    response: {"status": "ok"|"raise"|"error", "result"?, "message"?,
               "traceback"?}

"raise" is the semantic-violation signal (the function raised a ValueError
carrying a message); "error" marks a defective program or a protocol fault.
`LocalExecutor` runs the same contract in process with no isolation, for
tests and trusted development runs.
"""

from __future__ import annotations

import json
import subprocess
import threading
import traceback as _tb
from dataclasses import dataclass, field
from typing import Protocol

from .errors import SandboxUnavailable

DEFAULT_TIMEOUT_S = 10.0


@dataclass(frozen=True)
class ExecRequest:
    function_source: str
    function_name: str
    data_dict: dict
    arg_dict: dict
    timeout_s: float = DEFAULT_TIMEOUT_S

    def to_wire(self) -> dict:
        return {
            "function_source": self.function_source,
            "function_name": self.function_name,
            "data_dict": self.data_dict,
            "arg_dict": self.arg_dict,
            "timeout_s": self.timeout_s,
        }


@dataclass(frozen=True)
class ExecResponse:
    status: str  # ok | raise | error
    result: object = None
    message: str | None = None
    traceback: str | None = None

    @classmethod
    def from_wire(cls, payload: dict) -> "ExecResponse":
        status = payload.get("status")
        if status not in ("ok", "raise", "error"):
            return cls(status="error", message=f"malformed runner response: {payload!r}")
        return cls(
            status=status,
            result=payload.get("result"),
            message=payload.get("message"),
            traceback=payload.get("traceback"),
        )


class SandboxClient(Protocol):
    def run(self, request: ExecRequest) -> ExecResponse: ...


@dataclass
class ProcessSandbox:
    """Spawns one runner process per request and speaks the stdio protocol."""

    cmd: list = field(default_factory=lambda: ["sandbox-runner"])

    def run(self, request: ExecRequest) -> ExecResponse:
        payload = json.dumps(request.to_wire(), ensure_ascii=True)
        try:
            proc = subprocess.run(
                self.cmd,
                input=payload + "\n",
                capture_output=True,
                text=True,
                timeout=request.timeout_s + 5,
            )
        except FileNotFoundError as exc:
            raise SandboxUnavailable(f"runner command not found: {self.cmd[0]}") from exc
        except subprocess.TimeoutExpired:
            return ExecResponse(status="error", message="timeout (supervisor kill)")
        line = proc.stdout.strip().splitlines()
        if not line:
            return ExecResponse(
                status="error",
                message=f"runner produced no output (exit {proc.returncode})",
                traceback=proc.stderr[-2000:] or None,
            )
        try:
            return ExecResponse.from_wire(json.loads(line[-1]))
        except json.JSONDecodeError:
            return ExecResponse(status="error", message="runner output was not JSON")


class LocalExecutor:
    """In-process implementation of the runner contract. No isolation:
    intended for test suites and trusted local runs only."""

    def run(self, request: ExecRequest) -> ExecResponse:
        box: dict = {}
        worker = threading.Thread(target=self._invoke, args=(request, box), daemon=True)
        worker.start()
        worker.join(request.timeout_s)
        if worker.is_alive():
            return ExecResponse(status="error", message=f"timeout after {request.timeout_s}s")
        return box["response"]

    @staticmethod
    def _invoke(request: ExecRequest, box: dict) -> None:
        namespace: dict = {}
        try:
            exec(compile(request.function_source, "<sandboxed>", "exec"), namespace)
        except BaseException as exc:
            box["response"] = ExecResponse(
                status="error", message=f"{type(exc).__name__}: {exc}", traceback=_tb.format_exc()
            )
            return
        fn = namespace.get(request.function_name)
        if not callable(fn):
            box["response"] = ExecResponse(
                status="error", message=f"source does not define function {request.function_name!r}"
            )
            return
        try:
            result = fn(request.data_dict, request.arg_dict)
        except ValueError as exc:
            message = str(exc)
            if message:
                box["response"] = ExecResponse(status="raise", message=message, traceback=_tb.format_exc())
            else:
                box["response"] = ExecResponse(
                    status="error", message="ValueError with no message", traceback=_tb.format_exc()
                )
            return
        except BaseException as exc:
            box["response"] = ExecResponse(
                status="error", message=f"{type(exc).__name__}: {exc}", traceback=_tb.format_exc()
            )
            return
        try:
            json.dumps(result)
        except (TypeError, ValueError):
            box["response"] = ExecResponse(
                status="error", message=f"return value is not JSON-serializable: {type(result).__name__}"
            )
            return
        box["response"] = ExecResponse(status="ok", result=result)


class CannedSandbox:
    """Test double returning pre-set responses in order, per function name."""

    def __init__(self, responses: dict | None = None):
        self.responses: dict[str, list] = {k: list(v) for k, v in (responses or {}).items()}
        self.calls: list[ExecRequest] = []

    def run(self, request: ExecRequest) -> ExecResponse:
        self.calls.append(request)
        queue = self.responses.get(request.function_name)
        if not queue:
            return ExecResponse(status="error", message="no canned response left")
        return queue.pop(0)
