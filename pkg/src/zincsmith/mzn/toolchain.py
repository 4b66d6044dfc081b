"""Toolchain abstraction: compile-check and solve over a selected backend.

Two backends exist. `MiniZincCli` shells out to a local `minizinc`
executable with a named solver (gecode by default), a per-call time limit,
and machine-readable JSON output. `BuiltinEngine` (solver id "builtin") is
a pure-Python fallback covering the model subset used by small benchmark
instances. Callers select by solver id; all pipeline behavior above this
interface is backend-agnostic.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

from ..errors import ToolchainMissing


class SolveStatus(Enum):
    SATISFIABLE = "SATISFIABLE"
    OPTIMAL = "OPTIMAL"
    UNSATISFIABLE = "UNSATISFIABLE"
    UNKNOWN = "UNKNOWN"
    TIMEOUT = "TIMEOUT"
    ERROR = "ERROR"


@dataclass
class CompileResult:
    ok: bool
    message: str = ""


@dataclass
class SolveResult:
    status: SolveStatus
    assignment: dict | None = None
    objective: object = None
    message: str = ""

    @property
    def has_solution(self) -> bool:
        return self.status in (SolveStatus.SATISFIABLE, SolveStatus.OPTIMAL)


class Toolchain(Protocol):
    """Backend contract.

    `extra_constraints` are constraint bodies appended to the model before
    solving — the textual-augmentation hook used for equality pinning and
    dominance checks. Passing them separately (rather than pre-concatenated)
    lets a backend reuse work for the unchanged base model.
    """

    solver_id: str

    def compile_check(self, model_source: str) -> CompileResult: ...

    def solve(
        self, model_source: str, dzn_text: str, timeout_s: float,
        extra_constraints: tuple = (),
    ) -> SolveResult: ...


@dataclass
class MiniZincCli:
    """Wrapper over the MiniZinc command-line toolchain.

    compile_check runs a model-only check (no data, so missing parameter
    values do not fail it); solve runs the named solver with the CLI time
    limit and a supervisor timeout on the subprocess, whichever fires first.
    """

    solver_id: str = "gecode"
    executable: str = "minizinc"
    extra_args: list = field(default_factory=list)

    def _require_executable(self) -> str:
        path = shutil.which(self.executable)
        if path is None:
            raise ToolchainMissing(f"MiniZinc executable not found: {self.executable}")
        return path

    def compile_check(self, model_source: str) -> CompileResult:
        exe = self._require_executable()
        with tempfile.TemporaryDirectory(prefix="zincsmith-mzn-") as tmp:
            model_path = Path(tmp) / "model.mzn"
            model_path.write_text(model_source, encoding="utf-8")
            cmd = [exe, "--solver", self.solver_id, "--model-check-only", *self.extra_args, str(model_path)]
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=120)
        if proc.returncode == 0:
            return CompileResult(ok=True, message="")
        return CompileResult(ok=False, message=(proc.stderr or proc.stdout).strip())

    def solve(
        self, model_source: str, dzn_text: str, timeout_s: float,
        extra_constraints: tuple = (),
    ) -> SolveResult:
        exe = self._require_executable()
        if extra_constraints:
            from .scanner import append_constraints

            model_source = append_constraints(model_source, list(extra_constraints))
        with tempfile.TemporaryDirectory(prefix="zincsmith-mzn-") as tmp:
            model_path = Path(tmp) / "model.mzn"
            model_path.write_text(model_source, encoding="utf-8")
            cmd = [
                exe,
                "--solver", self.solver_id,
                "--time-limit", str(int(timeout_s * 1000)),
                "--output-mode", "json",
                "--output-objective",
                "--output-all-vars",
                *self.extra_args,
            ]
            if dzn_text.strip():
                data_path = Path(tmp) / "data.dzn"
                data_path.write_text(dzn_text, encoding="utf-8")
                cmd.append(str(data_path))
            cmd.append(str(model_path))
            try:
                proc = subprocess.run(
                    cmd, capture_output=True, text=True, timeout=timeout_s + 10
                )
            except subprocess.TimeoutExpired:
                return SolveResult(status=SolveStatus.TIMEOUT, message="TIMEOUT (supervisor)")
        return parse_cli_output(proc.stdout, proc.stderr, proc.returncode)


def parse_cli_output(stdout: str, stderr: str, returncode: int) -> SolveResult:
    """Interpret MiniZinc CLI output: JSON solution blocks plus status markers."""
    if "=====ERROR=====" in stdout or (returncode != 0 and "-----" not in stdout):
        return SolveResult(status=SolveStatus.ERROR, message=(stderr or stdout).strip())
    if "=====UNSATISFIABLE=====" in stdout:
        return SolveResult(status=SolveStatus.UNSATISFIABLE, message="UNSATISFIABLE")

    blocks = [b.strip() for b in stdout.split("----------") if b.strip().startswith("{")]
    last = None
    for block in blocks:
        try:
            last = json.loads(block)
        except json.JSONDecodeError:
            continue
    complete = "==========" in stdout

    if last is None:
        if "=====UNKNOWN=====" in stdout:
            return SolveResult(status=SolveStatus.UNKNOWN, message="UNKNOWN")
        return SolveResult(status=SolveStatus.TIMEOUT, message="TIMEOUT")

    assignment = {k: _normalize_value(v) for k, v in last.items() if not k.startswith("_checker")}
    objective = assignment.get("_objective")
    if objective is not None:
        status = SolveStatus.OPTIMAL if complete else SolveStatus.TIMEOUT
        if not complete:
            return SolveResult(status=SolveStatus.TIMEOUT, message="TIMEOUT", assignment=assignment, objective=objective)
        return SolveResult(status=status, assignment=assignment, objective=objective)
    return SolveResult(status=SolveStatus.SATISFIABLE, assignment=assignment)


def _normalize_value(v):
    """JSON output normalization: sets arrive as {"set": [...]}; flatten to sorted lists."""
    if isinstance(v, dict) and set(v.keys()) == {"set"}:
        members: list = []
        for entry in v["set"]:
            if isinstance(entry, list) and len(entry) == 2:
                members.extend(range(entry[0], entry[1] + 1))
            else:
                members.append(entry)
        return sorted(members)
    if isinstance(v, list):
        return [_normalize_value(x) for x in v]
    return v


def resolve_toolchain(solver_id: str, executable: str = "minizinc") -> Toolchain:
    """Select a backend by solver id; "builtin" needs no external binaries."""
    if solver_id == "builtin":
        from .engine import BuiltinEngine

        return BuiltinEngine()
    return MiniZincCli(solver_id=solver_id, executable=executable)
