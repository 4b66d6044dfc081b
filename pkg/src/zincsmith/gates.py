"""Staged checking cascade over one candidate model.

Four gates run in order: G1 compiles the model, G2 solves it and extracts a
variable assignment, G3 runs the synthesized output formatter and validates
the result against the output specification, G4 runs every synthesized
semantic checker and takes a strict majority. G1-G3 are hard gates: the
first failure triggers a targeted repair and the updated candidate re-enters
at G1, up to the per-candidate refinement budget. G4 is soft: its failures
feed a repair-or-reject decision but never demote a candidate that already
cleared the hard gates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

from .agents import CandidateModel, CheckerProgram, FormatterProgram, ModelingAgent
from .mzn.scanner import strip_output_items
from .mzn.toolchain import SolveStatus, Toolchain
from .problems import InputData, OutputKeySpec, ProblemBundle
from .sandbox import ExecRequest, SandboxClient
from .mzn import parser as _mzn_parser
from .mzn import engine as _mzn_engine

logger = logging.getLogger(__name__)


class Gate(Enum):
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    G4 = "G4"


@dataclass(frozen=True)
class GateResult:
    gate: Gate
    status: str  # pass | fail
    feedback: str = ""
    artifacts: dict | None = None

    def __post_init__(self):
        if self.status == "fail" and not self.feedback:
            raise ValueError("failing gate results must carry feedback")

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "gate": self.gate.value,
            "status": self.status,
            "feedback": self.feedback,
            "artifacts": self.artifacts,
        }


@dataclass(frozen=True)
class CheckerVerdict:
    checker_index: int
    verdict: str  # pass | fail | error
    feedback: str = ""

    def to_dict(self) -> dict:
        return {"checker_index": self.checker_index, "verdict": self.verdict, "feedback": self.feedback}


def majority_passes(pass_count: int, total: int) -> bool:
    """Strict majority: ties (2m = K) fail; errors already count as non-pass."""
    return 2 * pass_count > total


@dataclass
class CascadeOutcome:
    candidate: CandidateModel
    survived: bool
    g4_status: str | None = None  # pass | fail | fail (feedback rejected) | None when no checkers ran
    verdicts: list = field(default_factory=list)
    checker_pass_count: int | None = None
    dead_reason: str | None = None


@dataclass
class CheckingPipeline:
    toolchain: Toolchain
    sandbox: SandboxClient
    solver_timeout_s: float = 30.0
    sandbox_timeout_s: float = 10.0

    # --- individual gates ------------------------------------------------

    def g1_syntax(self, model_source: str) -> GateResult:
        result = self.toolchain.compile_check(model_source)
        if result.ok:
            return GateResult(Gate.G1, "pass")
        return GateResult(Gate.G1, "fail", feedback=result.message or "compilation failed")

    def g2_solve(self, model_source: str, input_data: InputData) -> GateResult:
        prepared = strip_output_items(model_source)
        result = self.toolchain.solve(prepared, input_data.dzn_text, self.solver_timeout_s)
        if result.has_solution:
            assignment = {k: v for k, v in result.assignment.items() if k != "_objective"}
            artifacts = {"assignment": assignment}
            if result.objective is not None:
                artifacts["objective"] = result.objective
            return GateResult(Gate.G2, "pass", artifacts=artifacts)
        if result.status in (SolveStatus.UNSATISFIABLE, SolveStatus.UNKNOWN, SolveStatus.TIMEOUT):
            return GateResult(Gate.G2, "fail", feedback=result.status.value)
        # solver rejected the instance (parameter mismatch and friends)
        return GateResult(Gate.G2, "fail", feedback=result.message or "solver error")

    def g3_format(self, formatter: FormatterProgram, input_data: InputData,
                  assignment: dict, output_spec: dict) -> GateResult:
        response = self.sandbox.run(ExecRequest(
            function_source=formatter.source,
            function_name="transformer",
            data_dict=input_data.builtin_params,
            arg_dict=assignment,
            timeout_s=self.sandbox_timeout_s,
        ))
        if response.status != "ok":
            feedback = response.message or "transformer failed"
            if response.traceback:
                feedback = f"{feedback}\n{response.traceback}"
            return GateResult(Gate.G3, "fail", feedback=feedback)
        problems = validate_output(response.result, output_spec, input_data.builtin_params)
        if problems:
            return GateResult(Gate.G3, "fail", feedback="; ".join(problems))
        return GateResult(Gate.G3, "pass", artifacts={"solution": response.result})

    def g4_semantic(self, checkers: list, input_data: InputData, solution: dict) -> GateResult:
        verdicts: list[CheckerVerdict] = []
        for checker in sorted(checkers, key=lambda c: c.agent_index):
            verdicts.append(self._run_checker(checker, input_data, solution))
        pass_count = sum(1 for v in verdicts if v.verdict == "pass")
        artifacts = {"verdicts": [v.to_dict() for v in verdicts]}
        if majority_passes(pass_count, len(verdicts)):
            return GateResult(
                Gate.G4, "pass",
                feedback=f"{pass_count}/{len(verdicts)} checkers passed",
                artifacts=artifacts,
            )
        failing = [v for v in verdicts if v.verdict != "pass"]
        lines = [f"checker {v.checker_index}: {v.verdict} - {first_line(v.feedback)}" for v in failing]
        return GateResult(
            Gate.G4, "fail",
            feedback=f"{pass_count}/{len(verdicts)} checkers passed\n" + "\n".join(lines),
            artifacts=artifacts,
        )

    def _run_checker(self, checker: CheckerProgram, input_data: InputData, solution: dict) -> CheckerVerdict:
        if not checker.source.strip():
            checker.health = "defective"
            return CheckerVerdict(checker.agent_index, "error", "checker was never synthesized")
        response = self.sandbox.run(ExecRequest(
            function_source=checker.source,
            function_name="semantic_checker",
            data_dict=input_data.builtin_params,
            arg_dict=solution,
            timeout_s=self.sandbox_timeout_s,
        ))
        if response.status == "ok":
            if checker.health == "untested":
                checker.health = "ok"
            return CheckerVerdict(checker.agent_index, "pass")
        if response.status == "raise":
            if checker.health == "untested":
                checker.health = "ok"
            return CheckerVerdict(checker.agent_index, "fail", response.message or "constraint violated")
        checker.health = "defective"
        return CheckerVerdict(checker.agent_index, "error", response.message or "checker execution fault")

    # --- the cascade ------------------------------------------------------

    def run_cascade(self, candidate: CandidateModel, bundle: ProblemBundle,
                    checkers: list, agent: ModelingAgent, budget_r: int) -> CascadeOutcome:
        """Drive one candidate through G1-G4 with repair loops.

        Hard-gate failures repair and re-enter at G1 while budget remains; a
        candidate that clears G1-G3 snapshots itself as a survivor before the
        soft gate runs. An accepted G4 repair re-enters at G1; if the revised
        model then dies, the snapshot keeps the last passing revision.
        """
        if not candidate.alive:
            return CascadeOutcome(candidate, survived=False, dead_reason="dead before cascade")
        outcome = CascadeOutcome(candidate, survived=False)
        while True:
            # G1: syntax
            result = self.g1_syntax(candidate.source)
            candidate.gate_history.append(result)
            if not result.passed:
                if not self._repair(candidate, agent, "G1", result.feedback, budget_r, outcome):
                    return self._finish(outcome)
                continue

            # G2: solver status
            result = self.g2_solve(candidate.source, bundle.input_data)
            candidate.gate_history.append(result)
            if not result.passed:
                if not self._repair(candidate, agent, "G2", result.feedback, budget_r, outcome):
                    return self._finish(outcome)
                continue
            candidate.assignment = result.artifacts["assignment"]

            # G3: output format
            if candidate.formatter is None:
                formatter = agent.generate_formatter(candidate.assignment)
                if formatter is None:
                    candidate.notes.append("no transformer produced")
                    result = GateResult(Gate.G3, "fail", feedback="no transformer function produced")
                    candidate.gate_history.append(result)
                    if not self._repair(candidate, agent, "G3", result.feedback, budget_r, outcome):
                        return self._finish(outcome)
                    continue
                candidate.formatter = formatter
            result = self.g3_format(candidate.formatter, bundle.input_data,
                                    candidate.assignment, bundle.output_spec)
            candidate.gate_history.append(result)
            if not result.passed:
                if not self._repair(candidate, agent, "G3", result.feedback, budget_r, outcome):
                    return self._finish(outcome)
                continue
            candidate.solution = result.artifacts["solution"]
            candidate.snapshot_survivor()
            outcome.survived = True

            # G4: semantic majority (soft)
            if not checkers:
                outcome.g4_status = None
                return self._finish(outcome)
            result = self.g4_semantic(checkers, bundle.input_data, candidate.solution)
            candidate.gate_history.append(result)
            outcome.verdicts = result.artifacts["verdicts"]
            outcome.checker_pass_count = sum(1 for v in outcome.verdicts if v["verdict"] == "pass")
            if result.passed:
                outcome.g4_status = "pass"
                return self._finish(outcome)

            feedback = self._semantic_feedback(checkers, outcome.verdicts)
            decision, detail = agent.decide_semantic_feedback(candidate, feedback)
            if decision == "accept" and candidate.revision >= budget_r:
                decision, detail = "reject", "refinement budget exhausted"
            if decision == "reject":
                outcome.g4_status = "fail (feedback rejected)"
                candidate.notes.append(f"semantic feedback rejected: {first_line(detail)}")
                return self._finish(outcome)
            candidate.source = detail
            candidate.revision += 1
            candidate.assignment = None
            candidate.solution = None
            candidate.record_revision("G4 feedback accepted")
            outcome.survived = False  # must re-clear the hard gates

    def _repair(self, candidate: CandidateModel, agent: ModelingAgent, gate: str,
                feedback: str, budget_r: int, outcome: CascadeOutcome) -> bool:
        if candidate.revision >= budget_r:
            candidate.alive = False
            outcome.dead_reason = f"refinement budget exhausted at {gate}"
            candidate.notes.append(outcome.dead_reason)
            return False
        if gate == "G3":
            repaired = agent.repair_formatter(feedback)
            if repaired is None:
                candidate.alive = False
                outcome.dead_reason = "no transformer in repair reply"
                candidate.notes.append(outcome.dead_reason)
                return False
            candidate.formatter = repaired
        else:
            new_source = agent.repair_model(candidate, gate, feedback)
            if new_source is None:
                candidate.alive = False
                outcome.dead_reason = f"no code block in {gate} repair reply"
                candidate.notes.append(outcome.dead_reason)
                return False
            candidate.source = new_source
        candidate.revision += 1
        candidate.assignment = None
        candidate.solution = None
        candidate.record_revision(f"{gate} repair")
        return True

    def _finish(self, outcome: CascadeOutcome) -> CascadeOutcome:
        # a dead current revision still counts as a survivor when an earlier
        # revision cleared the hard gates and was snapshotted
        outcome.survived = outcome.candidate.survivor_snapshot is not None
        return outcome

    @staticmethod
    def _semantic_feedback(checkers: list, verdicts: list) -> str:
        """Verdict lines plus the source of each non-passing checker, so the
        decision can weigh checker defects against genuine model flaws."""
        by_index = {c.agent_index: c for c in checkers}
        lines = []
        for v in verdicts:
            suffix = f" - {v['feedback']}" if v["feedback"] else ""
            lines.append(f"checker {v['checker_index']}: {v['verdict']}{suffix}")
        for v in verdicts:
            if v["verdict"] == "pass":
                continue
            checker = by_index.get(v["checker_index"])
            if checker is not None and checker.source.strip():
                lines.append(f"\nsource of checker {v['checker_index']}:\n{checker.source}")
        return "\n".join(lines)


def first_line(text: str) -> str:
    return (text or "").strip().splitlines()[0] if (text or "").strip() else ""


def validate_output(value, output_spec: dict, params: dict) -> list:
    """Exact-key, shape, and element-kind validation of a formatted solution."""
    problems: list[str] = []
    if not isinstance(value, dict):
        return [f"transformer must return an object, got {type(value).__name__}"]
    expected = set(output_spec)
    actual = set(value)
    for key in sorted(expected - actual):
        problems.append(f"missing key: {key}")
    for key in sorted(actual - expected):
        problems.append(f"unexpected key: {key}")
    for key in sorted(expected & actual):
        problems.extend(_validate_key(key, value[key], output_spec[key], params))
    return problems


def _validate_key(key: str, value, spec: OutputKeySpec, params: dict) -> list:
    try:
        dims = resolve_shape(spec.shape, params)
    except Exception as exc:
        return [f"key {key}: shape expression failed: {exc}"]
    problems: list[str] = []
    _walk_shape(key, value, dims, spec.element_kind, problems)
    return problems


def _walk_shape(label: str, value, dims: list, kind: str, problems: list) -> None:
    if not dims:
        if not _kind_ok(value, kind):
            problems.append(f"{label}: expected {kind}, got {type(value).__name__}")
        return
    head, rest = dims[0], dims[1:]
    if not isinstance(value, list):
        problems.append(f"{label}: expected a list of length {head}, got {type(value).__name__}")
        return
    if len(value) != head:
        problems.append(f"{label}: expected length {head}, got {len(value)}")
        return
    for i, item in enumerate(value):
        _walk_shape(f"{label}[{i}]", item, rest, kind, problems)


def _kind_ok(value, kind: str) -> bool:
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "string":
        return isinstance(value, str)
    return False


def resolve_shape(shape: tuple, params: dict) -> list:
    """Evaluate dimension expressions (names and arithmetic over parameters)."""
    dims: list[int] = []
    for dim in shape:
        if isinstance(dim, int):
            dims.append(dim)
            continue
        expr = _mzn_parser.Parser(_mzn_parser.tokenize(str(dim))).parse_expr()
        compiled = _mzn_engine.CompiledModel()
        for name, value in params.items():
            if isinstance(value, list):
                value = _json_to_mzn_array(value)
            compiled.params[name] = value
        result = _mzn_engine.Evaluator(compiled).eval(expr, {})
        if not isinstance(result, int) or isinstance(result, bool):
            raise ValueError(f"dimension {dim!r} evaluated to {result!r}, expected an integer")
        dims.append(result)
    return dims


def _json_to_mzn_array(values: list) -> "_mzn_engine.MznArray":
    if values and isinstance(values[0], list):
        rows = len(values)
        cols = len(values[0])
        flat = [v for row in values for v in row]
        return _mzn_engine.MznArray([(1, rows), (1, cols)], flat)
    return _mzn_engine.MznArray([(1, len(values))], list(values))


def canonical_solution(solution: dict) -> str:
    """Canonical JSON used wherever formatted solutions are compared for equality."""
    return json.dumps(solution, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
